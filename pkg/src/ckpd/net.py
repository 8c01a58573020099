"""Toy feed-forward backbone with a prototype classifier.

Each layer stage applies L2 normalization of its input (the stand-in for
layer normalization, keeping per-layer features centered/scaled), a linear
map that is either a plain weight or a decomposed frozen+adapter pair, and
tanh everywhere except after the last layer.  Gradients are computed by
hand in reverse mode and are restricted to adapter factors, optionally
plain weights (base training), and an explicit set of trainable class
prototypes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel
from .errors import DegenerateInput, FormatError, ShapeError, UnknownLabel
from .kpd import DecomposedLayer


@dataclass
class PlainLinear:
    weight: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


LayerSlot = PlainLinear | DecomposedLayer


@dataclass
class Backbone:
    """Ordered linear layers; each slot is plain or decomposed."""

    layers: list[LayerSlot]
    widths: list[int]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if len(self.widths) != len(self.layers) + 1:
            raise ShapeError("widths must have one more entry than layers")
        for i, layer in enumerate(self.layers):
            expect = (self.widths[i + 1], self.widths[i])
            if layer.shape != expect:
                raise ShapeError(f"layer {i} has shape {layer.shape}, expected {expect}")

    @property
    def num_layers(self) -> int:
        return len(self.layers)


def random_backbone(widths, seed: int) -> Backbone:
    """Backbone with unit-variance Gaussian plain weights, seeded per layer."""
    widths = [int(w) for w in widths]
    layers: list[LayerSlot] = []
    for i in range(len(widths) - 1):
        rng = np.random.default_rng([seed, 71, i])
        layers.append(PlainLinear(rng.normal(0.0, 1.0, size=(widths[i + 1], widths[i]))))
    return Backbone(layers=layers, widths=widths)


def effective_weight(layer: LayerSlot) -> np.ndarray:
    if isinstance(layer, PlainLinear):
        return layer.weight
    return layer.w_frozen + layer.b @ layer.a


def _as_columns(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[:, np.newaxis], True
    if x.ndim == 2:
        return x, False
    raise ShapeError(f"input must be a vector or a column matrix, got ndim={x.ndim}")


@dataclass
class ForwardTrace:
    """Intermediates of a batched forward pass, reused by the backward pass."""

    stage_inputs: list[np.ndarray]  # raw input to each layer stage (pre-normalization)
    normalized: list[np.ndarray]
    norms: list[np.ndarray]
    adapter_mid: list[np.ndarray | None]  # a @ z for decomposed slots
    features: np.ndarray


def _run_forward(model: Backbone, x_cols: np.ndarray, adapter_masks=None) -> ForwardTrace:
    if x_cols.shape[0] != model.widths[0]:
        raise ShapeError(
            f"input width {x_cols.shape[0]} does not match model input width {model.widths[0]}"
        )
    stage_inputs: list[np.ndarray] = []
    normalized: list[np.ndarray] = []
    norms: list[np.ndarray] = []
    adapter_mid: list[np.ndarray | None] = []
    current = x_cols
    last = model.num_layers - 1
    for i, layer in enumerate(model.layers):
        stage_inputs.append(current)
        n = np.linalg.norm(current, axis=0)
        if np.any(n == 0.0):
            raise DegenerateInput(f"zero-norm input at layer {i} cannot be normalized")
        z = current / n
        normalized.append(z)
        norms.append(n)
        if isinstance(layer, PlainLinear):
            adapter_mid.append(None)
            y = layer.weight @ z
        else:
            mid = layer.a @ z
            adapter_mid.append(mid)
            adapter_out = layer.b @ mid
            if adapter_masks is not None and i in adapter_masks:
                adapter_out = adapter_out * adapter_masks[i]
            y = layer.w_frozen @ z + adapter_out
        current = y if i == last else np.tanh(y)
    return ForwardTrace(stage_inputs, normalized, norms, adapter_mid, current)


def forward_batch(model: Backbone, x_cols) -> tuple[np.ndarray, list[np.ndarray]]:
    """Features and recorded stage inputs for a columns-are-samples batch."""
    x_cols, _ = _as_columns(x_cols)
    trace = _run_forward(model, x_cols)
    return trace.features, trace.stage_inputs


def forward_features(model: Backbone, x_cols, adapter_masks=None) -> np.ndarray:
    """Features only; ``adapter_masks`` (layer index -> 0/1 matrix) zeroes
    adapter-output coordinates for the dropout robustness probe."""
    x_cols, _ = _as_columns(x_cols)
    return _run_forward(model, x_cols, adapter_masks=adapter_masks).features


def forward(model: Backbone, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Single-vector forward pass; returns (feature, per-layer stage inputs)."""
    cols, was_vector = _as_columns(x)
    if not was_vector:
        raise ShapeError("forward expects a single vector; use forward_batch for batches")
    trace = _run_forward(model, cols)
    return trace.features[:, 0], [s[:, 0] for s in trace.stage_inputs]


@dataclass
class PrototypeClassifier:
    """Cosine classifier over unit-norm class prototypes."""

    prototypes: dict[int, np.ndarray] = field(default_factory=dict)
    temperature: float = 10.0

    def class_ids(self) -> list[int]:
        return sorted(self.prototypes)


def normalize_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise DegenerateInput("cannot normalize a zero vector")
    return v / n


def set_prototype(clf: PrototypeClassifier, class_id: int, vector) -> None:
    clf.prototypes[int(class_id)] = normalize_vector(vector)


def _prototype_matrix(clf: PrototypeClassifier) -> tuple[list[int], np.ndarray, np.ndarray]:
    ids = clf.class_ids()
    if not ids:
        raise ShapeError("classifier has no prototypes")
    p = np.stack([clf.prototypes[c] for c in ids], axis=0)
    return ids, p, np.linalg.norm(p, axis=1)


def cosine_logits(clf: PrototypeClassifier, features) -> tuple[list[int], np.ndarray]:
    """temperature * cosine(feature, prototype) for every class, batched.

    ``features`` has samples as columns; the returned matrix is
    (num_classes x num_samples) with rows in ascending class-id order.
    """
    f, _ = _as_columns(features)
    ids, p, pn = _prototype_matrix(clf)
    fn = np.linalg.norm(f, axis=0)
    if np.any(fn == 0.0):
        raise DegenerateInput("zero feature vector cannot be classified")
    logits = clf.temperature * (p @ f) / (pn[:, np.newaxis] * fn[np.newaxis, :])
    return ids, logits


def classify(clf: PrototypeClassifier, feature) -> tuple[int, dict[int, float]]:
    """Predicted class (ties break toward the lowest id) and per-class logits."""
    ids, logits = cosine_logits(clf, np.asarray(feature, dtype=np.float64)[:, np.newaxis])
    col = logits[:, 0]
    return ids[int(np.argmax(col))], {c: float(v) for c, v in zip(ids, col)}


@dataclass
class GradientTape:
    """Exact reverse-mode gradients, keyed by layer index or class id.

    Entries exist only for decomposed layers' adapters, optionally plain
    weights when base training is enabled, and the requested trainable
    prototypes; everything else is structurally absent.
    """

    adapter: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    plain: dict[int, np.ndarray] = field(default_factory=dict)
    prototypes: dict[int, np.ndarray] = field(default_factory=dict)


def _softmax_columns(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=0, keepdims=True)


def loss_and_grads(
    model: Backbone,
    clf: PrototypeClassifier,
    batch_x,
    labels,
    trainable_classes=(),
    train_plain: bool = False,
) -> tuple[float, GradientTape]:
    """Mean cross-entropy over the batch and its exact gradients.

    Gradients flow to every decomposed layer's (b, a) pair, to plain
    weights only when ``train_plain`` is set, and to the prototypes listed
    in ``trainable_classes``; all other parameters receive no entry.
    """
    x_cols, _ = _as_columns(batch_x)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    m = x_cols.shape[1]
    if m == 0:
        raise ShapeError("batch is empty")
    if labels.shape[0] != m:
        raise ShapeError(f"{m} samples but {labels.shape[0]} labels")
    for lbl in labels:
        if int(lbl) not in clf.prototypes:
            raise UnknownLabel(f"label {int(lbl)} has no prototype")

    trace = _run_forward(model, x_cols)
    f = trace.features
    ids, p, pn = _prototype_matrix(clf)
    id_to_row = {c: i for i, c in enumerate(ids)}
    fn = np.linalg.norm(f, axis=0)
    if np.any(fn == 0.0):
        raise DegenerateInput("zero feature vector in batch")
    dots = p @ f
    logits = clf.temperature * dots / (pn[:, np.newaxis] * fn[np.newaxis, :])
    probs = _softmax_columns(logits)
    rows = np.array([id_to_row[int(lbl)] for lbl in labels])
    picked = probs[rows, np.arange(m)]
    loss = float(-np.mean(np.log(picked)))

    # d(mean loss)/d(logits)
    g_logits = probs.copy()
    g_logits[rows, np.arange(m)] -= 1.0
    g_logits /= m

    tau = clf.temperature
    tape = GradientTape()

    # Prototype gradients for the trainable classes only.
    for c in sorted(set(int(c) for c in trainable_classes)):
        if c not in id_to_row:
            raise UnknownLabel(f"trainable class {c} has no prototype")
        i = id_to_row[c]
        gl = g_logits[i, :]
        term1 = (f / fn[np.newaxis, :]) @ gl / pn[i]
        term2 = p[i] / pn[i] ** 3 * float(np.sum(gl * dots[i, :] / fn))
        tape.prototypes[c] = tau * (term1 - term2)

    # Gradient wrt features: every class contributes through the softmax.
    weighted = g_logits / pn[:, np.newaxis]
    s_col = np.sum(weighted * dots, axis=0)
    g_f = tau * ((p.T @ weighted) / fn[np.newaxis, :] - f * (s_col / fn**3)[np.newaxis, :])

    # Walk the stages backwards.
    g_y = g_f
    last = model.num_layers - 1
    for i in range(last, -1, -1):
        layer = model.layers[i]
        z = trace.normalized[i]
        if isinstance(layer, PlainLinear):
            if train_plain:
                tape.plain[i] = g_y @ z.T
            g_z = layer.weight.T @ g_y
        else:
            mid = trace.adapter_mid[i]
            bt_g = layer.b.T @ g_y
            tape.adapter[i] = (g_y @ mid.T, bt_g @ z.T)
            g_z = layer.w_frozen.T @ g_y + layer.a.T @ bt_g
        # normalization backward: z = x / ||x||
        g_x = (g_z - z * np.sum(z * g_z, axis=0, keepdims=True)) / trace.norms[i]
        if i > 0:
            # stage input i equals tanh of the previous pre-activation
            g_y = g_x * (1.0 - trace.stage_inputs[i] ** 2)
    return loss, tape


def apply_update(
    model: Backbone,
    clf: PrototypeClassifier,
    tape: GradientTape,
    lr_adapter: float,
    lr_clf: float,
    lr_plain: float | None = None,
) -> None:
    """Plain SGD step.

    Adapter factors step with ``lr_adapter``, plain weights (when the tape
    carries them) with ``lr_plain`` (defaulting to ``lr_clf``), and tape
    prototypes with ``lr_clf`` followed by re-normalization to unit norm.
    Frozen components are untouched.
    """
    if lr_plain is None:
        lr_plain = lr_clf
    for idx, (db, da) in tape.adapter.items():
        layer = model.layers[idx]
        layer.b -= lr_adapter * db
        layer.a -= lr_adapter * da
    for idx, dw in tape.plain.items():
        model.layers[idx].weight -= lr_plain * dw
    for class_id, dp in tape.prototypes.items():
        if not np.any(dp):
            continue
        clf.prototypes[class_id] = normalize_vector(clf.prototypes[class_id] - lr_clf * dp)


def backbone_hash(model: Backbone) -> str:
    """SHA-256 over the merged weights, for drift checks and logs."""
    h = hashlib.sha256()
    for layer in model.layers:
        h.update(np.ascontiguousarray(effective_weight(layer)).tobytes())
    return h.hexdigest()


def model_signature(model: Backbone) -> tuple[tuple[tuple[int, int], ...], int]:
    """Layer shapes and merged parameter count; must be invariant across sessions."""
    shapes = tuple(layer.shape for layer in model.layers)
    return shapes, sum(s[0] * s[1] for s in shapes)


def save_checkpoint(directory, model: Backbone, clf: PrototypeClassifier) -> None:
    """Checkpoint directory: one CKPD-MAT file per layer plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    variants = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, PlainLinear):
            variants.append("plain")
            numkernel.save_matrix(directory / f"layer_{i:03d}.mat", layer.weight)
        else:
            variants.append("decomposed")
            numkernel.save_matrix(directory / f"layer_{i:03d}.w_frozen.mat", layer.w_frozen)
            numkernel.save_matrix(directory / f"layer_{i:03d}.b.mat", layer.b)
            numkernel.save_matrix(directory / f"layer_{i:03d}.a.mat", layer.a)
            sidecar = {
                "layer_id": layer.layer_id,
                "rank_r": layer.rank_r,
                "singular_values": [float(v) for v in layer.singular_values],
            }
            (directory / f"layer_{i:03d}.json").write_text(
                json.dumps(sidecar, sort_keys=True) + "\n", encoding="ascii"
            )
    manifest = {
        "widths": list(model.widths),
        "activation": model.activation,
        "layer_variants": variants,
        "temperature": clf.temperature,
        "prototypes": {str(c): [float(v) for v in vec] for c, vec in sorted(clf.prototypes.items())},
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="ascii"
    )


def load_checkpoint(directory) -> tuple[Backbone, PrototypeClassifier]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{directory}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text(encoding="ascii"))
    layers: list[LayerSlot] = []
    for i, variant in enumerate(manifest["layer_variants"]):
        if variant == "plain":
            layers.append(PlainLinear(numkernel.load_matrix(directory / f"layer_{i:03d}.mat")))
        elif variant == "decomposed":
            sidecar = json.loads((directory / f"layer_{i:03d}.json").read_text(encoding="ascii"))
            layers.append(
                DecomposedLayer(
                    w_frozen=numkernel.load_matrix(directory / f"layer_{i:03d}.w_frozen.mat"),
                    b=numkernel.load_matrix(directory / f"layer_{i:03d}.b.mat"),
                    a=numkernel.load_matrix(directory / f"layer_{i:03d}.a.mat"),
                    singular_values=np.asarray(sidecar["singular_values"], dtype=np.float64),
                    rank_r=int(sidecar["rank_r"]),
                    layer_id=int(sidecar["layer_id"]),
                )
            )
        else:
            raise FormatError(f"unknown layer variant {variant!r}")
    model = Backbone(layers=layers, widths=[int(w) for w in manifest["widths"]],
                     activation=manifest["activation"])
    clf = PrototypeClassifier(temperature=float(manifest["temperature"]))
    for c, vec in manifest["prototypes"].items():
        clf.prototypes[int(c)] = np.asarray(vec, dtype=np.float64)
    return model, clf
