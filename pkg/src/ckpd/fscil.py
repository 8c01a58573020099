"""Session protocol: synthetic benchmark, training loops, and metrics.

A run is a base session followed by p-way q-shot incremental sessions,
each executing select / decompose / train / merge and then extending the
exemplar buffer.  Several adaptation strategies share the protocol and
differ only in how (or whether) the backbone is adapted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .als import ASRReport, session_selection
from .covariance import CovarianceBuffer, update_buffer
from .errors import CkpdError, InvalidRate, InvalidSpec, InvalidStrategy
from .kpd import DecomposedLayer, KpdConfig, merge
from .net import (
    Backbone,
    PlainLinear,
    PrototypeClassifier,
    apply_update,
    forward_features,
    loss_and_grads,
    model_signature,
    normalize_vector,
    random_backbone,
)

STRATEGIES = ("ckpd", "kpd_static", "freeze", "full_adapt", "lora_random", "svd_plain")

DEFAULT_WIDTHS = (32, 64, 64, 64, 64, 64, 32)

# rng stream tags, fixed so every consumer draws from an independent stream
_TAG_TASK = 11
_TAG_BUFFER = 31
_TAG_BASE = 41
_TAG_INCR = 51
_TAG_LORA = 61
_TAG_DROPOUT = 81


@dataclass
class SessionSpec:
    """Benchmark shape: base set plus ways x shots increments."""

    base_classes: int = 20
    base_samples_per_class: int = 100
    num_incremental: int = 4
    ways: int = 5
    shots: int = 5
    test_samples_per_class: int = 50
    seed: int = 1
    input_dim: int = 32
    noise_sigma: float = 0.25


@dataclass
class SessionData:
    session_id: int
    class_ids: list[int]
    train: dict[int, np.ndarray]  # class id -> (n x d) samples
    test: dict[int, np.ndarray]


@dataclass
class SyntheticTask:
    input_dim: int
    sigma: float
    class_means: dict[int, np.ndarray]
    sessions: list[SessionData]


@dataclass
class RunConfig:
    """Everything an experiment needs besides the session spec."""

    kpd: KpdConfig = field(default_factory=KpdConfig)
    k_layers: int = 2
    widths: tuple = DEFAULT_WIDTHS
    temperature: float = 10.0
    base_epochs: int = 20
    base_lr: float = 0.05
    incremental_lr: float = 0.05
    adapter_lr: float | None = None  # defaults to 10% of incremental_lr
    iterations: int = 200
    batch_size: int = 32

    def effective_adapter_lr(self) -> float:
        return 0.1 * self.incremental_lr if self.adapter_lr is None else self.adapter_lr


@dataclass
class SessionRecord:
    session: int
    acc_all: float
    acc_base: float
    acc_novel: float


@dataclass
class RunMetrics:
    sessions: list[SessionRecord]
    avg: float
    pd: float
    strategy: str = ""
    seed: int = 0


def generate_task(spec: SessionSpec) -> SyntheticTask:
    """Sample class means on the unit sphere and Gaussian clouds around them.

    Generation is a pure function of the spec's seed; train and test splits
    are drawn separately.
    """
    if spec.ways < 1 or spec.shots < 1:
        raise InvalidSpec("ways and shots must both be >= 1")
    if spec.base_classes < 1 or spec.base_samples_per_class < 1:
        raise InvalidSpec("base session must have classes and samples")
    if spec.num_incremental < 0 or spec.test_samples_per_class < 1:
        raise InvalidSpec("invalid incremental/test counts")
    rng = np.random.default_rng([spec.seed, _TAG_TASK])
    total = spec.base_classes + spec.num_incremental * spec.ways
    means: dict[int, np.ndarray] = {}
    for c in range(total):
        v = rng.normal(size=spec.input_dim)
        means[c] = v / np.linalg.norm(v)

    def draw(class_id: int, n: int) -> np.ndarray:
        noise = rng.normal(size=(n, spec.input_dim))
        return means[class_id] + spec.noise_sigma * noise

    sessions: list[SessionData] = []
    next_class = 0
    for t in range(spec.num_incremental + 1):
        if t == 0:
            ids = list(range(spec.base_classes))
            n_train = spec.base_samples_per_class
        else:
            ids = list(range(next_class, next_class + spec.ways))
            n_train = spec.shots
        next_class = ids[-1] + 1
        train = {c: draw(c, n_train) for c in ids}
        test = {c: draw(c, spec.test_samples_per_class) for c in ids}
        sessions.append(SessionData(session_id=t, class_ids=ids, train=train, test=test))
    return SyntheticTask(spec.input_dim, spec.noise_sigma, means, sessions)


@dataclass
class ExperimentState:
    spec: SessionSpec
    cfg: RunConfig
    strategy: str
    task: SyntheticTask
    model: Backbone
    clf: PrototypeClassifier
    buffer: CovarianceBuffer
    base_signature: tuple
    history: list[SessionRecord] = field(default_factory=list)
    reports: list[ASRReport] = field(default_factory=list)
    session_index: int = 0

    def seen_test_data(self) -> dict[int, np.ndarray]:
        data: dict[int, np.ndarray] = {}
        for s in self.task.sessions[: self.session_index + 1]:
            data.update(s.test)
        return data

    def base_class_ids(self) -> set[int]:
        return set(self.task.sessions[0].class_ids)


def _class_mean_prototypes(model, clf, train, class_ids) -> None:
    for c in sorted(class_ids):
        feats = forward_features(model, train[c].T)
        clf.prototypes[c] = normalize_vector(np.mean(feats, axis=1))


def _flatten_training_set(train: dict[int, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for c in sorted(train):
        xs.append(train[c].T)
        ys.append(np.full(train[c].shape[0], c, dtype=np.int64))
    return np.concatenate(xs, axis=1), np.concatenate(ys)


def evaluate(model, clf, test_by_class, base_ids, adapter_masks=None):
    """Micro-averaged accuracy over all / base / novel test samples."""
    xs, ys = _flatten_training_set(test_by_class)
    feats = forward_features(model, xs, adapter_masks=adapter_masks)
    ids, p, pn = _prototype_stack(clf)
    fn = np.linalg.norm(feats, axis=0)
    logits = (p @ feats) / (pn[:, np.newaxis] * fn[np.newaxis, :])
    preds = np.asarray(ids)[np.argmax(logits, axis=0)]
    correct = preds == ys
    base_mask = np.isin(ys, sorted(base_ids))

    def rate(mask) -> float:
        return float(np.mean(correct[mask])) if np.any(mask) else math.nan

    return rate(np.ones_like(base_mask)), rate(base_mask), rate(~base_mask)


def _prototype_stack(clf):
    ids = clf.class_ids()
    p = np.stack([clf.prototypes[c] for c in ids], axis=0)
    return ids, p, np.linalg.norm(p, axis=1)


def run_base_session(model, clf, task, epochs, lr, batch_size=32, seed=0):
    """Train all plain layers plus base prototypes; seed the exemplar buffer."""
    base = task.sessions[0]
    _class_mean_prototypes(model, clf, base.train, base.class_ids)
    xs, ys = _flatten_training_set(base.train)
    n = xs.shape[1]
    for epoch in range(epochs):
        order = np.random.default_rng([seed, _TAG_BASE, epoch]).permutation(n)
        for start in range(0, n, batch_size):
            take = order[start : start + batch_size]
            _, tape = loss_and_grads(
                model, clf, xs[:, take], ys[take],
                trainable_classes=base.class_ids, train_plain=True,
            )
            apply_update(model, clf, tape, lr_adapter=0.0, lr_clf=lr)
    buffer_seed = int(np.random.SeedSequence([seed, _TAG_BUFFER]).generate_state(1)[0])
    buffer = update_buffer(
        CovarianceBuffer(rng_seed=buffer_seed),
        [(c, base.train[c]) for c in base.class_ids],
    )
    return model, clf, buffer


def assemble_batch(session_xs, session_ys, buffer, batch_size, rng):
    """Current-session samples plus rehearsal exemplars.

    The whole session set is used when it fits in a batch, otherwise a
    seeded subsample; the full buffer is appended when it fits, otherwise a
    seeded subsample of ``batch_size`` exemplars.
    """
    n = session_xs.shape[1]
    if n > batch_size:
        take = np.sort(rng.choice(n, size=batch_size, replace=False))
        xs, ys = session_xs[:, take], session_ys[take]
    else:
        xs, ys = session_xs, session_ys
    if len(buffer) > 0:
        if len(buffer) > batch_size:
            idx = np.sort(rng.choice(len(buffer), size=batch_size, replace=False))
        else:
            idx = np.arange(len(buffer))
        reh_x = np.stack([buffer.exemplars[i].input for i in idx], axis=1)
        reh_y = np.asarray([buffer.exemplars[i].class_id for i in idx], dtype=np.int64)
        xs = np.concatenate([xs, reh_x], axis=1)
        ys = np.concatenate([ys, reh_y])
    return xs, ys


def _install_layers(model: Backbone, layers: list[DecomposedLayer]) -> None:
    for dec in layers:
        model.layers[dec.layer_id] = dec


def _merge_model(model: Backbone) -> None:
    for i, layer in enumerate(model.layers):
        if isinstance(layer, DecomposedLayer):
            model.layers[i] = PlainLinear(merge(layer))


def _check_zero_overhead(model: Backbone, base_signature) -> None:
    if model_signature(model) != base_signature:
        raise CkpdError("zero-overhead violated: model structure drifted from base session")


def prepare_incremental_session(state: ExperimentState, data: SessionData):
    """Select and decompose layers per strategy, then add new prototypes."""
    cfg, t = state.cfg, data.session_id
    report = None
    if state.strategy in ("ckpd", "svd_plain"):
        report, chosen = session_selection(
            state.model, state.buffer, cfg.kpd, cfg.k_layers, session_id=t,
            identity_covariance=state.strategy == "svd_plain",
        )
        _install_layers(state.model, chosen)
    elif state.strategy == "lora_random":
        report, chosen = session_selection(
            state.model, state.buffer, cfg.kpd, cfg.k_layers, session_id=t
        )
        for dec in chosen:
            d_out, d_in = dec.shape
            rng = np.random.default_rng([state.spec.seed, _TAG_LORA, t, dec.layer_id])
            lora = DecomposedLayer(
                # keep the exact original weight frozen; adapters start at zero product
                w_frozen=state.model.layers[dec.layer_id].weight.copy(),
                b=np.zeros((d_out, cfg.kpd.rank_r)),
                a=rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(cfg.kpd.rank_r, d_in)),
                singular_values=dec.singular_values,
                rank_r=cfg.kpd.rank_r,
                layer_id=dec.layer_id,
            )
            state.model.layers[dec.layer_id] = lora
    elif state.strategy == "kpd_static":
        has_adapters = any(isinstance(l, DecomposedLayer) for l in state.model.layers)
        if not has_adapters:
            report, chosen = session_selection(
                state.model, state.buffer, cfg.kpd, cfg.k_layers, session_id=t
            )
            _install_layers(state.model, chosen)
    elif state.strategy not in ("freeze", "full_adapt"):
        raise InvalidStrategy(f"unknown strategy {state.strategy!r}")
    if report is not None:
        state.reports.append(report)
    _class_mean_prototypes(state.model, state.clf, data.train, data.class_ids)
    return report


def train_incremental_session(state: ExperimentState, data: SessionData) -> None:
    """Adapter (and, for full_adapt, weight) updates with buffer rehearsal."""
    cfg = state.cfg
    xs, ys = _flatten_training_set(data.train)
    lr_adapter = cfg.effective_adapter_lr()
    train_plain = state.strategy == "full_adapt"
    for it in range(cfg.iterations):
        rng = np.random.default_rng([state.spec.seed, _TAG_INCR, data.session_id, it])
        bx, by = assemble_batch(xs, ys, state.buffer, cfg.batch_size, rng)
        _, tape = loss_and_grads(
            state.model, state.clf, bx, by,
            trainable_classes=data.class_ids, train_plain=train_plain,
        )
        # full backbone tuning runs at the session lr; only low-rank adapters
        # get the reduced rate
        apply_update(
            state.model, state.clf, tape,
            lr_adapter=lr_adapter, lr_clf=cfg.incremental_lr,
            lr_plain=cfg.incremental_lr,
        )


def finalize_incremental_session(state: ExperimentState, data: SessionData) -> SessionRecord:
    """Merge, grow the buffer, and record post-merge metrics."""
    if state.strategy != "kpd_static":
        _merge_model(state.model)
    _check_zero_overhead(state.model, state.base_signature)
    state.buffer = update_buffer(state.buffer, [(c, data.train[c]) for c in data.class_ids])
    state.session_index = data.session_id
    acc_all, acc_base, acc_novel = evaluate(
        state.model, state.clf, state.seen_test_data(), state.base_class_ids()
    )
    record = SessionRecord(data.session_id, acc_all, acc_base, acc_novel)
    state.history.append(record)
    return record


def run_incremental_session(state: ExperimentState, data: SessionData) -> SessionRecord:
    prepare_incremental_session(state, data)
    train_incremental_session(state, data)
    return finalize_incremental_session(state, data)


def start_experiment(spec: SessionSpec, strategy: str, cfg: RunConfig) -> ExperimentState:
    """Generate data, train the base session, and record session-0 metrics."""
    if strategy not in STRATEGIES:
        raise InvalidStrategy(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if cfg.widths[0] != spec.input_dim:
        raise InvalidSpec(
            f"model input width {cfg.widths[0]} does not match input_dim {spec.input_dim}"
        )
    task = generate_task(spec)
    model = random_backbone(cfg.widths, spec.seed)
    clf = PrototypeClassifier(temperature=cfg.temperature)
    model, clf, buffer = run_base_session(
        model, clf, task, cfg.base_epochs, cfg.base_lr,
        batch_size=cfg.batch_size, seed=spec.seed,
    )
    state = ExperimentState(
        spec=spec, cfg=cfg, strategy=strategy, task=task,
        model=model, clf=clf, buffer=buffer,
        base_signature=model_signature(model),
    )
    acc_all, acc_base, acc_novel = evaluate(
        model, clf, state.seen_test_data(), state.base_class_ids()
    )
    state.history.append(SessionRecord(0, acc_all, acc_base, acc_novel))
    return state


def finish_experiment(state: ExperimentState) -> RunMetrics:
    """Merge any remaining adapters (static decomposition keeps them across
    sessions) and compute the run's metrics."""
    _merge_model(state.model)
    _check_zero_overhead(state.model, state.base_signature)
    return compute_metrics(state.history, strategy=state.strategy, seed=state.spec.seed)


def run_experiment_full(spec: SessionSpec, strategy: str, cfg: RunConfig):
    """Complete run; returns (metrics, final state)."""
    state = start_experiment(spec, strategy, cfg)
    for data in state.task.sessions[1:]:
        run_incremental_session(state, data)
    metrics = finish_experiment(state)
    return metrics, state


def run_experiment(spec: SessionSpec, strategy: str, cfg: RunConfig) -> RunMetrics:
    metrics, _ = run_experiment_full(spec, strategy, cfg)
    return metrics


def dropout_probe(state: ExperimentState, rate: float, eval_data=None, mask_seed=None):
    """Accuracy under Bernoulli masking of each adapter's output coordinates.

    The mask is unscaled (no 1/(1-rate) correction), applied at evaluation
    only, and seeded per layer so reruns and cross-strategy comparisons see
    identical masks on shared layers.  Returns (base_acc, novel_acc).
    """
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")
    if eval_data is None:
        eval_data = state.seen_test_data()
    if mask_seed is None:
        mask_seed = int(np.random.SeedSequence([state.spec.seed, _TAG_DROPOUT]).generate_state(1)[0])
    n_samples = sum(x.shape[0] for x in eval_data.values())
    masks = {}
    for i, layer in enumerate(state.model.layers):
        if isinstance(layer, DecomposedLayer):
            rng = np.random.default_rng([mask_seed, i])
            masks[i] = (rng.random((layer.shape[0], n_samples)) >= rate).astype(np.float64)
    _, acc_base, acc_novel = evaluate(
        state.model, state.clf, eval_data, state.base_class_ids(), adapter_masks=masks
    )
    return acc_base, acc_novel


def compute_metrics(history, strategy: str = "", seed: int = 0) -> RunMetrics:
    """AVG (mean of per-session all-seen accuracy) and PD (first - last)."""
    records = list(history)
    if not records:
        raise InvalidSpec("metrics need at least one recorded session")
    accs = [r.acc_all for r in records]
    return RunMetrics(
        sessions=records,
        avg=float(np.mean(accs)),
        pd=float(accs[0] - accs[-1]),
        strategy=strategy,
        seed=seed,
    )


def metrics_to_csv(metrics: RunMetrics) -> str:
    lines = ["session,acc_all,acc_base,acc_novel"]
    for r in metrics.sessions:
        lines.append(f"{r.session},{r.acc_all:.17g},{r.acc_base:.17g},{r.acc_novel:.17g}")
    return "\n".join(lines) + "\n"


def parse_metrics_csv(text: str) -> list[SessionRecord]:
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or lines[0] != "session,acc_all,acc_base,acc_novel":
        raise InvalidSpec("metrics CSV must start with the standard header")
    records = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 4:
            raise InvalidSpec(f"bad metrics row: {line!r}")
        records.append(
            SessionRecord(int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3]))
        )
    return records
