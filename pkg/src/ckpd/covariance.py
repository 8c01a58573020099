"""Exemplar buffer and per-layer input covariance estimation.

The buffer stores exactly one representative input per seen class and only
ever grows.  Forwarding the buffer through the backbone captures the input
each layer stage receives, from which the per-layer second-moment matrix
(1/M) F F^T is formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateCovariance,
    DuplicateClass,
    EmptyBuffer,
    EmptyClass,
    FormatError,
    ShapeError,
)
from .net import Backbone, forward_batch

BUF_MAGIC = "CKPD-BUF"
BUF_VERSION = "v1"


@dataclass(frozen=True)
class ClassExemplar:
    class_id: int
    input: np.ndarray


@dataclass
class CovarianceBuffer:
    """One stored sample per seen class; never shrinks."""

    exemplars: list[ClassExemplar] = field(default_factory=list)
    rng_seed: int = 0

    def class_ids(self) -> list[int]:
        return [e.class_id for e in self.exemplars]

    def __len__(self) -> int:
        return len(self.exemplars)


@dataclass
class ActivationCapture:
    """Features seen by one layer: columns are per-exemplar stage inputs."""

    layer_id: int
    features: np.ndarray


def update_buffer(buffer: CovarianceBuffer, new_classes) -> CovarianceBuffer:
    """Append one uniformly chosen sample per new class.

    The choice for class c is drawn from a generator seeded by
    (buffer.rng_seed, c), so replays with the same seed pick identical
    samples regardless of update order.  Existing exemplars are untouched.
    """
    seen = set(buffer.class_ids())
    exemplars = list(buffer.exemplars)
    for class_id, samples in new_classes:
        class_id = int(class_id)
        if class_id in seen:
            raise DuplicateClass(f"class {class_id} already has an exemplar")
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] == 0:
            raise EmptyClass(f"class {class_id} has no samples")
        rng = np.random.default_rng([buffer.rng_seed, class_id])
        idx = int(rng.integers(samples.shape[0]))
        exemplars.append(ClassExemplar(class_id=class_id, input=samples[idx].copy()))
        seen.add(class_id)
    return CovarianceBuffer(exemplars=exemplars, rng_seed=buffer.rng_seed)


def compute_input_covariance(capture: ActivationCapture) -> np.ndarray:
    """(1/M) F F^T for the captured d_in x M feature matrix."""
    f = np.asarray(capture.features, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeError(f"features must be 2-D, got shape {f.shape}")
    m = f.shape[1]
    if m == 0:
        raise DegenerateCovariance("capture has no columns")
    if np.any(np.all(f == 0.0, axis=0)):
        raise DegenerateCovariance("capture contains an all-zero column")
    return (f @ f.T) / m


def capture_activations(model: Backbone, buffer: CovarianceBuffer) -> list[ActivationCapture]:
    """One capture per linear layer from forwarding every exemplar.

    Column j of layer l's capture is the exact stage input layer l sees for
    exemplar j (one column per exemplar; inputs here are plain vectors, so
    there is no token axis).
    """
    if len(buffer) == 0:
        raise EmptyBuffer("cannot capture activations from an empty buffer")
    x = np.stack([e.input for e in buffer.exemplars], axis=1)
    _, stage_inputs = forward_batch(model, x)
    return [ActivationCapture(layer_id=i, features=s) for i, s in enumerate(stage_inputs)]


def save_buffer(path, buffer: CovarianceBuffer) -> None:
    if len(buffer) == 0:
        raise EmptyBuffer("refusing to persist an empty buffer")
    dim = buffer.exemplars[0].input.shape[0]
    lines = [f"{BUF_MAGIC} {BUF_VERSION} {len(buffer)} {dim}"]
    for e in buffer.exemplars:
        lines.append(f"{e.class_id} " + " ".join(f"{v:.17g}" for v in e.input))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_buffer(path, rng_seed: int = 0) -> CovarianceBuffer:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != BUF_MAGIC or header[1] != BUF_VERSION:
        raise FormatError(f"{path}: bad magic line {lines[0]!r}")
    count, dim = int(header[2]), int(header[3])
    body = [line for line in lines[1:] if line.strip()]
    if len(body) != count:
        raise FormatError(f"{path}: expected {count} exemplars, found {len(body)}")
    exemplars: list[ClassExemplar] = []
    seen: set[int] = set()
    for line in body:
        parts = line.split()
        if len(parts) != dim + 1:
            raise FormatError(f"{path}: exemplar line has {len(parts) - 1} values, expected {dim}")
        class_id = int(parts[0])
        if class_id in seen:
            raise FormatError(f"{path}: duplicate class {class_id}")
        seen.add(class_id)
        vec = np.asarray([float(v) for v in parts[1:]], dtype=np.float64)
        if not np.all(np.isfinite(vec)):
            raise FormatError(f"{path}: non-finite exemplar for class {class_id}")
        exemplars.append(ClassExemplar(class_id=class_id, input=vec))
    return CovarianceBuffer(exemplars=exemplars, rng_seed=rng_seed)
