"""Knowledge-preserving decomposition of a single linear layer.

A weight matrix W is analyzed through the covariance-weighted SVD of
W @ sigma_tilde.  The bottom-r singular components form a low-rank
adapter B @ A (the redundant subspace, safe to train), and the frozen
part is defined as the exact residual W - B @ A so that the split
reproduces W bit-faithfully regardless of SVD or inversion round-off.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel
from .errors import InvalidRank, RankTooLarge, ShapeError


@dataclass
class KpdConfig:
    """Decomposition hyperparameters.

    ``rank_r`` is the adapter rank (bottom of the spectrum), the remaining
    fields drive the regularized inversion of the input covariance.
    """

    rank_r: int = 4
    lambda0: float = 1e-6
    inverse_threshold: float = 1e-3
    max_doublings: int = 40

    def __post_init__(self) -> None:
        if self.rank_r < 1:
            raise InvalidRank(f"rank_r must be >= 1, got {self.rank_r}")
        if not self.lambda0 > 0:
            raise ValueError(f"lambda0 must be > 0, got {self.lambda0}")
        if not self.inverse_threshold > 0:
            raise ValueError(f"inverse_threshold must be > 0, got {self.inverse_threshold}")


@dataclass
class DecomposedLayer:
    """Frozen residual weight plus the trainable low-rank pair.

    ``singular_values`` keeps the full spectrum of W @ sigma_tilde (all R
    values, descending); the layer-selection stage reads it so the SVD is
    computed once per layer per session.
    """

    w_frozen: np.ndarray
    b: np.ndarray
    a: np.ndarray
    singular_values: np.ndarray
    rank_r: int
    layer_id: int = 0
    lambda_final: float = field(default=0.0, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.w_frozen.shape


def decompose(w, sigma_in, cfg: KpdConfig, layer_id: int = 0) -> DecomposedLayer:
    """Split ``w`` into a frozen part and a bottom-r covariance-guided adapter.

    Steps: regularize/invert sigma_in, SVD of w @ sigma_tilde, take the r
    smallest singular components, factor them symmetrically (square roots
    of the singular values on both factors), and define the frozen weight
    as the exact residual.
    """
    w = numkernel.as_matrix(w, "w")
    sigma_in = numkernel.as_matrix(sigma_in, "sigma_in")
    d_out, d_in = w.shape
    if sigma_in.shape != (d_in, d_in):
        raise ShapeError(
            f"sigma_in must be {d_in}x{d_in} for a {d_out}x{d_in} weight, got {sigma_in.shape}"
        )
    r = cfg.rank_r
    full_rank = min(d_out, d_in)
    if r >= full_rank:
        raise RankTooLarge(f"rank_r={r} must be < min(d_out, d_in)={full_rank}")

    reg = numkernel.regularized_inverse(
        sigma_in, cfg.lambda0, cfg.inverse_threshold, cfg.max_doublings
    )
    res = numkernel.svd(w @ reg.sigma_tilde)
    sqrt_s = np.sqrt(res.s[full_rank - r :])
    b = res.u[:, full_rank - r :] * sqrt_s[np.newaxis, :]
    v_hat = res.vt @ reg.inverse
    a = sqrt_s[:, np.newaxis] * v_hat[full_rank - r :, :]
    w_frozen = w - b @ a
    return DecomposedLayer(
        w_frozen=w_frozen,
        b=b,
        a=a,
        singular_values=res.s,
        rank_r=r,
        layer_id=layer_id,
        lambda_final=reg.lambda_final,
    )


def adapter_product(layer: DecomposedLayer) -> np.ndarray:
    return layer.b @ layer.a


def forward_decomposed(layer: DecomposedLayer, x) -> np.ndarray:
    """Apply the layer as w_frozen @ x + b @ (a @ x).

    Before any adapter training this equals the original W @ x.  Accepts a
    vector or a matrix whose columns are samples.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != layer.w_frozen.shape[1]:
        raise ShapeError(
            f"input length {x.shape[0]} does not match layer width {layer.w_frozen.shape[1]}"
        )
    return layer.w_frozen @ x + layer.b @ (layer.a @ x)


def merge(layer: DecomposedLayer) -> np.ndarray:
    """Fold the adapter back into the frozen weight: w_frozen + b @ a."""
    return layer.w_frozen + layer.b @ layer.a


def save_decomposed(directory, layer: DecomposedLayer, prefix: str = "layer") -> None:
    """Persist as three CKPD-MAT files plus a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    numkernel.save_matrix(directory / f"{prefix}.w_frozen.mat", layer.w_frozen)
    numkernel.save_matrix(directory / f"{prefix}.b.mat", layer.b)
    numkernel.save_matrix(directory / f"{prefix}.a.mat", layer.a)
    sidecar = {
        "layer_id": layer.layer_id,
        "rank_r": layer.rank_r,
        "singular_values": [float(v) for v in layer.singular_values],
    }
    (directory / f"{prefix}.json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=1) + "\n", encoding="ascii"
    )


def load_decomposed(directory, prefix: str = "layer") -> DecomposedLayer:
    directory = Path(directory)
    sidecar = json.loads((directory / f"{prefix}.json").read_text(encoding="ascii"))
    return DecomposedLayer(
        w_frozen=numkernel.load_matrix(directory / f"{prefix}.w_frozen.mat"),
        b=numkernel.load_matrix(directory / f"{prefix}.b.mat"),
        a=numkernel.load_matrix(directory / f"{prefix}.a.mat"),
        singular_values=np.asarray(sidecar["singular_values"], dtype=np.float64),
        rank_r=int(sidecar["rank_r"]),
        layer_id=int(sidecar["layer_id"]),
    )
