"""Deterministic dense linear-algebra kernels.

Everything operates on 2-D float64 arrays.  The SVD carries a fixed sign
convention so repeated calls on identical input are bit-identical, which
the regression goldens rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateCovariance,
    FormatError,
    NumericalFailure,
    RegularizationFailure,
    ShapeError,
)

MAT_MAGIC = "CKPD-MAT"
MAT_VERSION = "v1"

_SIGN_EPS = 1e-12


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array, rejecting NaN/Inf."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise FormatError(f"{name} contains non-finite entries")
    return m


@dataclass
class SvdResult:
    """Thin SVD u @ diag(s) @ vt with s descending and the sign convention
    that each singular vector's first non-negligible u component is >= 0."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


@dataclass
class RegularizedInverse:
    """Outcome of the lambda-doubling inversion schedule."""

    sigma_tilde: np.ndarray
    inverse: np.ndarray
    lambda_final: float
    doublings: int


def svd(m) -> SvdResult:
    """Thin SVD with deterministic signs.

    For each singular pair (u_i, v_i) the first component of u_i with
    magnitude above 1e-12 is made non-negative by flipping the pair
    together, so the factorization is unique for generic matrices.
    """
    m = as_matrix(m)
    if min(m.shape) < 1:
        raise ShapeError(f"svd needs at least one row and column, got {m.shape}")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(
            f"SVD failed to converge for {m.shape[0]}x{m.shape[1]} matrix"
        ) from exc
    for i in range(s.shape[0]):
        col = u[:, i]
        nonzero = np.nonzero(np.abs(col) > _SIGN_EPS)[0]
        if nonzero.size and col[nonzero[0]] < 0.0:
            u[:, i] = -col
            vt[i, :] = -vt[i, :]
    return SvdResult(u=u, s=s, vt=vt)


def spectral_norm(m) -> float:
    """Largest singular value."""
    m = as_matrix(m)
    if m.size == 0:
        return 0.0
    try:
        return float(np.linalg.svd(m, compute_uv=False)[0])
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(
            f"SVD failed to converge for {m.shape[0]}x{m.shape[1]} matrix"
        ) from exc


def regularized_inverse(
    sigma,
    lambda0: float = 1e-6,
    threshold: float = 1e-3,
    max_doublings: int = 40,
) -> RegularizedInverse:
    """Invert a symmetric matrix, escalating diagonal regularization on demand.

    A plain inverse (lambda = 0) is attempted first; well-conditioned input
    passes through unmodified.  On failure the matrix is shifted to
    sigma + lambda * mean(diag(sigma)) * I with lambda starting at
    ``lambda0`` and doubling until the residual ||sigma_tilde @ inv - I||_2
    drops to ``threshold`` or the schedule is exhausted.
    """
    sigma = as_matrix(sigma, "sigma")
    n = sigma.shape[0]
    if sigma.shape[1] != n:
        raise ShapeError(f"sigma must be square, got {sigma.shape}")
    if np.max(np.abs(sigma - sigma.T), initial=0.0) > 1e-10:
        raise ShapeError("sigma must be symmetric to 1e-10")

    eye = np.eye(n)

    def attempt(candidate: np.ndarray) -> np.ndarray | None:
        try:
            inv = np.linalg.inv(candidate)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(inv)):
            return None
        if spectral_norm(candidate @ inv - eye) <= threshold:
            return inv
        return None

    inv = attempt(sigma)
    if inv is not None:
        return RegularizedInverse(sigma.copy(), inv, lambda_final=0.0, doublings=0)

    mean_diag = float(np.mean(np.diag(sigma)))
    if mean_diag == 0.0:
        raise DegenerateCovariance("cannot regularize: mean diagonal is zero")

    lam = float(lambda0)
    for doublings in range(max_doublings + 1):
        sigma_tilde = sigma + lam * mean_diag * eye
        inv = attempt(sigma_tilde)
        if inv is not None:
            return RegularizedInverse(sigma_tilde, inv, lambda_final=lam, doublings=doublings)
        lam *= 2.0
    raise RegularizationFailure(
        f"no acceptable inverse within {max_doublings} doublings "
        f"(lambda0={lambda0}, threshold={threshold})"
    )


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(m) -> np.ndarray:
    return as_matrix(m).T.copy()


def frobenius_norm(m) -> float:
    return float(np.linalg.norm(as_matrix(m)))


def add_scaled_identity(m, scale: float) -> np.ndarray:
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"matrix must be square, got {m.shape}")
    return m + float(scale) * np.eye(m.shape[0])


def save_matrix(path, m) -> None:
    """Write in the CKPD-MAT v1 text format (17 significant digits)."""
    m = as_matrix(m)
    rows, cols = m.shape
    lines = [f"{MAT_MAGIC} {MAT_VERSION} {rows} {cols}"]
    for row in m:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_matrix(path) -> np.ndarray:
    """Read a CKPD-MAT v1 file, rejecting wrong magic or shape mismatch."""
    text = Path(path).read_text(encoding="ascii")
    lines = text.splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != MAT_MAGIC or header[1] != MAT_VERSION:
        raise FormatError(f"{path}: bad magic line {lines[0]!r}")
    try:
        rows, cols = int(header[2]), int(header[3])
    except ValueError as exc:
        raise FormatError(f"{path}: non-integer shape in header") from exc
    if rows < 0 or cols < 0:
        raise FormatError(f"{path}: negative shape in header")
    body = [line for line in lines[1:] if line.strip()]
    if len(body) != rows:
        raise FormatError(f"{path}: expected {rows} rows, found {len(body)}")
    data = np.empty((rows, cols), dtype=np.float64)
    for i, line in enumerate(body):
        values = line.split()
        if len(values) != cols:
            raise FormatError(f"{path}: row {i} has {len(values)} values, expected {cols}")
        try:
            data[i] = [float(v) for v in values]
        except ValueError as exc:
            raise FormatError(f"{path}: row {i} has a non-numeric value") from exc
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: non-finite entries")
    return data
