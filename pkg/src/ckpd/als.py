"""Adapter sensitivity scoring and per-session layer selection.

A layer's sensitivity ratio is the share of total singular mass sitting in
the bottom-r components of its covariance-weighted spectrum.  Low ratios
mark layers whose redundant subspace is genuinely insignificant, so the
K lowest-scoring layers are selected for adaptation each session.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import CovarianceBuffer, capture_activations, compute_input_covariance
from .errors import InvalidRank, TooManyLayers, ZeroEnergy
from .kpd import DecomposedLayer, KpdConfig, decompose
from .net import Backbone, effective_weight


@dataclass
class LayerScore:
    layer_id: int
    asr: float
    singular_sum_total: float
    singular_sum_bottom_r: float


@dataclass
class ASRReport:
    """Per-layer ratios plus the session's ranking and selected set."""

    session_id: int
    per_layer: list[LayerScore]
    ranking: list[int]
    selected: list[int]


def compute_asr(singular_values, r: int) -> float:
    """Bottom-r singular mass over total mass, in [0, 1]."""
    s = np.asarray(singular_values, dtype=np.float64).ravel()
    n = s.shape[0]
    if not 1 <= r <= n:
        raise InvalidRank(f"r={r} outside [1, {n}]")
    if np.any(s < 0) or np.any(s[:-1] < s[1:]):
        raise InvalidRank("singular values must be non-negative and descending")
    total = float(np.sum(s))
    if total == 0.0:
        raise ZeroEnergy("all-zero spectrum has no defined sensitivity ratio")
    return float(np.sum(s[n - r :]) / total)


def select_layers(scores, k: int) -> tuple[list[int], list[int]]:
    """Rank ascending by ratio (ties by layer id) and take the first k.

    Returns (ranking, selected).
    """
    scores = list(scores)
    if k > len(scores):
        raise TooManyLayers(f"k={k} exceeds {len(scores)} layers")
    ranking = [lid for lid, _ in sorted(scores, key=lambda t: (t[1], t[0]))]
    return ranking, ranking[:k]


def session_selection(
    model: Backbone,
    buffer: CovarianceBuffer,
    cfg: KpdConfig,
    k: int,
    session_id: int = 0,
    identity_covariance: bool = False,
) -> tuple[ASRReport, list[DecomposedLayer]]:
    """Score every linear layer and decompose the k safest.

    Captures the buffer's activations, decomposes every layer against its
    input covariance to obtain the spectrum, ranks by sensitivity ratio,
    and returns decomposed layers only for the selected set; non-selected
    layers stay as plain weights.  With ``identity_covariance`` the data
    statistics are ignored and every layer is scored against the identity
    (the data-agnostic plain-SVD baseline).
    """
    if identity_covariance:
        sigmas = [np.eye(model.widths[i]) for i in range(model.num_layers)]
    else:
        captures = capture_activations(model, buffer)
        sigmas = [compute_input_covariance(c) for c in captures]
    decomposed = []
    scores = []
    per_layer = []
    for i in range(model.num_layers):
        dec = decompose(effective_weight(model.layers[i]), sigmas[i], cfg, layer_id=i)
        decomposed.append(dec)
        asr = compute_asr(dec.singular_values, cfg.rank_r)
        scores.append((i, asr))
        per_layer.append(
            LayerScore(
                layer_id=i,
                asr=asr,
                singular_sum_total=float(np.sum(dec.singular_values)),
                singular_sum_bottom_r=float(np.sum(dec.singular_values[-cfg.rank_r :])),
            )
        )
    ranking, selected = select_layers(scores, k)
    chosen = [decomposed[i] for i in sorted(selected)]
    return ASRReport(session_id, per_layer, ranking, selected), chosen


def report_to_dict(report: ASRReport) -> dict:
    return {
        "session_id": report.session_id,
        "per_layer": [
            {
                "layer_id": s.layer_id,
                "asr": s.asr,
                "singular_sum_total": s.singular_sum_total,
                "singular_sum_bottom_r": s.singular_sum_bottom_r,
            }
            for s in report.per_layer
        ],
        "ranking": list(report.ranking),
        "selected": list(report.selected),
    }


def report_to_csv(report: ASRReport) -> str:
    selected = set(report.selected)
    lines = ["layer_id,asr,selected"]
    for s in report.per_layer:
        lines.append(f"{s.layer_id},{s.asr:.17g},{int(s.layer_id in selected)}")
    return "\n".join(lines) + "\n"
