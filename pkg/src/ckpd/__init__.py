"""Covariance-guided weight decomposition for class-incremental learning.

The library splits linear-layer weights into a frozen knowledge-carrying
part and a trainable low-rank redundant part, selects which layers to
adapt by their sensitivity ratio, and drives a select/decompose/train/
merge session protocol on a synthetic few-shot benchmark.
"""

from .als import ASRReport, compute_asr, select_layers, session_selection
from .covariance import (
    ActivationCapture,
    ClassExemplar,
    CovarianceBuffer,
    capture_activations,
    compute_input_covariance,
    update_buffer,
)
from .errors import CkpdError
from .fscil import (
    RunConfig,
    RunMetrics,
    SessionSpec,
    compute_metrics,
    dropout_probe,
    generate_task,
    run_experiment,
    run_experiment_full,
)
from .kpd import DecomposedLayer, KpdConfig, decompose, forward_decomposed, merge
from .net import (
    Backbone,
    GradientTape,
    PlainLinear,
    PrototypeClassifier,
    apply_update,
    classify,
    forward,
    forward_batch,
    loss_and_grads,
    random_backbone,
)
from .numkernel import (
    RegularizedInverse,
    SvdResult,
    frobenius_norm,
    load_matrix,
    matmul,
    regularized_inverse,
    save_matrix,
    spectral_norm,
    svd,
)

__version__ = "0.1.0"

__all__ = [
    "ASRReport",
    "ActivationCapture",
    "Backbone",
    "CkpdError",
    "ClassExemplar",
    "CovarianceBuffer",
    "DecomposedLayer",
    "GradientTape",
    "KpdConfig",
    "PlainLinear",
    "PrototypeClassifier",
    "RegularizedInverse",
    "RunConfig",
    "RunMetrics",
    "SessionSpec",
    "SvdResult",
    "apply_update",
    "capture_activations",
    "classify",
    "compute_asr",
    "compute_input_covariance",
    "compute_metrics",
    "decompose",
    "dropout_probe",
    "forward",
    "forward_batch",
    "forward_decomposed",
    "frobenius_norm",
    "generate_task",
    "load_matrix",
    "loss_and_grads",
    "matmul",
    "merge",
    "random_backbone",
    "regularized_inverse",
    "run_experiment",
    "run_experiment_full",
    "save_matrix",
    "select_layers",
    "session_selection",
    "spectral_norm",
    "svd",
    "update_buffer",
]
