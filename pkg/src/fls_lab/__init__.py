"""Amortized inverse-Fisher estimation and second-order pruning on synthetic linear tasks."""

__version__ = "0.1.0"

from .auxloss import AuxConfig, AuxEstimator, AuxTrace, DivergenceError, aux_gradient, aux_loss, convergence_metric, minimize_aux
from .fisher import LinearTask, SpectralFisher, make_linear_task, make_spectral_fisher, sample_gradient_batch
from .metrics import masked_riemannian_distance, normalized_action_error, riemannian_distance
from .qparam import QBlockDiagonal, QDiagonal, QFull, QKroneckerConv, QKroneckerDense, init_scaled_identity, make_q
from .records import ExperimentRecord, read_record, write_record

__all__ = [
    "AuxConfig",
    "AuxEstimator",
    "AuxTrace",
    "DivergenceError",
    "aux_gradient",
    "aux_loss",
    "convergence_metric",
    "minimize_aux",
    "LinearTask",
    "SpectralFisher",
    "make_linear_task",
    "make_spectral_fisher",
    "sample_gradient_batch",
    "masked_riemannian_distance",
    "normalized_action_error",
    "riemannian_distance",
    "QBlockDiagonal",
    "QDiagonal",
    "QFull",
    "QKroneckerConv",
    "QKroneckerDense",
    "init_scaled_identity",
    "make_q",
    "ExperimentRecord",
    "read_record",
    "write_record",
]
