"""Locally weighted ensemble Kalman methods."""
from .dynamics import ForwardProblem, IntegrationError, Method, MethodSpec, TimeGrid, Trajectory, integrate
from .kernels import KernelKind, KernelSpec, WeightVector, compute_weights, kernel_eval, weight_matrix
from .local_approx import D2Variant, LocalModel, ModelVariant, build_model, d2_kappa, d_kappa, model_eval
from .moments import Ensemble, Frame, global_frame, global_moments, local_frame, local_moments

__version__ = "0.1.0"

__all__ = [
    "D2Variant", "Ensemble", "ForwardProblem", "Frame", "IntegrationError", "KernelKind", "KernelSpec",
    "LocalModel", "Method", "MethodSpec", "ModelVariant", "TimeGrid", "Trajectory", "WeightVector",
    "build_model", "compute_weights", "d2_kappa", "d_kappa", "global_frame", "global_moments",
    "integrate", "kernel_eval", "local_frame", "local_moments", "model_eval", "weight_matrix",
]
