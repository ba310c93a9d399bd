"""Penalised additive models: bases, families, fitting and summaries."""
from roadresil.gam.basis import CubicRegressionSpline, TensorInteraction, cr_basis, tensor_basis
from roadresil.gam.families import GaussianIdentity, NegBinLog, nb_theta_moment
from roadresil.gam.fit import (
    DEFAULT_LAMBDA_GRID,
    DegenerateModelError,
    GamFit,
    GamSpec,
    LinearTerm,
    SmoothTerm,
    TensorTerm,
    fit_gam,
)
from roadresil.gam.summary import smooth_curves, summarize_fit, summary_frame

__all__ = [
    "CubicRegressionSpline", "TensorInteraction", "cr_basis", "tensor_basis",
    "GaussianIdentity", "NegBinLog", "nb_theta_moment",
    "DEFAULT_LAMBDA_GRID", "DegenerateModelError", "GamFit", "GamSpec", "LinearTerm", "SmoothTerm", "TensorTerm",
    "fit_gam", "smooth_curves", "summarize_fit", "summary_frame",
]
