from .context import (
    DEFAULT_VECTORS,
    ContextConstraintError,
    ContextLabelSet,
    build_context_map,
    context_slots,
    solve_context_labels,
)
from .estimator import AnatomyCRF
from .filter import GaussianFilter, exact_gaussian_filter, gaussian_filter_highdim
from .inference import CrfParams, MeanFieldResult, brute_force_mean_field, energy, mean_field

__all__ = [
    "DEFAULT_VECTORS",
    "AnatomyCRF",
    "ContextConstraintError",
    "ContextLabelSet",
    "CrfParams",
    "GaussianFilter",
    "MeanFieldResult",
    "brute_force_mean_field",
    "build_context_map",
    "context_slots",
    "energy",
    "exact_gaussian_filter",
    "gaussian_filter_highdim",
    "mean_field",
    "solve_context_labels",
]
