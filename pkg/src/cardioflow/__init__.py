"""Mask propagation through image sequences by fitting a neural velocity field.

A small reverse-mode autodiff engine drives a conditioned velocity network whose
Euler-integrated flow warps the first frame and its label mask to every frame.
"""
from .autodiff import Tensor, default_dtype, no_grad
from .flow import TimeGrid, build_time_grid, integrate_forward, integrate_inverse
from .geometry import (
    DeformationField,
    OneHotMask,
    hard_labels,
    identity_grid,
    jacobian_determinant,
    warp_image,
    warp_mask,
)
from .metrics import (
    EmptyRegionError,
    SequenceReport,
    dice,
    ef_from_masks,
    evaluate_sequence,
    hausdorff,
    temporal_consistency_errors,
    temporal_hd,
)
from .objective import LossBreakdown, LossWeights, total_objective
from .phantom import PhantomConfig, PhantomTruth, analytic_phi, generate_phantom
from .registration import (
    FitConfig,
    FitResult,
    NumericalAbort,
    SequenceRegistration,
    fit_sequence,
    inverse_fields,
    propagate_masks,
)
from .sequence import ImageSequence
from .velocity import NetConfig, init_params

__version__ = "0.1.0"

__all__ = [
    "Tensor", "default_dtype", "no_grad",
    "TimeGrid", "build_time_grid", "integrate_forward", "integrate_inverse",
    "DeformationField", "OneHotMask", "hard_labels", "identity_grid", "jacobian_determinant",
    "warp_image", "warp_mask",
    "EmptyRegionError", "SequenceReport", "dice", "ef_from_masks", "evaluate_sequence", "hausdorff",
    "temporal_consistency_errors", "temporal_hd",
    "LossBreakdown", "LossWeights", "total_objective",
    "PhantomConfig", "PhantomTruth", "analytic_phi", "generate_phantom",
    "FitConfig", "FitResult", "NumericalAbort", "SequenceRegistration", "fit_sequence",
    "inverse_fields", "propagate_masks",
    "ImageSequence", "NetConfig", "init_params",
]
