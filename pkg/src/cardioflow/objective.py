"""Registration objective: image similarity, keyframe overlap, EF agreement and
two regularizers on the deformation fields."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import LV_ENDO, jacobian_determinant, spatial_gradients, identity_grid


class UnusableMaskError(ValueError):
    """A keyframe mask has no foreground to compare against."""


@dataclass(frozen=True)
class LossWeights:
    sim: float = 1.0
    seg: float = 1.0
    ef: float = 1.0
    jdet: float = 2.5
    smt: float = 0.1
    sigma_blur: float = 1.0
    eps_ef: float = 1e-6

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {value}")
        if self.sigma_blur <= 0:
            raise ValueError("sigma_blur must be positive")


@dataclass
class LossBreakdown:
    total: float
    sim: float
    seg: float
    ef: float
    jdet: float
    smt: float

    def as_row(self) -> list:
        return [self.total, self.sim, self.seg, self.ef, self.jdet, self.smt]


def _stack_phi(field_list) -> Tensor:
    phis = [f.phi if hasattr(f, "phi") else ad.as_tensor(f) for f in field_list]
    if len(phis) == 1:
        return phis[0].reshape((1,) + phis[0].shape)
    return ad.stack(phis, axis=0)


def sim_loss(frames, warped, sigma: float = 1.0) -> Tensor:
    """Mean squared difference of Gaussian-smoothed frames and warped first frame.

    ``frames`` and ``warped`` are ``[T,H,W]`` (or ``[T,1,H,W]``) arrays/tensors.
    """
    frames, warped = ad.as_tensor(frames), ad.as_tensor(warped)
    if frames.shape[0] != warped.shape[0]:
        raise ValueError(f"{warped.shape[0]} warped images for {frames.shape[0]} frames")
    diff = ad.gaussian_blur(frames, sigma) - ad.gaussian_blur(warped, sigma)
    return ad.square(diff).mean()


def _channels(mask) -> Tensor:
    return mask.channels if hasattr(mask, "channels") else ad.as_tensor(mask)


def seg_loss(m_hat, m_ref, eps: float = 1e-6) -> Tensor:
    """``1 - softDice`` averaged over the foreground classes present in ``m_ref``."""
    pred, ref = _channels(m_hat), _channels(m_ref)
    if pred.shape != ref.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    present = 1 + np.flatnonzero(ref.data[1:].sum(axis=(1, 2)) > 0)
    if present.size == 0:
        raise UnusableMaskError("reference keyframe mask has no foreground pixels")
    fg_pred, fg_ref = pred[present], ref[present]
    inter = (fg_pred * fg_ref).sum(axis=(1, 2))
    denom = fg_pred.sum(axis=(1, 2)) + fg_ref.sum(axis=(1, 2))
    dice = (2.0 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean()


def ef_loss(m_hat, m_ref, eps: float = 1e-6) -> Tensor:
    """``|1 - soft LV area(m_hat) / (LV area(m_ref) + eps)|``."""
    pred, ref = _channels(m_hat), _channels(m_ref)
    if pred.shape[0] <= LV_ENDO or ref.shape[0] <= LV_ENDO:
        raise ValueError("masks lack an LV_endo channel")
    ref_area = float(ref.data[LV_ENDO].sum())
    if ref_area == 0:
        raise UnusableMaskError("reference keyframe mask has no LV_endo pixels")
    ratio = pred[LV_ENDO].sum() / (ref_area + eps)
    return ad.absolute(1.0 - ratio)


def jdet_regularizer(field_list) -> Tensor:
    """Mean over fields and pixels of ``relu(-det J)**2``."""
    det = jacobian_determinant(_stack_phi(field_list))
    return ad.square(ad.relu(-det)).mean()


def smt_regularizer(field_list) -> Tensor:
    """Mean squared forward-difference gradient of the displacement ``phi - id``.

    Per pixel the squared partials of both components are summed, so a unit
    shear ramp scores 1; each direction is averaged over its own grid.
    """
    phi = _stack_phi(field_list)
    h, w = phi.shape[1:3]
    u = phi - identity_grid(h, w)
    d_col, d_row = spatial_gradients(u)
    return ad.square(d_col).sum(axis=-1).mean() + ad.square(d_row).sum(axis=-1).mean()


def total_objective(
    frames,
    warped,
    m_hat1,
    m1,
    field_list,
    weights: Optional[LossWeights] = None,
) -> tuple:
    """Weighted sum of all terms; returns ``(total tensor, LossBreakdown)``."""
    wts = weights or LossWeights()
    terms = {
        "sim": sim_loss(frames, warped, wts.sigma_blur),
        "seg": seg_loss(m_hat1, m1),
        "ef": ef_loss(m_hat1, m1, wts.eps_ef),
        "jdet": jdet_regularizer(field_list),
        "smt": smt_regularizer(field_list),
    }
    total = None
    for name, value in terms.items():
        weighted = getattr(wts, name) * value
        total = weighted if total is None else total + weighted
    breakdown = LossBreakdown(float(total.data), *(float(terms[k].data) for k in ("sim", "seg", "ef", "jdet", "smt")))
    return total, breakdown
