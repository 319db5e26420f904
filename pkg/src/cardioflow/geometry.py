"""Deformation fields, warping of images and masks, Jacobian determinants.

Fields store absolute source coordinates ``(col, row)`` for every target
pixel, so warping is a backward lookup: ``out(p) = src(phi(p))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LABEL_NAMES = ("background", "LV_endo", "MYO", "LA")
BACKGROUND, LV_ENDO, MYO, LA = 0, 1, 2, 3


@dataclass
class DeformationField:
    phi: Tensor
    time: float = 0.0

    @property
    def shape(self) -> tuple:
        return self.phi.shape[:2]

    def displacement(self) -> "DisplacementField":
        h, w = self.shape
        return DisplacementField(self.phi - identity_grid(h, w))

    @classmethod
    def identity(cls, h: int, w: int, time: float = 0.0) -> "DeformationField":
        return cls(identity_grid(h, w), time)


@dataclass
class DisplacementField:
    u: Tensor


@dataclass
class OneHotMask:
    """Per-class probability maps ``[K,H,W]``."""

    channels: Tensor
    label_names: Sequence[str] = field(default_factory=lambda: LABEL_NAMES[:3])

    @property
    def num_classes(self) -> int:
        return self.channels.shape[0]

    @property
    def shape(self) -> tuple:
        return self.channels.shape[1:]

    @classmethod
    def from_labels(cls, labels: np.ndarray, num_classes: Optional[int] = None) -> "OneHotMask":
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise ValueError(f"label mask must be 2-D, got shape {labels.shape}")
        k = int(num_classes if num_classes is not None else max(3, labels.max() + 1))
        if labels.min() < 0 or labels.max() >= k:
            raise ValueError(f"labels must lie in [0, {k - 1}], found {labels.min()}..{labels.max()}")
        onehot = (labels[None] == np.arange(k)[:, None, None]).astype(np.float64)
        return cls(Tensor(onehot), LABEL_NAMES[:k] if k <= len(LABEL_NAMES) else tuple(map(str, range(k))))


def identity_grid(h: int, w: int) -> Tensor:
    """Grid whose entry ``(r, c)`` is ``(c, r)``."""
    if h < 1 or w < 1:
        raise ValueError(f"grid size must be positive, got {h}x{w}")
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    return Tensor(np.stack([cols, rows], axis=-1))


def _phi_tensor(field) -> Tensor:
    return field.phi if isinstance(field, DeformationField) else ad.as_tensor(field)


def _check_sizes(spatial: tuple, phi: Tensor) -> None:
    if tuple(phi.shape[-3:-1]) != tuple(spatial):
        raise ValueError(f"field size {tuple(phi.shape[-3:-1])} does not match image size {tuple(spatial)}")


def warp_image(image: Tensor, field) -> Tensor:
    """Backward-warp ``[C,H,W]`` by one field or a stack ``[T,H,W,2]``.

    Samples falling outside the image read zero.
    """
    image = ad.as_tensor(image)
    phi = _phi_tensor(field)
    _check_sizes(image.shape[-2:], phi)
    return ad.grid_sample_bilinear(image, phi, padding=0.0)


def warp_mask(mask: OneHotMask, field) -> OneHotMask:
    """Warp every class channel bilinearly; outside the image counts as background.

    With a stacked field the result holds ``[T,K,H,W]`` channels.
    """
    phi = _phi_tensor(field)
    _check_sizes(mask.shape, phi)
    pad = np.zeros(mask.num_classes)
    pad[BACKGROUND] = 1.0
    warped = ad.grid_sample_bilinear(mask.channels, phi, padding=pad)
    total = warped.sum(axis=-3, keepdims=True)
    return OneHotMask(warped / total, mask.label_names)


def hard_labels(mask) -> np.ndarray:
    """Argmax over the class axis; ties go to the lowest class index."""
    channels = mask.channels if isinstance(mask, OneHotMask) else mask
    data = channels.data if isinstance(channels, Tensor) else np.asarray(channels)
    return np.argmax(data, axis=-3).astype(np.uint8)


def jacobian_determinant(field) -> Tensor:
    """Forward-difference Jacobian determinant on the ``(H-1) x (W-1)`` grid.

    Accepts ``[H,W,2]`` or a stack ``[T,H,W,2]``.
    """
    phi = _phi_tensor(field)
    if phi.shape[-3] < 2 or phi.shape[-2] < 2:
        raise ValueError("jacobian needs at least a 2x2 field")
    lead = (slice(None),) * (phi.ndim - 3)
    base = phi[lead + (slice(None, -1), slice(None, -1))]
    right = phi[lead + (slice(None, -1), slice(1, None))]
    down = phi[lead + (slice(1, None), slice(None, -1))]
    dx = right - base  # d/dcol of (phi_x, phi_y)
    dy = down - base  # d/drow
    return dx[..., 0] * dy[..., 1] - dy[..., 0] * dx[..., 1]


def sample_field(velocity: Tensor, positions: Tensor) -> Tensor:
    """Bilinear lookup of a ``[H,W,2]`` vector field; clamps at the border."""
    velocity = ad.as_tensor(velocity)
    channels = velocity.transpose(2, 0, 1)
    out = ad.grid_sample_bilinear(channels, positions, padding="border")
    return out.transpose(1, 2, 0)


def spatial_gradients(u: Tensor) -> List[Tensor]:
    """Forward differences of a ``[...,H,W,2]`` field along rows and columns."""
    lead = (slice(None),) * (u.ndim - 3)
    d_col = u[lead + (slice(None), slice(1, None))] - u[lead + (slice(None), slice(None, -1))]
    d_row = u[lead + (slice(1, None), slice(None))] - u[lead + (slice(None, -1), slice(None))]
    return [d_col, d_row]
