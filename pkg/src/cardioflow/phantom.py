"""Synthetic contracting-chamber sequences with analytic ground truth.

Frame ``t`` is the first frame scaled about the chamber centre by ``s(t)``;
the exact backward map is ``phi_t(p) = c + (p - c) / s(t)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .autodiff import Tensor, blur_matrix
from .geometry import DeformationField, identity_grid
from .sequence import ImageSequence


@dataclass(frozen=True)
class PhantomConfig:
    height: int = 64
    width: int = 64
    num_frames: int = 10
    center: Optional[Tuple[float, float]] = None  # (col, row); image centre by default
    semi_axis_x: float = 12.0
    semi_axis_y: float = 16.0
    myo_thickness: float = 5.0
    scale_es: float = 0.8
    noise: float = 0.15
    blur_sigma: float = 1.0
    intensity_cavity: float = 30.0
    intensity_myo: float = 120.0
    intensity_background: float = 60.0
    profile: str = "linear"
    seed: int = 0

    @property
    def centre(self) -> Tuple[float, float]:
        if self.center is not None:
            return tuple(self.center)
        return ((self.width - 1) / 2.0, (self.height - 1) / 2.0)

    def validate(self) -> None:
        if not 0.0 < self.scale_es < 1.0:
            raise ValueError(f"scale_es must lie in (0, 1), got {self.scale_es}")
        if self.num_frames < 2:
            raise ValueError("a phantom needs at least 2 frames")
        if self.profile not in ("linear", "sinusoidal"):
            raise ValueError(f"unknown profile {self.profile!r}")
        cx, cy = self.centre
        rx = self.semi_axis_x + self.myo_thickness
        ry = self.semi_axis_y + self.myo_thickness
        margin = 4.0
        if cx - rx < margin or cx + rx > self.width - 1 - margin or cy - ry < margin or cy + ry > self.height - 1 - margin:
            raise ValueError("chamber and myocardium do not fit inside the image with a 4 px margin")


@dataclass
class PhantomTruth:
    config: PhantomConfig
    frames_u8: np.ndarray  # [T,H,W] uint8
    labels: np.ndarray  # [T,H,W] uint8
    times: np.ndarray
    fields: List[DeformationField] = field(default_factory=list)

    @property
    def frames(self) -> np.ndarray:
        return self.frames_u8.astype(np.float64) / 255.0

    @property
    def sequence(self) -> ImageSequence:
        return ImageSequence(self.frames, self.times)

    @property
    def ef_area(self) -> float:
        return 1.0 - scale_at(1.0, self.config) ** 2


def scale_at(t: float, cfg: PhantomConfig) -> float:
    if cfg.profile == "sinusoidal":
        return 1.0 - (1.0 - cfg.scale_es) * 0.5 * (1.0 - np.cos(np.pi * t))
    return 1.0 - (1.0 - cfg.scale_es) * t


def analytic_phi(t: float, cfg: PhantomConfig) -> DeformationField:
    """Exact backward map from frame ``t`` into first-frame coordinates."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    s = scale_at(t, cfg)
    grid = identity_grid(cfg.height, cfg.width).data
    centre = np.asarray(cfg.centre)
    return DeformationField(Tensor(centre + (grid - centre) / s), t)


def _labels_from_source(coords: np.ndarray, cfg: PhantomConfig) -> np.ndarray:
    cx, cy = cfg.centre
    dx, dy = coords[..., 0] - cx, coords[..., 1] - cy
    inner = (dx / cfg.semi_axis_x) ** 2 + (dy / cfg.semi_axis_y) ** 2 <= 1.0
    outer = (dx / (cfg.semi_axis_x + cfg.myo_thickness)) ** 2 + (dy / (cfg.semi_axis_y + cfg.myo_thickness)) ** 2 <= 1.0
    labels = np.zeros(coords.shape[:2], dtype=np.uint8)
    labels[outer] = 2
    labels[inner] = 1
    return labels


def render_labels(t: float, cfg: PhantomConfig) -> np.ndarray:
    return _labels_from_source(analytic_phi(t, cfg).phi.data, cfg)


def render_frame(labels: np.ndarray, cfg: PhantomConfig, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Intensity image (0-255 scale) with multiplicative speckle and blur."""
    lut = np.array([cfg.intensity_background, cfg.intensity_cavity, cfg.intensity_myo])
    img = lut[labels]
    if cfg.noise > 0:
        img = img * (1.0 + cfg.noise * rng.standard_normal(img.shape))
    if cfg.blur_sigma > 0:
        img = blur_matrix(cfg.height, cfg.blur_sigma) @ img @ blur_matrix(cfg.width, cfg.blur_sigma).T
    return np.clip(img, 0.0, 255.0)


def generate_phantom(cfg: Optional[PhantomConfig] = None) -> PhantomTruth:
    cfg = cfg or PhantomConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    times = np.linspace(0.0, 1.0, cfg.num_frames)
    frames, labels, fields = [], [], []
    for t in times:
        phi = analytic_phi(float(t), cfg)
        lab = _labels_from_source(phi.phi.data, cfg)
        frames.append(np.round(render_frame(lab, cfg, rng)).astype(np.uint8))
        labels.append(lab)
        fields.append(phi)
    return PhantomTruth(cfg, np.stack(frames), np.stack(labels), times, fields)
