"""Per-sequence fitting of the velocity model and mask propagation."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import Tensor
from .flow import TimeGrid, VelocityProvider, build_time_grid, integrate_forward, integrate_inverse
from .geometry import DeformationField, OneHotMask, hard_labels, warp_image, warp_mask, LV_ENDO
from .objective import LossBreakdown, LossWeights, total_objective
from .optim import AdamState, NonFiniteGradientError, adam_step
from .sequence import ImageSequence, check_label_mask
from .velocity import (
    NetConfig,
    NetworkVelocity,
    dense_grid_provider,
    init_dense_grid,
    init_params,
)

logger = logging.getLogger(__name__)

PROVIDERS = ("cnn", "dense-grid")
PRECISIONS = ("float32", "float64")


class NumericalAbort(FloatingPointError):
    """The objective or its gradient became non-finite during a fit."""

    def __init__(self, message: str, breakdown: Optional[LossBreakdown] = None):
        super().__init__(message)
        self.breakdown = breakdown


@dataclass
class FitConfig:
    steps: int = 1000
    lr: float = 0.01
    h: float = 0.1
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    provider: str = "cnn"
    grid_sigma: float = 1.0
    log_every: int = 0
    early_stop: bool = False
    early_stop_window: int = 50
    early_stop_tol: float = 1e-6
    precision: str = "float32"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0 < self.h <= 1:
            raise ValueError(f"h must lie in (0, 1], got {self.h}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.provider not in PROVIDERS:
            raise ValueError(f"provider must be one of {PROVIDERS}, got {self.provider!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FitConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class FitResult:
    params: Dict[str, Tensor]
    fields: List[DeformationField]
    masks: List[np.ndarray]
    history: List[LossBreakdown]
    wall_time: float
    config: FitConfig
    grid: TimeGrid
    net_config: Optional[NetConfig] = None

    @property
    def phi_stack(self) -> np.ndarray:
        return np.stack([f.phi.data for f in self.fields]).astype(np.float64)


def _validate_inputs(seq: ImageSequence, m0, m1):
    m0 = check_label_mask(m0, seq.size, "m0")
    m1 = check_label_mask(m1, seq.size, "m1")
    if not np.any(m0 == LV_ENDO):
        raise ValueError("m0 has no LV_endo pixels")
    if not np.any(m1 == LV_ENDO):
        raise ValueError("m1 has no LV_endo pixels")
    return m0, m1


def _num_classes(m0: np.ndarray, m1: np.ndarray) -> int:
    return 4 if max(m0.max(), m1.max()) >= 3 else 3


def make_provider(params: Dict[str, Tensor], seq: ImageSequence, m0: np.ndarray, grid: TimeGrid,
                  config: FitConfig, net_config: Optional[NetConfig] = None) -> VelocityProvider:
    if config.provider == "dense-grid":
        return dense_grid_provider(params["grid"], config.grid_sigma)
    return NetworkVelocity(params, seq.frames, m0, grid, net_config)


def init_model(config: FitConfig, size: tuple, net_config: Optional[NetConfig] = None) -> Dict[str, Tensor]:
    if config.provider == "dense-grid":
        return init_dense_grid(*size)
    return init_params(config.seed, net_config)


def _net_config(m0: np.ndarray, m1: np.ndarray) -> NetConfig:
    return NetConfig(num_classes=_num_classes(m0, m1))


def fit_sequence(seq: ImageSequence, m0, m1, config: Optional[FitConfig] = None,
                 callback=None) -> FitResult:
    """Optimize the velocity model so the flow explains the sequence and keyframes.

    Each step integrates the flow to every frame time, warps the first frame
    and first mask, evaluates the weighted objective and applies one Adam
    update. ``callback(step, breakdown)`` is invoked after every step.
    """
    config = config or FitConfig()
    m0, m1 = _validate_inputs(seq, m0, m1)
    with ad.default_dtype(config.precision):
        return _fit(seq, m0, m1, config, callback)


def _fit(seq, m0, m1, config, callback) -> FitResult:
    net_cfg = _net_config(m0, m1)
    k = net_cfg.num_classes
    grid = build_time_grid(seq.num_frames, config.h, seq.times)
    params = init_model(config, seq.size, net_cfg)
    provider = make_provider(params, seq, m0, grid, config, net_cfg)

    frames = Tensor(seq.frames[:, None])
    first = Tensor(seq.frames[:1])
    m0_hot = OneHotMask.from_labels(m0, k)
    m1_hot = OneHotMask.from_labels(m1, k)
    state = AdamState()
    history: List[LossBreakdown] = []
    start = time.perf_counter()

    for step in range(config.steps):
        for p in params.values():
            p.grad = None
        fields = integrate_forward(provider, grid, seq.size)
        phis = ad.stack([f.phi for f in fields], axis=0)
        warped = warp_image(first, phis)
        m_hat1 = warp_mask(m0_hot, fields[-1])
        total, breakdown = total_objective(frames, warped, m_hat1, m1_hot, fields, config.weights)
        if not np.isfinite(breakdown.total):
            raise NumericalAbort(f"non-finite loss at step {step}: {breakdown}", breakdown)
        history.append(breakdown)
        if total.requires_grad:
            total.backward()
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
        try:
            adam_step(params, grads, state, config.lr)
        except NonFiniteGradientError as exc:
            raise NumericalAbort(f"{exc} at step {step}: {breakdown}", breakdown) from exc
        if callback is not None:
            callback(step, breakdown)
        if config.log_every and step % config.log_every == 0:
            logger.info("step %d total %.6f sim %.6f seg %.6f ef %.6f jdet %.3g smt %.6f", step, *breakdown.as_row())
        if config.early_stop and step >= config.early_stop_window:
            past = history[-1 - config.early_stop_window].total
            if past - breakdown.total < config.early_stop_tol:
                logger.info("early stop at step %d", step)
                break

    for p in params.values():
        p.grad = None
    fields, masks = _propagate(provider, grid, seq, m0_hot)
    return FitResult(params, fields, masks, history, time.perf_counter() - start, config, grid, net_cfg)


def _propagate(provider, grid, seq, m0_hot):
    with ad.no_grad():
        fields = integrate_forward(provider, grid, seq.size)
        phis = ad.stack([f.phi for f in fields], axis=0)
        soft = warp_mask(m0_hot, phis)
        labels = hard_labels(soft)
    return fields, [labels[i] for i in range(len(fields))]


def propagate_masks(params: Dict[str, Tensor], seq: ImageSequence, m0, config: Optional[FitConfig] = None,
                    num_classes: int = 3) -> List[np.ndarray]:
    """Warp the first-frame mask to every frame with the flow of ``params``."""
    config = config or FitConfig()
    m0 = check_label_mask(m0, seq.size, "m0")
    k = max(num_classes, 4 if m0.max() >= 3 else 3)
    grid = build_time_grid(seq.num_frames, config.h, seq.times)
    with ad.default_dtype(config.precision):
        provider = make_provider(params, seq, m0, grid, config, NetConfig(num_classes=k))
        return _propagate(provider, grid, seq, OneHotMask.from_labels(m0, k))[1]


def inverse_fields(result: FitResult, seq: ImageSequence, m0) -> List[DeformationField]:
    """Inverse flow at every frame time by integrating the negated velocity."""
    m0 = check_label_mask(m0, seq.size, "m0")
    provider = make_provider(result.params, seq, m0, result.grid, result.config, result.net_config)
    with ad.no_grad(), ad.default_dtype(result.config.precision):
        return [integrate_inverse(provider, result.grid, t, seq.size) for t in result.grid.frame_times]


class SequenceRegistration(BaseEstimator):
    """Estimator wrapper: ``fit`` one sequence, ``predict`` its propagated masks.

    Parameters mirror :class:`FitConfig`; loss weights are given as a
    :class:`LossWeights` or a plain dict.
    """

    def __init__(self, steps=1000, lr=0.01, h=0.1, seed=0, weights=None, provider="cnn",
                 grid_sigma=1.0, log_every=0, early_stop=False):
        self.steps = steps
        self.lr = lr
        self.h = h
        self.seed = seed
        self.weights = weights
        self.provider = provider
        self.grid_sigma = grid_sigma
        self.log_every = log_every
        self.early_stop = early_stop

    def _config(self) -> FitConfig:
        weights = self.weights if self.weights is not None else LossWeights()
        return FitConfig(steps=self.steps, lr=self.lr, h=self.h, seed=self.seed, weights=weights,
                         provider=self.provider, grid_sigma=self.grid_sigma, log_every=self.log_every,
                         early_stop=self.early_stop)

    def fit(self, X, y=None, *, m0, m1, times=None, pixel_spacing_mm=None):
        """``X`` is a ``[T,H,W]`` frame array or an :class:`ImageSequence`."""
        seq = X if isinstance(X, ImageSequence) else ImageSequence(X, times, pixel_spacing_mm)
        result = fit_sequence(seq, m0, m1, self._config())
        self.result_ = result
        self.params_ = result.params
        self.fields_ = result.fields
        self.masks_ = np.stack(result.masks)
        self.loss_history_ = result.history
        self.n_frames_ = seq.num_frames
        return self

    def predict(self, X=None):
        """Propagated label masks ``[T,H,W]`` of the fitted sequence."""
        check_is_fitted(self, "masks_")
        if X is not None:
            frames = X.frames if isinstance(X, ImageSequence) else np.asarray(X)
            if frames.shape[0] != self.n_frames_:
                raise ValueError(f"fitted on {self.n_frames_} frames, got {frames.shape[0]}")
        return self.masks_

    def transform(self, X):
        """Warp an image (or ``[C,H,W]`` stack) from frame 0 into every frame."""
        check_is_fitted(self, "fields_")
        image = np.asarray(X, dtype=np.float64)
        if image.ndim == 2:
            image = image[None]
        phis = Tensor(np.stack([f.phi.data for f in self.fields_]))
        with ad.no_grad():
            return warp_image(Tensor(image), phis).data

    def score(self, X, y):
        """Mean LV_endo Dice of the propagated masks against ``y`` ``[T,H,W]``."""
        from .metrics import dice

        pred = self.predict(X)
        y = np.asarray(y)
        return float(np.mean([dice(p, g, LV_ENDO) for p, g in zip(pred, y)]))
