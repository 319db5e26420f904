"""Image sequences and input validation helpers."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

VALID_LABELS = (0, 1, 2, 3)


@dataclass
class ImageSequence:
    """Grayscale frames ``[T,H,W]`` in ``[0,1]`` at normalized times."""

    frames: np.ndarray
    times: Optional[np.ndarray] = None
    pixel_spacing_mm: Optional[float] = None

    def __post_init__(self):
        self.frames = check_frames(self.frames)
        t = self.frames.shape[0]
        self.times = check_times(self.times, t)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple:
        return self.frames.shape[1:]

    def __len__(self) -> int:
        return self.num_frames


def check_frames(frames) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4 and frames.shape[1] == 1:
        frames = frames[:, 0]
    if frames.ndim != 3:
        raise ValueError(f"frames must be [T,H,W], got shape {frames.shape}")
    if frames.shape[0] < 2:
        raise ValueError(f"a sequence needs at least 2 frames, got {frames.shape[0]}")
    if not np.all(np.isfinite(frames)):
        raise ValueError("frames contain non-finite values")
    if frames.min() < 0.0 or frames.max() > 1.0:
        raise ValueError(f"frame intensities must lie in [0,1], got [{frames.min():.3g}, {frames.max():.3g}]")
    return frames


def check_times(times, num_frames: int) -> np.ndarray:
    if times is None:
        return np.linspace(0.0, 1.0, num_frames)
    times = np.asarray(times, dtype=np.float64)
    if times.shape != (num_frames,):
        raise ValueError(f"expected {num_frames} frame times, got shape {times.shape}")
    if times[0] != 0.0 or times[-1] != 1.0 or np.any(np.diff(times) <= 0):
        raise ValueError("frame times must increase strictly from 0 to 1")
    return times


def check_label_mask(mask, shape: Sequence[int], name: str = "mask", labels=VALID_LABELS) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != tuple(shape):
        raise ValueError(f"{name} has shape {mask.shape}, expected {tuple(shape)}")
    if not np.issubdtype(mask.dtype, np.integer):
        if not np.all(mask == np.round(mask)):
            raise ValueError(f"{name} must hold integer labels")
        mask = mask.astype(np.int64)
    bad = np.setdiff1d(np.unique(mask), labels)
    if bad.size:
        raise ValueError(f"{name} contains unknown label {int(bad[0])}")
    return mask.astype(np.uint8)
