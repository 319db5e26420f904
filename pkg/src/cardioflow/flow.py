"""Euler integration of time-dependent velocity fields into deformations."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .autodiff import Tensor
from .geometry import DeformationField, identity_grid, sample_field

MERGE_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Solver times in ``[0, 1]`` with every frame time inserted exactly."""

    solver_times: tuple
    frame_times: tuple
    frame_positions: tuple

    @property
    def num_steps(self) -> int:
        return len(self.solver_times) - 1

    def position_of(self, t: float) -> int:
        for time, pos in zip(self.frame_times, self.frame_positions):
            if abs(time - t) <= MERGE_TOL:
                return pos
        raise ValueError(f"time {t} is not a frame time of this grid")

    def nearest_frame(self, s: float) -> int:
        """Index of the frame whose time is closest to ``s`` (ties go earlier)."""
        diffs = np.abs(np.asarray(self.frame_times) - s)
        return int(np.flatnonzero(diffs <= diffs.min() + MERGE_TOL)[0])


def build_time_grid(num_frames: int, h: float, frame_times: Sequence[float] = None) -> TimeGrid:
    if num_frames < 2:
        raise ValueError(f"need at least 2 frames, got {num_frames}")
    if not 0 < h <= 1:
        raise ValueError(f"step size must lie in (0, 1], got {h}")
    if frame_times is None:
        frames = [i / (num_frames - 1) for i in range(num_frames)]
    else:
        frames = [float(t) for t in frame_times]
        if len(frames) != num_frames:
            raise ValueError(f"expected {num_frames} frame times, got {len(frames)}")
        if frames[0] != 0.0 or frames[-1] != 1.0 or np.any(np.diff(frames) <= 0):
            raise ValueError("frame times must increase strictly from 0 to 1")
    n_steps = int(np.ceil(1.0 / h - 1e-9))
    steps = [min(k * h, 1.0) for k in range(n_steps + 1)]
    # frame times listed first so they survive merging unchanged
    candidates = sorted([(t, 0) for t in frames] + [(s, 1) for s in steps])
    merged: List[float] = []
    is_frame: List[bool] = []
    for value, kind in candidates:
        if merged and abs(value - merged[-1]) <= MERGE_TOL:
            if kind == 0 and not is_frame[-1]:
                merged[-1], is_frame[-1] = value, True
            continue
        merged.append(value)
        is_frame.append(kind == 0)
    positions = tuple(int(np.argmin(np.abs(np.asarray(merged) - t))) for t in frames)
    return TimeGrid(tuple(merged), tuple(frames), positions)


class VelocityProvider:
    """Source of velocity fields ``[H,W,2]`` (px per unit time) at solver times."""

    def velocities(self, times: Sequence[float]) -> List[Tensor]:
        return [self.evaluate(s) for s in times]

    def evaluate(self, s: float) -> Tensor:
        return self.velocities([s])[0]


def _check_velocity(v: Tensor, shape: tuple) -> None:
    if v.shape != shape:
        raise ValueError(f"velocity provider returned shape {v.shape}, expected {shape}")


def integrate_forward(provider: VelocityProvider, grid: TimeGrid, size: tuple) -> List[DeformationField]:
    """Left-endpoint Euler flow from the identity; one field per frame time."""
    h, w = size
    phi = identity_grid(h, w)
    times = grid.solver_times
    vel = provider.velocities(times[:-1])
    snapshots = {0: phi}
    for k in range(grid.num_steps):
        _check_velocity(vel[k], (h, w, 2))
        phi = phi + (times[k + 1] - times[k]) * sample_field(vel[k], phi)
        snapshots[k + 1] = phi
    return [DeformationField(snapshots[pos], t) for t, pos in zip(grid.frame_times, grid.frame_positions)]


def integrate_inverse(provider: VelocityProvider, grid: TimeGrid, t: float, size: tuple) -> DeformationField:
    """Approximate inverse of the forward field at frame time ``t``.

    Integrates the negated velocity from ``t`` back to 0 along the grid.
    """
    pos = grid.position_of(t)
    h, w = size
    psi = identity_grid(h, w)
    times = grid.solver_times
    if pos == 0:
        return DeformationField(psi, t)
    vel = provider.velocities(times[1 : pos + 1])
    for k in range(pos, 0, -1):
        v = vel[k - 1]
        _check_velocity(v, (h, w, 2))
        psi = psi - (times[k] - times[k - 1]) * sample_field(v, psi)
    return DeformationField(psi, t)


def compose(outer: DeformationField, inner: DeformationField) -> Tensor:
    """Coordinates of ``outer(inner(p))``; the displacement of ``outer`` clamps at the border."""
    h, w = outer.shape
    displacement = outer.phi - identity_grid(h, w)
    return inner.phi + sample_field(displacement, inner.phi)
