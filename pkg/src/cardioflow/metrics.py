"""Segmentation quality, temporal smoothness and clinical indices on label masks."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import directed_hausdorff

from .geometry import LABEL_NAMES, LV_ENDO, MYO

DEFAULT_TAU = 0.15


class EmptyRegionError(ValueError):
    """A mask lacks the class a metric needs."""


def _pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b, k: int = LV_ENDO) -> float:
    """Dice overlap of class ``k``; 1.0 when neither mask contains it."""
    a, b = _pair(a, b)
    in_a, in_b = a == k, b == k
    total = int(in_a.sum()) + int(in_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(in_a, in_b).sum()) / total


def boundary_points(mask, k: int = LV_ENDO) -> np.ndarray:
    """``(row, col)`` of class pixels with at least one 4-neighbour outside the class.

    Pixels on the image border count as boundary (the outside is not class ``k``).
    """
    region = np.pad(np.asarray(mask) == k, 1, constant_values=False)
    core = region[1:-1, 1:-1]
    interior = region[:-2, 1:-1] & region[2:, 1:-1] & region[1:-1, :-2] & region[1:-1, 2:]
    return np.argwhere(core & ~interior)


def hausdorff(a, b, k: int = LV_ENDO, spacing: float = 1.0, frame: Optional[object] = None) -> float:
    """Symmetric Hausdorff distance between the class-``k`` boundaries of two masks."""
    a, b = _pair(a, b)
    pa, pb = boundary_points(a, k), boundary_points(b, k)
    for name, pts in (("first", pa), ("second", pb)):
        if len(pts) == 0:
            where = f"frame {frame}" if frame is not None else f"{name} mask"
            raise EmptyRegionError(f"{where} has no pixels of class {k}")
    d = max(directed_hausdorff(pa, pb)[0], directed_hausdorff(pb, pa)[0])
    return float(d) * spacing


def temporal_hd(masks: Sequence[np.ndarray], k: int = LV_ENDO, spacing: float = 1.0) -> float:
    """Mean Hausdorff distance between consecutive masks."""
    if len(masks) < 2:
        raise ValueError("temporal_hd needs at least 2 masks")
    dists = [hausdorff(masks[i], masks[i + 1], k, spacing, frame=f"{i}->{i + 1}") for i in range(len(masks) - 1)]
    return float(np.mean(dists))


def ef_from_masks(m_ed, m_es) -> float:
    """Area-based ejection fraction from the LV cavity pixel counts."""
    m_ed, m_es = _pair(m_ed, m_es)
    a_ed = int((m_ed == LV_ENDO).sum())
    if a_ed == 0:
        raise EmptyRegionError("ED mask has no LV_endo pixels")
    return (a_ed - int((m_es == LV_ENDO).sum())) / a_ed


@dataclass
class ShapeAttributes:
    lv_area: float
    lv_width_at_valves: float
    lv_length: float
    lv_orientation: float
    myo_area: float
    epi_com_x: float
    epi_com_y: float

    @classmethod
    def names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def as_list(self) -> List[float]:
        return [getattr(self, n) for n in self.names()]


def principal_axis_angle(points: np.ndarray) -> float:
    """Angle in degrees between the major axis of ``(row, col)`` points and the vertical, in (-90, 90]."""
    pts = points.astype(np.float64)
    d = pts - pts.mean(axis=0)
    c_rr = np.mean(d[:, 0] ** 2)
    c_cc = np.mean(d[:, 1] ** 2)
    c_rc = np.mean(d[:, 0] * d[:, 1])
    angle = 0.5 * np.degrees(np.arctan2(2.0 * c_rc, c_rr - c_cc))
    if angle <= -90.0:
        angle += 180.0
    return float(angle) + 0.0


def shape_attributes(m) -> ShapeAttributes:
    """The seven scalar shape descriptors of one labelled frame."""
    m = np.asarray(m)
    lv = np.argwhere(m == LV_ENDO)
    if len(lv) == 0:
        raise EmptyRegionError("mask has no LV_endo pixels")
    top, bottom = lv[:, 0].min(), lv[:, 0].max()
    band_rows = max(1, int(np.floor(0.05 * (bottom - top + 1))))
    edge = boundary_points(m, LV_ENDO)
    band = edge[edge[:, 0] > bottom - band_rows]
    # leftmost/rightmost by column, ties resolved toward the bottom row
    left = band[np.lexsort((-band[:, 0], band[:, 1]))[0]]
    right = band[np.lexsort((-band[:, 0], -band[:, 1]))[0]]
    width = float(np.hypot(*(right - left)))
    mid = (left + right) / 2.0
    length = float(np.max(np.hypot(edge[:, 0] - mid[0], edge[:, 1] - mid[1])))
    epi = np.argwhere((m == LV_ENDO) | (m == MYO)).astype(np.float64)
    return ShapeAttributes(
        lv_area=float(len(lv)),
        lv_width_at_valves=width,
        lv_length=length,
        lv_orientation=principal_axis_angle(lv),
        myo_area=float((m == MYO).sum()),
        epi_com_x=float(epi[:, 1].mean()),
        epi_com_y=float(epi[:, 0].mean()),
    )


def attribute_series(masks: Sequence[np.ndarray]) -> Dict[str, List[float]]:
    rows = [shape_attributes(m) for m in masks]
    return {name: [getattr(r, name) for r in rows] for name in ShapeAttributes.names()}


def temporal_consistency_errors(series, tau: float = DEFAULT_TAU) -> List[bool]:
    """Per-frame flags: interior frames deviating from the neighbour midpoint by more than ``tau`` of the range.

    Endpoints are never flagged; a constant series never is either.
    """
    a = np.asarray(series, dtype=np.float64)
    if a.ndim != 1 or len(a) < 3:
        raise ValueError("an attribute series needs at least 3 values")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    span = a.max() - a.min()
    flags = [False] * len(a)
    if span == 0:
        return flags
    dev = np.abs(a[1:-1] - 0.5 * (a[:-2] + a[2:]))
    for i, bad in enumerate(dev > tau * span, start=1):
        flags[i] = bool(bad)
    return flags


@dataclass
class SequenceReport:
    num_frames: int
    dice: Dict[str, List[float]]
    mean_dice: Dict[str, float]
    temporal_hd_px: float
    temporal_hd_mm: Optional[float]
    ef_pred: float
    ef_ref: Optional[float]
    ef_abs_error: Optional[float]
    attributes: Dict[str, List[float]]
    flags: Dict[str, List[bool]]
    temporal_error: bool
    tau: float = DEFAULT_TAU
    hd_class: str = LABEL_NAMES[LV_ENDO]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """One row per frame: Dice per class, attributes and their flags."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        classes = sorted(self.dice)
        names = ShapeAttributes.names()
        writer.writerow(["frame"] + [f"dice_{c}" for c in classes] + names + [f"flag_{n}" for n in names])
        for t in range(self.num_frames):
            writer.writerow(
                [t]
                + [repr(self.dice[c][t]) for c in classes]
                + [repr(self.attributes[n][t]) for n in names]
                + [int(self.flags[n][t]) for n in names]
            )
        return buf.getvalue()


def evaluate_sequence(pred: Sequence[np.ndarray], gt: Optional[Sequence[np.ndarray]] = None,
                      spacing: Optional[float] = None, tau: float = DEFAULT_TAU,
                      hd_class: int = LV_ENDO, classes: Sequence[int] = (LV_ENDO, MYO)) -> SequenceReport:
    """Evaluate predicted masks, optionally against a ground-truth sequence."""
    pred = [np.asarray(m) for m in pred]
    if len(pred) < 3:
        raise ValueError("evaluation needs at least 3 frames")
    if gt is not None:
        gt = [np.asarray(m) for m in gt]
        if len(gt) != len(pred):
            raise ValueError(f"{len(pred)} predicted frames but {len(gt)} ground-truth frames")
    dice_series: Dict[str, List[float]] = {}
    if gt is not None:
        for k in classes:
            dice_series[LABEL_NAMES[k]] = [dice(p, g, k) for p, g in zip(pred, gt)]
    hd_px = temporal_hd(pred, hd_class, 1.0)
    attrs = attribute_series(pred)
    flags = {n: temporal_consistency_errors(s, tau) for n, s in attrs.items()}
    ef_pred = ef_from_masks(pred[0], pred[-1])
    ef_ref = ef_from_masks(gt[0], gt[-1]) if gt is not None else None
    return SequenceReport(
        num_frames=len(pred),
        dice=dice_series,
        mean_dice={c: float(np.mean(s)) for c, s in dice_series.items()},
        temporal_hd_px=hd_px,
        temporal_hd_mm=hd_px * spacing if spacing else None,
        ef_pred=ef_pred,
        ef_ref=ef_ref,
        ef_abs_error=abs(ef_pred - ef_ref) if ef_ref is not None else None,
        attributes=attrs,
        flags=flags,
        temporal_error=any(any(f) for f in flags.values()),
        tau=tau,
        hd_class=LABEL_NAMES[hd_class],
    )
