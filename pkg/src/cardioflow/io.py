"""On-disk formats: sequence directories, field dumps, loss logs, reports and overlays."""
from __future__ import annotations

import csv
import json
import re
import struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .sequence import VALID_LABELS, ImageSequence

FIELD_MAGIC = b"EODF"
FIELD_VERSION = 1
_FIELD_HEADER = struct.Struct("<4sBIII")

FRAME_PATTERN = "frame_{:04d}.png"
MASK_PATTERN = "mask_{:04d}.png"
OVERLAY_PATTERN = "overlay_{:04d}.png"
LOSS_HEADER = ["step", "total", "sim", "seg", "ef", "jdet", "smt"]

# RGB per label for overlays; background stays unblended
LABEL_COLORS = {1: (220, 40, 40), 2: (40, 200, 60), 3: (50, 90, 230)}


class FormatError(ValueError):
    """A file on disk does not match its declared format."""


def _read_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FormatError(f"missing file: {path}")
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P", "I;16", "I"):
                img = img.convert("L")
            return np.asarray(img)
    except OSError as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc


def _write_png(path: Path, array: np.ndarray) -> None:
    try:
        Image.fromarray(np.ascontiguousarray(array)).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_label_png(path, shape: Optional[tuple] = None, labels=VALID_LABELS) -> np.ndarray:
    path = Path(path)
    mask = _read_png(path)
    if mask.ndim != 2:
        raise FormatError(f"{path}: label image must be single-channel")
    if shape is not None and mask.shape != tuple(shape):
        raise FormatError(f"{path}: size {mask.shape} does not match frames {tuple(shape)}")
    bad = np.setdiff1d(np.unique(mask), labels)
    if bad.size:
        raise FormatError(f"{path}: unknown label {int(bad[0])}")
    return mask.astype(np.uint8)


def write_label_png(path, mask: np.ndarray) -> None:
    _write_png(Path(path), np.asarray(mask, dtype=np.uint8))


def read_meta(directory) -> dict:
    path = Path(directory) / "meta.json"
    if not path.is_file():
        raise FormatError(f"missing meta.json in {directory}")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(meta.get("num_frames"), int) or meta["num_frames"] < 2:
        raise FormatError(f"{path}: num_frames must be an integer >= 2")
    return meta


def load_sequence(directory) -> Tuple[ImageSequence, Dict[int, np.ndarray]]:
    """Read frames (normalized to [0,1]) and any label masks present in a sequence directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"sequence directory not found: {directory}")
    meta = read_meta(directory)
    n = meta["num_frames"]
    frames = []
    for i in range(n):
        path = directory / FRAME_PATTERN.format(i)
        if not path.is_file():
            raise FormatError(f"missing frame {i}: {path}")
        img = _read_png(path)
        if img.ndim != 2 or img.dtype != np.uint8:
            raise FormatError(f"{path}: frames must be 8-bit grayscale")
        if frames and img.shape != frames[0].shape:
            raise FormatError(f"{path}: size {img.shape} differs from frame 0 {frames[0].shape}")
        frames.append(img)
    extra = directory / FRAME_PATTERN.format(n)
    if extra.exists():
        raise FormatError(f"{extra}: more frames than num_frames={n} in meta.json")
    try:
        seq = ImageSequence(np.stack(frames).astype(np.float64) / 255.0, meta.get("frame_times"),
                            meta.get("pixel_spacing_mm"))
    except ValueError as exc:
        raise FormatError(f"{directory / 'meta.json'}: {exc}") from exc
    masks = {}
    for i in range(n):
        path = directory / MASK_PATTERN.format(i)
        if path.is_file():
            masks[i] = read_label_png(path, seq.size)
    return seq, masks


def load_masks(directory) -> List[np.ndarray]:
    """All ``mask_NNNN.png`` files of a directory, which must be numbered contiguously from 0."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"mask directory not found: {directory}")
    found = sorted(int(m.group(1)) for p in directory.iterdir() if (m := re.fullmatch(r"mask_(\d{4})\.png", p.name)))
    if not found:
        raise FormatError(f"no mask_NNNN.png files in {directory}")
    if found != list(range(len(found))):
        missing = sorted(set(range(found[-1] + 1)) - set(found))
        raise FormatError(f"{directory}: missing mask {missing[0]}")
    masks = [read_label_png(directory / MASK_PATTERN.format(i)) for i in found]
    for i, m in enumerate(masks[1:], start=1):
        if m.shape != masks[0].shape:
            raise FormatError(f"{directory / MASK_PATTERN.format(i)}: size differs from mask 0")
    return masks


def save_sequence(directory, frames_u8: np.ndarray, masks: Optional[Sequence[np.ndarray]] = None,
                  frame_times=None, pixel_spacing_mm: Optional[float] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames_u8 = np.asarray(frames_u8)
    if frames_u8.dtype != np.uint8:
        raise ValueError("frames must be uint8")
    meta = {"num_frames": int(len(frames_u8))}
    if pixel_spacing_mm is not None:
        meta["pixel_spacing_mm"] = float(pixel_spacing_mm)
    if frame_times is not None:
        meta["frame_times"] = [float(t) for t in frame_times]
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for i, frame in enumerate(frames_u8):
        _write_png(directory / FRAME_PATTERN.format(i), frame)
    for i, mask in enumerate(masks if masks is not None else []):
        write_label_png(directory / MASK_PATTERN.format(i), mask)
    return directory


def write_masks(directory, masks: Sequence[np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, mask in enumerate(masks):
        write_label_png(directory / MASK_PATTERN.format(i), mask)


def write_field_dump(path, phis: np.ndarray) -> None:
    """Absolute sampling coordinates ``[T,H,W,2]`` as a little-endian binary dump."""
    phis = np.asarray(phis, dtype=np.float64)
    if phis.ndim != 4 or phis.shape[-1] != 2:
        raise ValueError(f"field stack must be [T,H,W,2], got {phis.shape}")
    t, h, w, _ = phis.shape
    header = _FIELD_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, h, w, t)
    Path(path).write_bytes(header + phis.astype("<f8").tobytes(order="C"))


def read_field_dump(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _FIELD_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, h, w, t = _FIELD_HEADER.unpack_from(raw)
    if magic != FIELD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FIELD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = t * h * w * 2 * 8
    payload = raw[_FIELD_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype="<f8").reshape(t, h, w, 2).astype(np.float64)


def write_loss_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_HEADER)
        for step, row in enumerate(history):
            writer.writerow([step] + [repr(float(v)) for v in row.as_row()])


def read_loss_log(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != LOSS_HEADER:
            raise FormatError(f"{path}: unexpected header {header}")
        return np.array([[float(v) for v in row] for row in reader])


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def overlay_image(frame: np.ndarray, mask: np.ndarray, alpha: float = 0.4) -> np.ndarray:
    """RGB uint8 image with label colours blended over a grayscale frame."""
    gray = np.asarray(frame, dtype=np.float64)
    if gray.max() <= 1.0:
        gray = gray * 255.0
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    for label, color in LABEL_COLORS.items():
        sel = mask == label
        rgb[sel] = (1 - alpha) * rgb[sel] + alpha * np.asarray(color, dtype=np.float64)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def write_overlays(directory, frames: np.ndarray, masks: Sequence[np.ndarray]) -> List[Path]:
    if len(frames) != len(masks):
        raise ValueError(f"{len(frames)} frames but {len(masks)} masks")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (frame, mask) in enumerate(zip(frames, masks)):
        if frame.shape != mask.shape:
            raise ValueError(f"frame {i} has shape {frame.shape} but mask has {mask.shape}")
        path = directory / OVERLAY_PATTERN.format(i)
        _write_png(path, overlay_image(frame, mask))
        paths.append(path)
    return paths


def save_outputs(result, out_dir, extra_report: Optional[dict] = None) -> Dict[str, Path]:
    """Write propagated masks, the field dump, the loss log and a fit summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_masks(out, result.masks)
    paths = {"fields": out / "fields.eodf", "loss": out / "loss.csv", "report": out / "fit.json"}
    write_field_dump(paths["fields"], result.phi_stack)
    write_loss_log(paths["loss"], result.history)
    last = result.history[-1]
    summary = {
        "config": result.config.to_dict(),
        "steps_run": len(result.history),
        "final_loss": dict(zip(LOSS_HEADER[1:], (float(v) for v in last.as_row()))),
        "num_frames": len(result.masks),
    }
    if extra_report:
        summary.update(extra_report)
    write_json(paths["report"], summary)
    return paths
