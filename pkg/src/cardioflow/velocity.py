"""Velocity-field generators: the conditioned encoder-decoder and a dense-grid baseline.

The network maps ``(frame image, first-frame mask, time)`` to a velocity
field ``[H,W,2]``. Decoder features are modulated by time-aware spatially
adaptive normalization whose scale and shift maps are predicted from the
first-frame mask and a sinusoidal time code.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .flow import TimeGrid, VelocityProvider
from .geometry import OneHotMask

CHECKPOINT_MAGIC = b"EODM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    encoder_channels: tuple = (16, 32, 32, 32)
    decoder_channels: tuple = (32, 32, 32, 32, 32, 16, 16)
    pe_dim: int = 16
    t_scale: float = 30.0
    spade_hidden: int = 32
    slope: float = 0.2
    num_classes: int = 3
    in_channels: int = 1
    norm_eps: float = 1e-5

    def __post_init__(self):
        if len(self.encoder_channels) != 4:
            raise ValueError("the encoder has exactly four stride-2 stages")
        if len(self.decoder_channels) != 7:
            raise ValueError("the decoder has four upsampling and three full-resolution stages")
        if self.pe_dim % 2:
            raise ValueError(f"pe_dim must be even, got {self.pe_dim}")

    def digest(self) -> bytes:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()[:8]


ModelParams = Dict[str, Tensor]


# --------------------------------------------------------------------- time
def positional_encoding(t: float, dim: int = 16, t_scale: float = 30.0) -> np.ndarray:
    """Interleaved ``(sin, cos)`` pairs at frequencies ``10000**(-2k/dim)``."""
    if dim % 2:
        raise ValueError(f"dim must be even, got {dim}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    k = np.arange(dim // 2)
    omega = 10000.0 ** (-2.0 * k / dim)
    tau = t * t_scale
    out = np.empty(dim)
    out[0::2] = np.sin(omega * tau)
    out[1::2] = np.cos(omega * tau)
    return out


# --------------------------------------------------------------- parameters
def _stage_shapes(cfg: NetConfig) -> "OrderedDict[str, tuple]":
    shapes: "OrderedDict[str, tuple]" = OrderedDict()
    enc = cfg.encoder_channels
    cin = cfg.in_channels
    for i, cout in enumerate(enc):
        shapes[f"enc{i}.weight"] = (cout, cin, 3, 3)
        shapes[f"enc{i}.bias"] = (cout,)
        cin = cout
    skips = [cfg.in_channels] + list(enc[:-1])  # full, 1/2, 1/4, 1/8 resolution
    cin = enc[-1] + cfg.pe_dim
    cond = cfg.num_classes + cfg.pe_dim
    for i, cout in enumerate(cfg.decoder_channels):
        if i < 4:
            cin = cin + skips[3 - i]
        shapes[f"dec{i}.weight"] = (cout, cin, 3, 3)
        shapes[f"dec{i}.bias"] = (cout,)
        shapes[f"spade{i}.shared.weight"] = (cfg.spade_hidden, cond, 3, 3)
        shapes[f"spade{i}.shared.bias"] = (cfg.spade_hidden,)
        shapes[f"spade{i}.gamma.weight"] = (cout, cfg.spade_hidden, 3, 3)
        shapes[f"spade{i}.gamma.bias"] = (cout,)
        shapes[f"spade{i}.beta.weight"] = (cout, cfg.spade_hidden, 3, 3)
        shapes[f"spade{i}.beta.bias"] = (cout,)
        cin = cout
    shapes["head.weight"] = (2, cin, 1, 1)
    shapes["head.bias"] = (2,)
    return shapes


def init_params(seed: int = 0, config: Optional[NetConfig] = None) -> ModelParams:
    """He-uniform conv weights, zero biases, a zero output head.

    The gamma biases start at 1 so the modulation begins as plain
    normalization; the zero head makes the initial velocity exactly zero.
    """
    cfg = config or NetConfig()
    rng = np.random.default_rng(seed)
    params: ModelParams = OrderedDict()
    for name, shape in _stage_shapes(cfg).items():
        if name.startswith("head."):
            data = np.zeros(shape)
        elif name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("gamma.bias"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def parameter_count(params: ModelParams) -> int:
    return int(sum(p.size for p in params.values()))


# -------------------------------------------------------------- modulation
def resize_labels(labels: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize of an integer label map (pixel-centre sampling)."""
    H, W = labels.shape
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
    return labels[np.ix_(rows, cols)]


def _neighbourhoods(labels: np.ndarray, size: int):
    """Distinct ``size x size`` label windows (outside marked -1): representative pixel and per-pixel id."""
    h, w = labels.shape
    r = size // 2
    padded = np.pad(labels.astype(np.int64), r, constant_values=-1)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (size, size)).reshape(h * w, size * size)
    _, first, inverse = np.unique(windows, axis=0, return_index=True, return_inverse=True)
    return first, inverse.reshape(-1)


@dataclass
class ModulationLayout:
    """Pixel groupings that make the mask/time modulation cheap to evaluate.

    The hidden layer of the modulation branch (one 3x3 convolution over the
    mask and a spatially constant time code) depends only on a pixel's 3x3
    label neighbourhood, including which taps fall outside the image. The
    scale/shift heads stack another 3x3 convolution on top, so they depend
    only on the 5x5 neighbourhood. Both are evaluated once per distinct
    neighbourhood; ``tap_map`` wires the 5x5 representatives to the hidden
    values of their nine neighbours (index ``V`` stands for zero padding).
    """

    onehot: Tensor  # [K, h, w]
    rows: np.ndarray  # 5x5 representatives
    cols: np.ndarray
    inverse: np.ndarray  # pixel -> 5x5 pattern id
    hidden_rows: np.ndarray  # 3x3 representatives
    hidden_cols: np.ndarray
    tap_support: np.ndarray  # [9, V]: 1 where a tap around a 3x3 representative is inside
    tap_map: np.ndarray  # [9, U] -> 3x3 pattern id, or V outside the image

    @classmethod
    def build(cls, labels: np.ndarray, num_classes: int) -> "ModulationLayout":
        h, w = labels.shape
        first5, inverse5 = _neighbourhoods(labels, 5)
        first3, inverse3 = _neighbourhoods(labels, 3)
        onehot = (labels[None] == np.arange(num_classes)[:, None, None]).astype(np.float64)
        ones = np.pad(np.ones((h, w)), 1)
        support = np.stack([ones[i : i + h, j : j + w].ravel()[first3] for i in range(3) for j in range(3)])
        rows, cols = first5 // w, first5 % w
        tap_map = np.empty((9, len(first5)), dtype=np.intp)
        for t in range(9):
            rr, cc = rows + t // 3 - 1, cols + t % 3 - 1
            inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            tap_map[t] = np.where(inside, inverse3[np.clip(rr, 0, h - 1) * w + np.clip(cc, 0, w - 1)], len(first3))
        return cls(Tensor(onehot), rows, cols, inverse5, first3 // w, first3 % w, support, tap_map)

    @property
    def num_patterns(self) -> int:
        return len(self.rows)

    @property
    def num_hidden_patterns(self) -> int:
        return len(self.hidden_rows)


def spade_t_normalize(
    f: Tensor,
    m0,
    pe,
    params: ModelParams,
    stage: int,
    slope: float = 0.2,
    eps: float = 1e-5,
    layout: Optional[ModulationLayout] = None,
) -> Tensor:
    """``gamma * instance_norm(f) + beta`` with mask- and time-conditioned maps.

    ``f`` is ``[C,h,w]`` or ``[N,C,h,w]``; ``pe`` is ``[dim]`` or ``[N,dim]``;
    ``m0`` is a label map or :class:`OneHotMask` at any resolution.
    """
    squeeze = f.ndim == 3
    if squeeze:
        f = f.reshape((1,) + f.shape)
    n, c, h, w = f.shape
    pe = np.atleast_2d(np.asarray(pe, dtype=np.float64))
    if pe.shape[0] != n:
        raise ValueError(f"{pe.shape[0]} time codes for a batch of {n}")
    if layout is None:
        labels = m0 if isinstance(m0, np.ndarray) else _labels_of(m0)
        labels = resize_labels(labels, h, w)
        k = params[f"spade{stage}.shared.weight"].shape[1] - pe.shape[1]
        layout = ModulationLayout.build(labels, k)
    if layout.onehot.shape[1:] != (h, w):
        raise ValueError(f"mask layout {layout.onehot.shape[1:]} does not match features {(h, w)}")
    k = layout.onehot.shape[0]
    dim = pe.shape[1]
    u = layout.num_patterns

    shared_w = params[f"spade{stage}.shared.weight"]
    hidden_ch = shared_w.shape[0]
    # mask part of the hidden conv, shared by the whole batch: [1, hidden, V]
    mask_part = ad.conv2d_sampled(layout.onehot.reshape((1,) + layout.onehot.shape), shared_w[:, :k],
                                  params[f"spade{stage}.shared.bias"], layout.hidden_rows, layout.hidden_cols)
    # the time code is constant over the image, so its 3x3 response only
    # depends on which taps fall inside: mix the code into per-tap weights
    # [N*hidden, 9], then expand over the tap-support patterns
    code_w = shared_w[:, k:].reshape(hidden_ch, dim, 9).transpose(1, 0, 2).reshape(dim, hidden_ch * 9)
    per_tap = ad.matmul(Tensor(pe), code_w).reshape(n * hidden_ch, 9)
    code_part = ad.matmul(per_tap, Tensor(layout.tap_support)).reshape(n, hidden_ch, -1)
    hidden = ad.leaky_relu(code_part + mask_part, slope)  # [N, hidden, V]

    # head convolution at the 5x5 representatives, as one matrix product
    padded = ad.concat([hidden, Tensor(np.zeros((n, hidden_ch, 1)))], axis=2)
    taps = ad.take(padded, layout.tap_map.ravel(), axis=2).reshape(n, hidden_ch * 9, u)
    head_w = ad.concat([params[f"spade{stage}.gamma.weight"], params[f"spade{stage}.beta.weight"]], axis=0)
    head_b = ad.concat([params[f"spade{stage}.gamma.bias"], params[f"spade{stage}.beta.bias"]], axis=0)
    per_pattern = ad.matmul(head_w.reshape(2 * c, hidden_ch * 9), taps) + head_b.reshape(2 * c, 1)  # [N, 2C, U]
    out = ad.modulated_instance_norm(f, per_pattern, layout.inverse, eps)
    return out[0] if squeeze else out


def _labels_of(mask) -> np.ndarray:
    if isinstance(mask, OneHotMask):
        return np.argmax(mask.channels.data, axis=0)
    return np.asarray(mask)


# ------------------------------------------------------------------ network
class VelocityNet:
    """Forward pass of the encoder-decoder for one fixed first-frame mask."""

    def __init__(self, params: ModelParams, m0, config: Optional[NetConfig] = None):
        self.params = params
        self.config = config or NetConfig()
        self.labels = _labels_of(m0).astype(np.int64)
        self._layouts: Dict[tuple, ModulationLayout] = {}

    def layout(self, h: int, w: int) -> ModulationLayout:
        key = (h, w)
        if key not in self._layouts:
            self._layouts[key] = ModulationLayout.build(resize_labels(self.labels, h, w), self.config.num_classes)
        return self._layouts[key]

    def __call__(self, images: Tensor, times: Sequence[float]) -> Tensor:
        """``images`` ``[N,1,H,W]`` and one time per image -> velocities ``[N,H,W,2]``."""
        cfg, p = self.config, self.params
        images = ad.as_tensor(images)
        n, _, H, W = images.shape
        if H % 16 or W % 16:
            raise ValueError(
                f"image size {H}x{W} must be divisible by 16; pad to "
                f"{-(-H // 16) * 16}x{-(-W // 16) * 16}"
            )
        if tuple(self.labels.shape) != (H, W):
            raise ValueError(f"mask size {self.labels.shape} does not match image size {(H, W)}")
        pe = np.stack([positional_encoding(float(t), cfg.pe_dim, cfg.t_scale) for t in times])

        skips = [images]
        x = images
        for i in range(4):
            x = ad.leaky_relu(ad.conv2d(x, p[f"enc{i}.weight"], p[f"enc{i}.bias"], stride=2, padding=1), cfg.slope)
            skips.append(x)
        lh, lw = x.shape[2:]
        code = Tensor(np.broadcast_to(pe[:, :, None, None], (n, cfg.pe_dim, lh, lw)).copy())
        x = ad.concat([x, code], axis=1)
        for i in range(7):
            if i < 4:
                x = ad.concat([ad.upsample2x(x, "bilinear"), skips[3 - i]], axis=1)
            x = ad.leaky_relu(ad.conv2d(x, p[f"dec{i}.weight"], p[f"dec{i}.bias"], padding=1), cfg.slope)
            h, w = x.shape[2:]
            x = spade_t_normalize(x, None, pe, p, i, cfg.slope, cfg.norm_eps, layout=self.layout(h, w))
        out = ad.conv2d(x, p["head.weight"], p["head.bias"])  # [N,2,H,W]
        return out.transpose(0, 2, 3, 1)


def velocity_net_forward(params: ModelParams, image: Tensor, m0, s: float, config: Optional[NetConfig] = None) -> Tensor:
    """Velocity ``[H,W,2]`` for a single ``[1,H,W]`` image at time ``s``."""
    image = ad.as_tensor(image)
    return VelocityNet(params, m0, config)(image.reshape((1,) + image.shape), [s])[0]


class NetworkVelocity(VelocityProvider):
    """Network conditioned on the frame nearest to each solver time."""

    def __init__(self, params: ModelParams, frames: np.ndarray, m0, grid: TimeGrid,
                 config: Optional[NetConfig] = None):
        self.net = VelocityNet(params, m0, config)
        self.frames = np.asarray(frames, dtype=np.float64)
        self.grid = grid

    def velocities(self, times: Sequence[float]) -> List[Tensor]:
        idx = [self.grid.nearest_frame(s) for s in times]
        images = Tensor(self.frames[idx][:, None])
        out = self.net(images, times)
        return [out[i] for i in range(len(times))]


# --------------------------------------------------------------- baseline
class DenseGridVelocity(VelocityProvider):
    """Stationary field: a coarse ``[H/4,W/4,2]`` grid, upsampled and blurred."""

    def __init__(self, grid_params: Tensor, sigma: float = 1.0):
        if sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {sigma}")
        self.grid_params = grid_params
        self.sigma = sigma

    def field(self) -> Tensor:
        v = self.grid_params.transpose(2, 0, 1)
        v = ad.upsample2x(ad.upsample2x(v, "bilinear"), "bilinear")
        if self.sigma > 0:
            v = ad.gaussian_blur(v, self.sigma)
        return v.transpose(1, 2, 0)

    def velocities(self, times: Sequence[float]) -> List[Tensor]:
        v = self.field()
        return [v] * len(times)


def dense_grid_provider(grid_params: Tensor, sigma: float = 1.0) -> DenseGridVelocity:
    return DenseGridVelocity(ad.as_tensor(grid_params), sigma)


def init_dense_grid(h: int, w: int) -> Dict[str, Tensor]:
    if h % 4 or w % 4:
        raise ValueError(f"dense grid needs sizes divisible by 4, got {h}x{w}")
    return OrderedDict(grid=Tensor(np.zeros((h // 4, w // 4, 2)), requires_grad=True, name="grid"))


# ------------------------------------------------------------- checkpoints
def save_checkpoint(path, params: ModelParams, config: Optional[NetConfig] = None) -> None:
    """Binary dump: magic, version byte, 8-byte config hash, float64 LE vector."""
    cfg = config or NetConfig()
    flat = np.concatenate([params[name].data.ravel() for name in _stage_shapes(cfg)]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(cfg.digest())
        fh.write(flat.tobytes())


def load_checkpoint(path, config: Optional[NetConfig] = None) -> ModelParams:
    cfg = config or NetConfig()
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    if blob[4] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob[4]}")
    if blob[5:13] != cfg.digest():
        raise ValueError(f"{path}: checkpoint was written for a different network configuration")
    flat = np.frombuffer(blob[13:], dtype="<f8")
    shapes = _stage_shapes(cfg)
    expected = sum(int(np.prod(s)) for s in shapes.values())
    if flat.size != expected:
        raise ValueError(f"{path}: {flat.size} parameters, expected {expected}")
    params: ModelParams = OrderedDict()
    offset = 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        params[name] = Tensor(flat[offset : offset + size].reshape(shape).copy(), requires_grad=True, name=name)
        offset += size
    return params


# ------------------------------------------------------------- gradcheck
def network_gradcheck_builder(size: int = 32, seed: int = 0):
    """Builder for :func:`cardioflow.gradcheck.grad_check` over the full network.

    The output head is randomised (it is zero at init) so every parameter
    receives a non-trivial gradient.
    """

    def builder(rng):
        params = init_params(seed)
        params["head.weight"].data = rng.normal(scale=0.1, size=params["head.weight"].shape)
        params["head.bias"].data = rng.normal(scale=0.1, size=2)
        for name, t in params.items():
            if name.endswith(".bias") and "gamma" not in name and name != "head.bias":
                t.data = rng.normal(scale=0.05, size=t.shape)
        yy, xx = np.mgrid[0:size, 0:size]
        labels = np.zeros((size, size), dtype=int)
        r2 = ((yy - size / 2) / (size / 4)) ** 2 + ((xx - size / 2) / (size / 5)) ** 2
        labels[r2 < 1.8] = 2
        labels[r2 < 1.0] = 1
        images = rng.uniform(0, 1, size=(2, 1, size, size))
        read = rng.normal(size=(2, size, size, 2))
        leaves = list(params.values())
        for t in leaves:
            t.requires_grad = False
        net = VelocityNet(params, labels)

        def fn():
            v = net(Tensor(images), [0.25, 0.8])
            return (v * Tensor(read)).mean()

        return leaves, fn

    return builder
