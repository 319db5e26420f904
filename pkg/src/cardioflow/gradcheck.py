"""Finite-difference verification of the autodiff engine."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Builder = Callable[[np.random.Generator], Tuple[List[Tensor], Callable[[], Tensor]]]


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    checked: int
    skipped: int
    tolerance: float
    worst: str = ""
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name}: max rel err {self.max_rel_error:.3e} "
            f"({self.checked} checked, {self.skipped} skipped at kinks)"
        )


def _rel_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    builder: Builder,
    tolerance: float = 1e-5,
    step: float = 1e-5,
    seed: int = 0,
    max_elements: int = 64,
    samples: int = 16,
    directions: int = 4,
    kink_tol: float = 1e-3,
    name: str = "graph",
) -> GradCheckReport:
    """Compare backprop gradients of a scalar graph with central differences.

    ``builder(rng)`` returns the leaves and a closure rebuilding the root
    from their current data. Small leaves are checked elementwise; larger
    ones on ``samples`` random entries plus ``directions`` random unit
    directions. Relative error is measured against a floor of 1% of the
    leaf's RMS gradient so exact zeros are not scored on round-off.
    Probes straddling a non-differentiable point (relu kinks, bilinear cell
    boundaries) are skipped and counted: either the one-sided differences
    disagree or the central difference changes with the step size.
    """
    rng = np.random.default_rng(seed)
    leaves, fn = builder(rng)
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    root = fn()
    root.backward()
    grads = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]
    f0 = float(fn().data)

    worst, worst_where = 0.0, ""
    checked = skipped = 0

    def evaluate(leaf: Tensor, direction: np.ndarray, eps: float) -> float:
        original = leaf.data
        leaf.data = original + eps * direction
        try:
            return float(fn().data)
        finally:
            leaf.data = original

    for li, (leaf, grad) in enumerate(zip(leaves, grads)):
        # entries far below the leaf's typical gradient are judged on absolute error
        floor = max(1e-6, 1e-2 * float(np.sqrt(np.mean(grad * grad))))
        probes = []
        if leaf.size <= max_elements:
            idx = range(leaf.size)
        else:
            idx = rng.choice(leaf.size, size=min(samples, leaf.size), replace=False)
        for i in idx:
            d = np.zeros(leaf.size)
            d[i] = 1.0
            probes.append((f"leaf{li}[{int(i)}]", d.reshape(leaf.shape)))
        if leaf.size > max_elements:
            for k in range(directions):
                d = rng.normal(size=leaf.shape)
                probes.append((f"leaf{li}<dir{k}>", d / np.linalg.norm(d)))
        for where, d in probes:
            fp = evaluate(leaf, d, step)
            fm = evaluate(leaf, d, -step)
            forward = (fp - f0) / step
            backward = (f0 - fm) / step
            numeric = (fp - fm) / (2.0 * step)
            if abs(forward - backward) > kink_tol * max(1.0, abs(numeric)):
                skipped += 1
                continue
            # a kink inside the probe interval shows up as a step-size dependent difference
            fine = (evaluate(leaf, d, step / 4) - evaluate(leaf, d, -step / 4)) * (2.0 / step)
            if _rel_error(fine, numeric, floor) > 0.5 * tolerance:
                skipped += 1
                continue
            analytic = float(np.sum(grad * d))
            err = _rel_error(analytic, numeric, floor)
            checked += 1
            if err > worst:
                worst, worst_where = err, where
    for leaf in leaves:
        leaf.requires_grad = False
    return GradCheckReport(name, worst, checked, skipped, tolerance, worst_where)


# --------------------------------------------------------------- op suite
def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale)


def _op_builders() -> dict:
    def conv(rng):
        x, w, b = _leaf(rng, 2, 8, 8), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
        r = np.random.default_rng(1)
        wo = Tensor(r.normal(size=(3, 4, 4)))
        return [x, w, b], lambda: (ad.conv2d(x, w, b, stride=2, padding=1) * wo).sum()

    def conv_stride1(rng):
        x, w, b = _leaf(rng, 2, 8, 8), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
        wo = Tensor(np.random.default_rng(2).normal(size=(3, 8, 8)))
        return [x, w, b], lambda: (ad.conv2d(x, w, b, stride=1, padding=1) * wo).sum()

    def sample(rng):
        x = _leaf(rng, 2, 8, 8)
        yy, xx = np.mgrid[0:8, 0:8].astype(float)
        base = np.stack([xx, yy], -1) + rng.uniform(-1.7, 1.7, size=(8, 8, 2))
        coords = Tensor(base)
        wo = Tensor(np.random.default_rng(3).normal(size=(2, 8, 8)))
        return [x, coords], lambda: (ad.grid_sample_bilinear(x, coords, padding=0.0) * wo).sum()

    def sample_border(rng):
        x = _leaf(rng, 2, 6, 6)
        yy, xx = np.mgrid[0:6, 0:6].astype(float)
        coords = Tensor(np.stack([xx, yy], -1) + rng.uniform(-0.9, 0.9, size=(6, 6, 2)))
        wo = Tensor(np.random.default_rng(4).normal(size=(2, 6, 6)))
        return [x, coords], lambda: (ad.grid_sample_bilinear(x, coords, padding="border") * wo).sum()

    def blur(rng):
        x = _leaf(rng, 1, 10, 10)
        wo = Tensor(np.random.default_rng(5).normal(size=(1, 10, 10)))
        return [x], lambda: (ad.gaussian_blur(x, 1.3) * wo).sum()

    def elementwise(rng):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
        c = Tensor(rng.uniform(1.0, 2.0, size=(1, 4)))

        def fn():
            y = ad.leaky_relu(a * b - c, 0.2) + ad.relu(a + 0.3) + ad.absolute(b) * 0.5
            y = ad.square(y) / c + ad.scale(a, 3.0) + (c ** 1.5)
            return y.mean() + y.sum(axis=0).sum()

        return [a, b, c], fn

    def structural(rng):
        a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 1, 3, 4)
        wo = Tensor(np.random.default_rng(6).normal(size=(6, 8, 6)))

        def fn():
            cat = ad.concat([a, b, a], axis=0)  # [5,3,4]
            picked = ad.take(cat.reshape(5, 12), np.array([0, 3, 3, 11, 5]), axis=1)
            up = ad.upsample2x(cat[:3], "bilinear")  # [3,6,8]
            near = ad.upsample2x(b, "nearest")
            t = up.transpose(0, 2, 1)  # [3,8,6]
            return (t.sum() * 0.1 + (picked * picked).sum() + near.mean()
                    + (ad.concat([t, t], axis=0) * wo).sum())

        return [a, b], fn

    def stats(rng):
        f = _leaf(rng, 2, 3, 5, 5)
        wo = Tensor(np.random.default_rng(7).normal(size=(2, 3, 5, 5)))

        def fn():
            mu, var = ad.instance_stats(f)
            return (((f - mu) * (var + 1e-5) ** -0.5) * wo).sum()

        return [f], fn

    def composite(rng):
        x = _leaf(rng, 1, 8, 8)
        w, b = _leaf(rng, 2, 1, 3, 3, scale=0.5), _leaf(rng, 2)
        yy, xx = np.mgrid[0:8, 0:8].astype(float)
        coords = Tensor(np.stack([xx, yy], -1) + rng.uniform(-0.45, 0.45, size=(8, 8, 2)))

        def fn():
            h = ad.relu(ad.conv2d(x, w, b, padding=1))
            return ad.grid_sample_bilinear(h, coords).mean()

        return [x, w, b, coords], fn

    def conv_batched(rng):
        x, w, w1 = _leaf(rng, 2, 3, 6, 6), _leaf(rng, 2, 3, 3, 3), _leaf(rng, 2, 2, 1, 1)
        wo = Tensor(np.random.default_rng(8).normal(size=(2, 2, 4, 4)))
        return [x, w, w1], lambda: (ad.conv2d(ad.conv2d(x, w), w1) * wo).sum()

    def sampled(rng):
        x, w, b = _leaf(rng, 2, 3, 6, 7), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
        rows, cols = np.array([0, 2, 5, 3]), np.array([0, 6, 3, 1])
        wo = Tensor(np.random.default_rng(9).normal(size=(2, 4, 4)))
        return [x, w, b], lambda: (ad.conv2d_sampled(x, w, b, rows, cols) * wo).sum()

    def products(rng):
        a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
        d = Tensor(rng.uniform(0.5, 1.5, size=(2, 3, 5)))

        def fn():
            m = ad.matmul(a, b)  # [2,3,5]
            q = m / d + ad.stack([m[0], m[1]], axis=1).reshape(2, 3, 5)
            return (q * q).mean() + m[:, [0, 2, 2]].sum()

        return [a, b, d], fn

    def sample_shared(rng):
        x = _leaf(rng, 3, 6, 6)
        yy, xx = np.mgrid[0:6, 0:6].astype(float)
        coords = Tensor(np.stack([xx, yy], -1)[None] + rng.uniform(-1.6, 1.6, size=(2, 6, 6, 2)))
        pad = np.array([1.0, 0.0, 0.5])
        wo = Tensor(np.random.default_rng(10).normal(size=(2, 3, 6, 6)))
        return [x, coords], lambda: (ad.grid_sample_bilinear(x, coords, padding=pad) * wo).sum()

    def modulated_norm(rng):
        f, mod = _leaf(rng, 2, 3, 4, 5), _leaf(rng, 2, 6, 4)
        index = rng.integers(0, 4, size=20)
        index[:4] = np.arange(4)
        wo = Tensor(np.random.default_rng(11).normal(size=(2, 3, 4, 5)))
        return [f, mod], lambda: (ad.modulated_instance_norm(f, mod, index) * wo).sum()

    return {
        "conv2d_stride2": conv,
        "modulated_instance_norm": modulated_norm,
        "conv2d_batched_nopad": conv_batched,
        "conv2d_sampled": sampled,
        "matmul_div_index": products,
        "grid_sample_shared_input": sample_shared,
        "conv2d_stride1": conv_stride1,
        "grid_sample_zero": sample,
        "grid_sample_border": sample_border,
        "gaussian_blur": blur,
        "elementwise": elementwise,
        "structural": structural,
        "instance_stats": stats,
        "composite": composite,
    }


def run_op_suite(tolerance: float = 1e-5, seed: int = 0) -> List[GradCheckReport]:
    return [grad_check(b, tolerance=tolerance, seed=seed, name=n) for n, b in _op_builders().items()]


def run_suite(tolerance: float = 1e-4, seed: int = 0, image_size: int = 32) -> List[GradCheckReport]:
    """Every op plus the full velocity network and the objective path."""
    from .velocity import network_gradcheck_builder

    reports = run_op_suite(tolerance, seed)
    reports.append(
        grad_check(network_gradcheck_builder(image_size), tolerance=tolerance, seed=seed,
                   max_elements=0, samples=2, directions=1, name=f"velocity_net_{image_size}x{image_size}")
    )
    return reports


def summarize(reports: Sequence[GradCheckReport]) -> float:
    return max(r.max_rel_error for r in reports)
