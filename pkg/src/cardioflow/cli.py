"""Command-line entry point: ``cardioflow {phantom,fit,eval,overlay,gradcheck}``.

Exit status is 0 on success, 1 for invalid input or usage, and 2 when the
optimization or the gradient check breaks down numerically.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import io
from .metrics import DEFAULT_TAU, evaluate_sequence
from .phantom import PhantomConfig, generate_phantom
from .registration import FitConfig, NumericalAbort, fit_sequence
from .velocity import save_checkpoint

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

log = logging.getLogger("cardioflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def default_fit_config() -> dict:
    """Every fit config key with its default value."""
    return FitConfig().to_dict()


def load_fit_config(path: Optional[str], seed: Optional[int]) -> FitConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ValueError(f"{p}: config must be a JSON object")
    if seed is not None:
        data["seed"] = seed
    return FitConfig.from_dict(data)


def cmd_phantom(args) -> int:
    cfg = PhantomConfig(height=args.size, width=args.size, num_frames=args.frames, scale_es=args.scale_es,
                        noise=args.noise, seed=args.seed)
    truth = generate_phantom(cfg)
    io.save_sequence(args.out, truth.frames_u8, truth.labels, pixel_spacing_mm=args.spacing)
    print(f"wrote {cfg.num_frames} frames of {cfg.height}x{cfg.width} to {args.out} (area EF {truth.ef_area:.4f})")
    return EXIT_OK


def _keyframe(path: Optional[str], masks: dict, index: int, shape, which: str) -> np.ndarray:
    if path is not None:
        return io.read_label_png(path, shape)
    if index not in masks:
        raise ValueError(f"no --{which} given and the sequence has no mask for frame {index}")
    return masks[index]


def cmd_fit(args) -> int:
    seq, masks = io.load_sequence(args.seq)
    m0 = _keyframe(args.m0, masks, 0, seq.size, "m0")
    m1 = _keyframe(args.m1, masks, seq.num_frames - 1, seq.size, "m1")
    config = load_fit_config(args.config, args.seed)
    if args.steps is not None:
        config.steps = args.steps
    result = fit_sequence(seq, m0, m1, config)
    paths = io.save_outputs(result, args.out)
    if config.provider == "cnn":
        save_checkpoint(Path(args.out) / "params.eodm", result.params, result.net_config)
    last = result.history[-1]
    print(f"fit {len(result.history)} steps in {result.wall_time:.1f}s, final loss {last.total:.6f}; "
          f"outputs in {paths['report'].parent}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = io.load_masks(args.pred)
    gt = None
    spacing = args.spacing
    if args.gt is not None:
        gt_dir = Path(args.gt)
        if (gt_dir / "meta.json").is_file():
            seq, gt_masks = io.load_sequence(gt_dir)
            gt = [gt_masks[i] for i in sorted(gt_masks)]
            if len(gt) != seq.num_frames:
                raise ValueError(f"{gt_dir}: masks missing for some frames")
            spacing = spacing if spacing is not None else seq.pixel_spacing_mm
        else:
            gt = io.load_masks(gt_dir)
    report = evaluate_sequence(pred, gt, spacing=spacing, tau=args.tau)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    out.with_suffix(".csv").write_text(report.to_csv())
    dice_txt = ", ".join(f"{k} {v:.4f}" for k, v in report.mean_dice.items())
    print(f"mean Dice: {dice_txt or 'n/a'}; temporal HD {report.temporal_hd_px:.3f} px; "
          f"EF {report.ef_pred:.4f}; temporal error {'yes' if report.temporal_error else 'no'}")
    return EXIT_OK


def cmd_overlay(args) -> int:
    seq, _ = io.load_sequence(args.seq)
    masks = io.load_masks(args.masks)
    if len(masks) != seq.num_frames:
        raise ValueError(f"{args.masks}: {len(masks)} masks for {seq.num_frames} frames")
    paths = io.write_overlays(args.out, seq.frames, masks)
    print(f"wrote {len(paths)} overlays to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite, summarize

    reports = run_suite(tolerance=args.tolerance, seed=args.seed, image_size=args.size)
    for r in reports:
        print(r.line())
    worst = summarize(reports)
    ok = all(r.passed for r in reports)
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'} at tolerance {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cardioflow", description="Mask propagation through cardiac image sequences.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log optimization progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="write a synthetic contracting-chamber sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--scale-es", type=float, default=0.8)
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--spacing", type=float, default=None, help="pixel spacing in mm recorded in meta.json")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("fit", help="fit the flow to one sequence and propagate the first mask")
    p.add_argument("--seq", required=True)
    p.add_argument("--m0", help="label PNG of the first frame (default: the sequence's mask_0000.png)")
    p.add_argument("--m1", help="label PNG of the last frame (default: the sequence's last mask)")
    p.add_argument("--config", help="JSON fit configuration")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--steps", type=int, default=None, help="overrides the config step count")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="score propagated masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt")
    p.add_argument("--spacing", type=float, default=None)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("overlay", help="render colour overlays of masks on frames")
    p.add_argument("--seq", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
