"""Command-line entry points: gen-data, train, infer, eval, viz.

Exit status is 0 on success, 1 on a usage or configuration error and 2 when
input data or checkpoints are missing or malformed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .config import from_flat, read_flat
from .data import (
    SCENARIOS,
    DataError,
    GenConfig,
    frame_name,
    gen_synthetic,
    list_sequences,
    load_dataset,
    read_frame_sequence,
    read_mask_sequence,
    save_dataset,
    static_pairs,
    write_heatmap_png,
    write_mask,
)
from .metrics import evaluate_masks
from .model import CheckpointError, F2Net, ModelConfig, load_checkpoint
from .tensor import set_default_dtype
from .train import TrainConfig, resume, seed_from_env, train

log = logging.getLogger("f2net")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _csv_list(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    seed = args.seed
    if seed is None:
        env = os.environ.get("F2NET_SEED", "").strip()
        seed = int(env) if env else 0
    scenarios = tuple(args.scenarios or SCENARIOS)
    cfg = GenConfig(count=args.count, size=args.size, length=args.length, scenarios=scenarios, static=args.static)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    samples = gen_synthetic(cfg, seed)
    save_dataset(args.out, samples)
    print(f"wrote {len(samples)} sequences to {args.out} (seed {seed})")
    return EXIT_OK


def _load_configs(path: Optional[str]) -> Tuple[ModelConfig, TrainConfig]:
    values = read_flat(path) if path else {}
    model_keys = set(ModelConfig.__dataclass_fields__)
    train_keys = set(TrainConfig.__dataclass_fields__)
    unknown = set(values) - model_keys - train_keys
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        mcfg = from_flat(ModelConfig, {k: v for k, v in values.items() if k in model_keys})
        tcfg = from_flat(TrainConfig, {k: v for k, v in values.items() if k in train_keys})
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad config: {exc}") from exc
    return mcfg, seed_from_env(tcfg)


def cmd_train(args) -> int:
    if args.config and not Path(args.config).is_file():
        raise UsageError(f"config file {args.config} not found")
    mcfg, tcfg = _load_configs(args.config)
    set_default_dtype(tcfg.precision)
    videos = load_dataset(args.data)
    val = load_dataset(args.val) if args.val else []
    log_path = args.log or str(args.out) + ".log.csv"
    start, velocity = 0, None
    if args.resume and Path(str(args.out) + ".state").exists():
        model, start, velocity = resume(args.out)
        if model.config != mcfg:
            raise UsageError("checkpoint config differs from --config; refusing to resume")
        print(f"resuming at epoch {start}")
    else:
        model = F2Net(mcfg, seed=tcfg.seed)
    train(model, static_pairs(videos), videos, tcfg, val_set=val, start_epoch=start,
          log_path=log_path, checkpoint_path=args.out, velocity=velocity)
    print(f"trained {tcfg.epochs - start} epochs; checkpoint {args.out}, log {log_path}")
    return EXIT_OK


def _sequence_dirs(path) -> List[Tuple[str, Path]]:
    """A dataset root (with ``frames/``) or a single directory of frames."""
    root = Path(path)
    if (root / "frames").is_dir():
        return [(name, root / "frames" / name) for name in list_sequences(root, "frames")]
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    return [(root.name, root)]


def cmd_infer(args) -> int:
    model = load_checkpoint(args.ckpt)
    out = Path(args.out)
    for name, seq_dir in _sequence_dirs(args.seq):
        frames = read_frame_sequence(seq_dir)
        for t, res in enumerate(model.segment_sequence(frames)):
            write_mask(out / "masks" / name / frame_name(t), res.mask.binary())
            write_heatmap_png(out / "heatmaps" / name / frame_name(t), res.heatmap)
        print(f"{name}: {len(frames)} frames")
    return EXIT_OK


def cmd_eval(args) -> int:
    names = list_sequences(args.gt, "masks")
    gt = {n: read_mask_sequence(args.gt, n) for n in names}
    pred = {}
    for n in names:
        try:
            pred[n] = read_mask_sequence(args.pred, n)
        except DataError as exc:
            raise DataError(f"missing prediction for {n}: {exc}") from exc
    try:
        report = evaluate_masks(pred, gt, args.tol)
    except (KeyError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(report_path)
    table = report.table()
    Path(str(report_path) + ".txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def overlay(frame: np.ndarray, heatmap: np.ndarray, center: Optional[Tuple[int, int]] = None,
            alpha: float = 0.6) -> np.ndarray:
    """Blend a quarter-resolution heatmap onto an RGB frame in red; mark ``center``."""
    h = np.asarray(heatmap)
    if h.ndim == 3:
        h = h[:, :, 0]
    factor = frame.shape[0] // h.shape[0]
    up = np.kron(np.clip(h, 0.0, 1.0), np.ones((factor, factor)))[:, :, None]
    red = np.zeros_like(frame)
    red[:, :, 0] = 1.0
    img = (1.0 - alpha * up) * frame + alpha * up * red
    if center is not None:
        cx, cy = center
        ys = slice(cy * factor, (cy + 1) * factor)
        xs = slice(cx * factor, (cx + 1) * factor)
        img[ys, xs] = (0.0, 1.0, 0.0)
    return np.clip(img, 0.0, 1.0)


def cmd_viz(args) -> int:
    model = load_checkpoint(args.ckpt)
    out = Path(args.out)
    for name, seq_dir in _sequence_dirs(args.seq):
        frames = read_frame_sequence(seq_dir)
        for t, (frame, res) in enumerate(zip(frames, model.segment_sequence(frames))):
            img = overlay(frame, res.heatmap.data, res.center)
            path = out / name / frame_name(t)
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(np.round(img * 255.0).astype(np.uint8), mode="RGB").save(path)
        print(f"{name}: {len(frames)} overlays")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="f2net", description="Center-guided video object segmentation on synthetic sequences.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenarios", type=_csv_list, default=None,
                   help=f"comma-separated subset of {','.join(SCENARIOS)}")
    g.add_argument("--seed", type=int, default=None, help="default: $F2NET_SEED or 0")
    g.add_argument("--count", type=int, default=20)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--length", type=int, default=8)
    g.add_argument("--static", action="store_true", help="objects do not move")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="flat key = value file (model and training keys)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--val", default=None, help="optional validation dataset")
    t.add_argument("--log", default=None, help="metrics CSV (default CKPT.log.csv)")
    t.add_argument("--resume", action="store_true", help="continue from CKPT.state if present")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict masks and heatmaps")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--seq", required=True, help="frame directory or dataset root")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predicted masks against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True, help="CSV path; the text table goes to <REPORT>.txt")
    e.add_argument("--tol", type=float, default=None, help="boundary tolerance in pixels")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", help="write heatmap overlays")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--seq", required=True, help="frame directory or dataset root")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("f2net: error: a command is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"f2net: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
