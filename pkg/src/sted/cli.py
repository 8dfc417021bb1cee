"""Command-line entry points: generate, train, eval, infer, plot.

Every flag can also come from an environment variable ``STED_<FLAG>``
(e.g. ``STED_SAMPLES=4``); a ``--config`` JSON file overrides both.
Exit codes: 0 ok, 2 usage error, 3 data-format error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_NUMERIC = 4

logger = logging.getLogger("sted")


class UsageError(Exception):
    pass


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like HxW, got {text!r}") from None
    if h <= 0 or w <= 0 or h % 8 or w % 8:
        raise UsageError(f"--size {h}x{w}: both dims must be positive multiples of 8")
    return h, w


def cmd_generate(args):
    from .data import generate_dataset, write_dataset
    from .events import EventSimConfig

    h, w = parse_size(args.size)
    if args.samples < 1 or args.layers < 1 or args.frames < 1:
        raise UsageError("--samples, --layers and --frames must be positive")
    if args.threshold <= 0:
        raise UsageError("--threshold must be positive")
    samples = generate_dataset(args.samples, h, w, seed=args.seed, n_layers=args.layers,
                               channels=args.channels, M=args.frames,
                               sim_cfg=EventSimConfig(threshold_c=args.threshold),
                               disparity=args.disparity, max_disparity=args.max_disparity)
    write_dataset(samples, args.out)
    logger.info("wrote %d samples to %s", len(samples), args.out)


def _train_config(args, samples):
    from .model import ModelConfig
    from .train import TrainConfig

    overrides = dict(args.train or {})
    model_over = dict(overrides.pop("model", {}) or {})
    s = samples[0]
    model = ModelConfig(**{"image_channels": s.blurry.shape[0], "M": s.M, **model_over})
    if (model.image_channels, model.M) != (s.blurry.shape[0], s.M):
        raise UsageError("model channels/M do not match the dataset")
    base = {"seed": args.seed}
    for flag in ("lr", "batch", "crop", "epochs"):
        v = getattr(args, flag)
        if v is not None:
            base[{"lr": "lr0", "epochs": "max_epochs"}.get(flag, flag)] = v
    return TrainConfig(**{**base, **overrides, "model": model})


def cmd_train(args):
    from .data import read_dataset
    from .train import fit

    samples = read_dataset(args.data)
    cfg = _train_config(args, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, default=str))
    _, history = fit(samples, cfg, steps=args.steps, log_path=out / "log.jsonl",
                     checkpoint_dir=out / "checkpoint")
    logger.info("trained %d steps; final dblr %.5f", len(history),
                history[-1]["dblr"] if history else float("nan"))


def _predictor(args):
    from .checkpoint import load_model
    from .train import model_predictor

    if args.predictor == "gt":
        def passthrough(sample):
            return sample.gt_frames, sample.gt_disparity
        return passthrough, {"predictor": "gt"}
    if args.predictor == "blurry":
        def blurry(sample):
            return np.repeat(sample.blurry[None], sample.M, 0), np.zeros(sample.shape)
        return blurry, {"predictor": "blurry"}
    if not args.checkpoint:
        raise UsageError("--checkpoint is required for the model predictor")
    model, manifest = load_model(args.checkpoint)
    return model_predictor(model), manifest["model_config"]


def cmd_eval(args):
    from .data import read_dataset
    from .train import evaluate

    samples = read_dataset(args.data)
    predictor, config = _predictor(args)
    out = Path(args.out)
    report = evaluate(samples, predictor, config, out_dir=out if args.plots else None)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    for m in report["metrics"]:
        logger.info("%-12s %.4f", m["metric"], m["value"])


def cmd_infer(args):
    import torch

    from .checkpoint import load_model
    from .data import read_sample
    from .events import voxelize
    from .geometry import DisparityMap
    from .plotting import save_disparity, save_result_grid

    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    model, _ = load_model(args.checkpoint)
    sample = read_sample(args.sample)
    if sample.blurry.shape[0] != model.cfg.image_channels:
        raise UsageError("sample channels do not match the checkpoint")
    blurry = torch.from_numpy(sample.blurry)[None]
    voxel = torch.from_numpy(voxelize(sample.events, model.cfg.bins).data.astype(np.float32))[None]
    model.eval()
    with torch.no_grad():
        out = model(blurry, voxel)
    frames = out["frames"][0].numpy()
    if not np.isfinite(frames).all():
        from .train import NumericalFailure
        raise NumericalFailure("non-finite frames", {})
    disp = out["disparity"][0, 0].numpy()
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    for m, frame in enumerate(frames):
        np.clip(frame, 0.0, 1.0).astype("<f4").tofile(dest / f"frame_{m}.raw")
    DisparityMap(disp).save(dest / "disparity.raw")
    diag = {"M": len(frames), "shape": list(frames.shape[1:]),
            "stage_magnitude": out["stage_magnitude"], "sample": sample.id}
    (dest / "diagnostics.json").write_text(json.dumps(diag, indent=2))
    save_result_grid(sample, frames, disp, dest / "grid.png")
    save_disparity(disp, dest / "disparity.png")
    logger.info("wrote %d frames to %s", len(frames), dest)


def cmd_plot(args):
    from .data import DatasetFormatError
    from .geometry import DisparityMap
    from .plotting import save_disparity, save_loss_curve, save_stage_magnitudes

    src = Path(args.input)
    out = Path(args.out)
    made = []
    if src.is_dir():
        candidates = [src / "diagnostics.json", src / "log.jsonl", src / "disparity.raw"]
    else:
        candidates = [src]
    for path in candidates:
        if not path.exists():
            continue
        if path.suffix == ".jsonl":
            try:
                history = [json.loads(l) for l in path.read_text().splitlines() if l.strip()]
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}: bad log line ({exc})") from exc
            made.append(save_loss_curve(history, out / "loss.png"))
        elif path.suffix == ".json":
            try:
                diag = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}: {exc}") from exc
            if "stage_magnitude" not in diag:
                raise DatasetFormatError(f"{path}: no stage_magnitude entry")
            n = save_stage_magnitudes(diag["stage_magnitude"], out / "bde_magnitude.png")
            logger.info("bde magnitude curve: %d points", n)
            made.append(out / "bde_magnitude.png")
        elif path.suffix == ".raw":
            made.append(save_disparity(DisparityMap.load(path).data, out / "disparity.png"))
    if not made:
        raise UsageError(f"nothing to plot in {src}")
    for p in made:
        logger.info("wrote %s", p)


def _add(p, *names, **kw):
    """add_argument with its default taken from STED_<DEST> when set."""
    action = p.add_argument(*names, **kw)
    env = os.environ.get("STED_" + action.dest.upper())
    if env is not None:
        conv = kw.get("type", str)
        if kw.get("action") == "store_true":
            action.default = env.lower() in ("1", "true", "yes")
        else:
            action.default = conv(env)
            action.required = False
    return action


def build_parser():
    parser = argparse.ArgumentParser(prog="sted")
    parser.add_argument("--config", help="JSON file whose keys override flags")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    _add(g, "--out", required=True)
    _add(g, "--samples", type=int, default=4)
    _add(g, "--size", default="64x64")
    _add(g, "--layers", type=int, default=2)
    _add(g, "--seed", type=int, default=0)
    _add(g, "--threshold", type=float, default=0.2)
    _add(g, "--frames", type=int, default=7)
    _add(g, "--channels", type=int, choices=(1, 3), default=1)
    _add(g, "--disparity", type=float, default=None, help="fix every layer's disparity")
    _add(g, "--max-disparity", type=float, default=12.0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train on a dataset directory")
    _add(t, "--data", required=True)
    _add(t, "--out", required=True)
    _add(t, "--steps", type=int, default=None, help="stop after this many steps")
    _add(t, "--epochs", type=int, default=None)
    _add(t, "--lr", type=float, default=None)
    _add(t, "--batch", type=int, default=None)
    _add(t, "--crop", type=int, default=None)
    _add(t, "--seed", type=int, default=0)
    t.set_defaults(func=cmd_train, train=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or a reference predictor)")
    _add(e, "--data", required=True)
    _add(e, "--out", required=True)
    _add(e, "--checkpoint", default=None)
    _add(e, "--predictor", choices=("model", "gt", "blurry"), default="model")
    _add(e, "--plots", action="store_true")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="run one sample end to end")
    _add(i, "--checkpoint", default=None)
    _add(i, "--sample", required=True)
    _add(i, "--out", required=True)
    i.set_defaults(func=cmd_infer)

    p = sub.add_parser("plot", help="render PNG panels from outputs")
    _add(p, "--input", required=True)
    _add(p, "--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"--config {args.config}: {exc}") from exc
        if not isinstance(overrides, dict):
            raise UsageError("--config must hold a JSON object")
        for key, value in overrides.items():
            dest = key.lstrip("-").replace("-", "_")
            if not hasattr(args, dest):
                raise UsageError(f"--config: unknown key {key!r}")
            setattr(args, dest, value)
    return args


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .data import DatasetFormatError
    from .events import EventFormatError
    from .train import NumericalFailure

    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"sted: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"sted: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, EventFormatError, CheckpointError) as exc:
        print(f"sted: data format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalFailure as exc:
        print(f"sted: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0
