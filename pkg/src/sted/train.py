"""Training loop, learning-rate schedule, evaluation and ablation runs."""
from __future__ import annotations

import itertools
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .data import Sample, config_hash
from .events import voxelize
from .losses import DESK_PLAN, LossWeights, PerceptualExtractor, total_loss
from .model import ModelConfig, StEDNet

logger = logging.getLogger(__name__)

FLAGS = ("use_dispnet", "use_dual_path", "use_bde", "use_aff")


class NumericalFailure(RuntimeError):
    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump


class DisparityLeakError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    decay_start: int = 40
    decay_every: int = 20
    decay_factor: float = 0.5
    max_epochs: int = 120
    batch: int = 6
    crop: int = 256
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 10.0
    weights: LossWeights = field(default_factory=LossWeights)
    extractor_plan: tuple = DESK_PLAN
    extractor_weights: str | None = None
    tv_on_stages: bool = False
    deterministic: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.betas = tuple(self.betas)
        self.extractor_plan = tuple(self.extractor_plan)
        if min(self.lr0, self.batch, self.crop, self.max_epochs, self.decay_every) <= 0:
            raise ValueError("lr0, batch, crop, max_epochs and decay_every must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lr_schedule(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Constant ``lr0`` until ``decay_start``, then halved every ``decay_every`` epochs."""
    if epoch < cfg.decay_start:
        return cfg.lr0
    n = (epoch - cfg.decay_start) // cfg.decay_every + 1
    return cfg.lr0 * cfg.decay_factor ** n


def set_deterministic(seed: int, strict: bool = True):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if strict:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


class _TrainView:
    """What the optimiser may see of a sample: no disparity ground truth."""

    __slots__ = ("id", "blurry", "voxel", "gt_frames")

    def __init__(self, sample: Sample, bins: int):
        self.id = sample.id
        self.blurry = torch.from_numpy(sample.blurry)
        self.voxel = torch.from_numpy(voxelize(sample.events, bins).data.astype(np.float32))
        self.gt_frames = torch.from_numpy(sample.gt_frames)

    def __getattr__(self, name):
        if name == "gt_disparity":
            raise DisparityLeakError("training code must not read ground-truth disparity")
        raise AttributeError(name)


class TrainLoader:
    """Shuffled, randomly cropped batches; audits that disparity is never read."""

    def __init__(self, samples, bins: int, batch: int, crop: int, seed: int = 0):
        self.samples = list(samples)
        if not self.samples:
            raise ValueError("empty training set")
        self._reads = [s.disparity_reads for s in self.samples]
        self.views = [_TrainView(s, bins) for s in self.samples]
        self.batch = min(batch, len(self.views))
        h, w = self.views[0].blurry.shape[-2:]
        self.crop = min(crop, h, w) // 8 * 8
        if self.crop < 8:
            raise ValueError("crop must leave at least 8x8 pixels")
        self.rng = np.random.default_rng(seed)
        self.audit()

    def audit(self):
        for s, n in zip(self.samples, self._reads):
            if s.disparity_reads != n:
                raise DisparityLeakError(f"sample {s.id}: ground-truth disparity was read during training")

    def __len__(self):
        return math.ceil(len(self.views) / self.batch)

    def _crop(self, view):
        h, w = view.blurry.shape[-2:]
        y = int(self.rng.integers(0, h - self.crop + 1))
        x = int(self.rng.integers(0, w - self.crop + 1))
        sl = (..., slice(y, y + self.crop), slice(x, x + self.crop))
        return view.blurry[sl], view.voxel[sl], view.gt_frames[sl]

    def epoch(self):
        order = self.rng.permutation(len(self.views))
        for i in range(0, len(order), self.batch):
            parts = [self._crop(self.views[j]) for j in order[i:i + self.batch]]
            yield tuple(torch.stack(p) for p in zip(*parts))


def make_optimizer(model: StEDNet, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=cfg.betas, eps=cfg.eps)


def make_extractor(cfg: TrainConfig):
    if cfg.weights.perc <= 0:
        return None
    return PerceptualExtractor(cfg.extractor_plan, in_channels=3, weights=cfg.extractor_weights,
                               seed=cfg.seed)


def train_step(model: StEDNet, optimizer, batch, cfg: TrainConfig, extractor=None, step: int = 0):
    """One Adam update. Returns the loss breakdown (plus ``total`` and ``grad_norm``)."""
    blurry, voxel, gt = batch
    model.train()
    optimizer.zero_grad(set_to_none=True)
    out = model(blurry, voxel)
    disp = out["disparity"] if model.cfg.use_dispnet else None
    extra = ()
    if cfg.tv_on_stages:
        extra = [d for pair in out["disparities"] for d in pair]
    loss, terms = total_loss(out["frames"], gt, disp, cfg.weights, extractor, extra)
    if not torch.isfinite(loss):
        dump = {"step": step, "terms": terms,
                "param_norms": {k: float(p.detach().norm()) for k, p in model.named_parameters()}}
        raise NumericalFailure(f"non-finite loss at step {step}: {terms}", dump)
    loss.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    terms["total"] = float(loss.detach())
    terms["grad_norm"] = float(grad_norm)
    if disp is not None:
        terms["disp_mean"] = float(disp.detach().mean())
    return terms


def fit(samples, cfg: TrainConfig, steps: int | None = None, log_path=None,
        checkpoint_dir=None, model: StEDNet | None = None):
    """Train from scratch (or continue ``model``). ``steps`` overrides the epoch budget.

    Returns ``(model, history)``; history holds one breakdown per step.
    """
    from .checkpoint import save_model

    set_deterministic(cfg.seed, cfg.deterministic)
    if model is None:
        model = StEDNet(cfg.model)
    optimizer = make_optimizer(model, cfg)
    extractor = make_extractor(cfg)
    loader = TrainLoader(samples, cfg.model.bins, cfg.batch, cfg.crop, cfg.seed)
    log = open(log_path, "w") if log_path else None
    history = []
    step = 0
    try:
        for epoch in itertools.count():
            if steps is None and epoch >= cfg.max_epochs:
                break
            lr = lr_schedule(epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            for batch in loader.epoch():
                if steps is not None and step >= steps:
                    break
                try:
                    terms = train_step(model, optimizer, batch, cfg, extractor, step)
                except NumericalFailure as exc:
                    if checkpoint_dir:
                        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                        (Path(checkpoint_dir) / "nan_dump.json").write_text(json.dumps(exc.dump, indent=2))
                    raise
                terms.update(step=step, epoch=epoch, lr=lr)
                history.append(terms)
                if log:
                    log.write(json.dumps(terms) + "\n")
                step += 1
            loader.audit()
            if steps is not None and step >= steps:
                break
    finally:
        if log:
            log.close()
    if checkpoint_dir:
        save_model(model, checkpoint_dir, {"train_config": cfg.to_dict(), "steps": step})
    return model, history


def model_predictor(model: StEDNet):
    """Callable mapping a Sample to (frames (M, C, H, W), disparity (H, W)) arrays."""
    bins = model.cfg.bins

    @torch.no_grad()
    def predict(sample: Sample):
        model.eval()
        blurry = torch.from_numpy(sample.blurry)[None]
        voxel = torch.from_numpy(voxelize(sample.events, bins).data.astype(np.float32))[None]
        out = model(blurry, voxel)
        return out["frames"][0].numpy(), out["disparity"][0, 0].numpy()

    predict.model = model
    return predict


def evaluate(samples, predictor, config: dict | None = None, out_dir=None) -> dict:
    """Middle-frame and sequence PSNR/SSIM plus disparity EPE and bad-pixel ratios.

    ``predictor`` is a StEDNet or a callable Sample -> (frames, disparity).
    """
    if isinstance(predictor, StEDNet):
        predictor = model_predictor(predictor)
    if config is None and hasattr(predictor, "model"):
        config = predictor.model.cfg.to_dict()
    chash = config_hash(config or {})
    rows = []
    for s in samples:
        frames, disp = predictor(s)
        frames = np.asarray(frames, np.float64)
        gt = s.gt_frames.astype(np.float64)
        if frames.shape != gt.shape:
            raise ValueError(f"sample {s.id}: predicted {frames.shape}, ground truth {gt.shape}")
        mid = gt.shape[0] // 2
        gt_disp = s.gt_disparity.astype(np.float64)
        disp = np.asarray(disp, np.float64)
        rows.append({
            "id": s.id,
            "psnr_mid": metrics.psnr(frames[mid], gt[mid]),
            "ssim_mid": metrics.ssim(frames[mid], gt[mid]),
            "psnr_seq": float(np.mean([metrics.psnr(f, g) for f, g in zip(frames, gt)])),
            "ssim_seq": float(np.mean([metrics.ssim(f, g) for f, g in zip(frames, gt)])),
            "psnr_blurry": metrics.psnr(s.blurry, gt[mid]),
            "epe": metrics.epe(disp, gt_disp),
            "bad1": metrics.bad_pixel_ratio(disp, gt_disp, 1.0),
            "bad3": metrics.bad_pixel_ratio(disp, gt_disp, 3.0),
            "bad5": metrics.bad_pixel_ratio(disp, gt_disp, 5.0),
        })
        if out_dir is not None:
            from .plotting import save_result_grid
            save_result_grid(s, frames, disp, Path(out_dir) / f"{s.id}.png")
    keys = [k for k in rows[0] if k != "id"] if rows else []
    aggregate = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    report = {
        "n_samples": len(rows),
        "config_hash": chash,
        "samples": rows,
        "aggregate": aggregate,
        "metrics": [{"metric": k, "value": v, "n_samples": len(rows), "config_hash": chash}
                    for k, v in aggregate.items()],
    }
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "report.json").write_text(json.dumps(report, indent=2))
    return report


def ablation_grid():
    return [dict(zip(FLAGS, combo)) for combo in itertools.product((True, False), repeat=4)]


def run_ablation(train_samples, cfg: TrainConfig, steps: int, eval_samples=None, grid=None):
    """Train and evaluate each flag combination; one table row per combination."""
    grid = ablation_grid() if grid is None else grid
    eval_samples = train_samples if eval_samples is None else eval_samples
    rows = []
    for flags in grid:
        run_cfg = replace(cfg, model=replace(cfg.model, **flags))
        model, history = fit(train_samples, run_cfg, steps=steps)
        report = evaluate(eval_samples, model)
        agg = report["aggregate"]
        rows.append({
            "DispNet": flags["use_dispnet"], "DP": flags["use_dual_path"],
            "BDE": flags["use_bde"], "AFF": flags["use_aff"],
            "final_loss": history[-1]["dblr"] if history else float("nan"),
            "PSNR": agg["psnr_mid"], "SSIM": agg["ssim_mid"],
            "PSNR_seq": agg["psnr_seq"], "EPE": agg["epe"],
        })
        logger.info("ablation %s -> %.3f dB", flags, agg["psnr_mid"])
    return rows


def format_ablation(rows) -> str:
    mark = {True: "x", False: "-"}
    lines = ["DispNet DP  BDE AFF   PSNR    SSIM    EPE"]
    for r in rows:
        lines.append(f"{mark[r['DispNet']]:>7} {mark[r['DP']]:>2} {mark[r['BDE']]:>4} "
                     f"{mark[r['AFF']]:>3} {r['PSNR']:7.3f} {r['SSIM']:7.4f} {r['EPE']:6.3f}")
    return "\n".join(lines)
