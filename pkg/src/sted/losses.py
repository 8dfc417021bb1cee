"""Training objectives: l1 deblurring, perceptual, disparity TV and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

# VGG-19 up to relu3_3 (torchvision ``features[:16]``)
VGG19_CONV3_3 = (64, 64, "M", 128, 128, "M", 256, 256, 256)
# narrow copy for desk runs
DESK_PLAN = (8, 8, "M", 16, 16, "M", 32, 32, 32)


@dataclass
class LossWeights:
    dblr: float = 1.0
    perc: float = 0.002
    tv: float = 0.0005

    def __post_init__(self):
        if min(self.dblr, self.perc, self.tv) < 0:
            raise ValueError("loss weights must be non-negative")


def _check_frames(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} vs ground truth {tuple(gt.shape)}")


def l_dblr(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean absolute error per frame, averaged over frames. Frames on dim 1."""
    _check_frames(pred, gt)
    per_frame = [(pred[:, m] - gt[:, m]).abs().mean() for m in range(pred.shape[1])]
    return torch.stack(per_frame).mean()


class PerceptualExtractor(nn.Module):
    """Frozen VGG-style conv stack truncated after the third block's last ReLU.

    ``weights`` may be a path to a torchvision-style ``vgg19().features``
    state dict (keys ``"0.weight"``, ... or ``"features.0.weight"``);
    otherwise the stack is initialised from ``seed`` and frozen.
    """

    def __init__(self, plan=DESK_PLAN, in_channels=3, weights=None, seed=0,
                 mean=None, std=None):
        super().__init__()
        self.plan = tuple(plan)
        self.in_channels = in_channels
        layers = []
        cin = in_channels
        for item in self.plan:
            if item == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers += [nn.Conv2d(cin, item, 3, padding=1), nn.ReLU()]
                cin = item
        self.features = nn.Sequential(*layers)
        if weights is not None:
            self._load(weights)
        else:
            gen = torch.Generator().manual_seed(seed)
            for m in self.features:
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * 9
                    with torch.no_grad():
                        m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                        m.bias.zero_()
        mean = torch.zeros(in_channels) if mean is None else torch.as_tensor(mean, dtype=torch.float32)
        std = torch.ones(in_channels) if std is None else torch.as_tensor(std, dtype=torch.float32)
        self.register_buffer("mean", mean.view(1, -1, 1, 1))
        self.register_buffer("std", std.view(1, -1, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def _load(self, weights):
        state = torch.load(Path(weights), map_location="cpu", weights_only=True)
        state = {k.removeprefix("features."): v for k, v in state.items()}
        own = self.features.state_dict()
        missing = [k for k in own if k not in state]
        if missing:
            raise ValueError(f"extractor weights missing {missing[:3]}")
        self.features.load_state_dict({k: state[k] for k in own})

    def train(self, mode=True):
        # frozen: never leave eval mode
        return super().train(False)

    def forward(self, x):
        if x.shape[1] == 1 and self.in_channels == 3:
            x = x.expand(-1, 3, -1, -1)
        return self.features((x - self.mean) / self.std)


def l_perc(pred: torch.Tensor, gt: torch.Tensor, extractor) -> torch.Tensor:
    """Mean squared feature distance per frame, averaged over frames."""
    if extractor is None:
        raise ValueError("perceptual loss needs an extractor")
    _check_frames(pred, gt)
    per_frame = []
    for m in range(pred.shape[1]):
        diff = extractor(pred[:, m]) - extractor(gt[:, m])
        per_frame.append(diff.pow(2).mean())
    return torch.stack(per_frame).mean()


def l_tv(disp: torch.Tensor) -> torch.Tensor:
    """Anisotropic TV: mean |forward x-difference| + mean |forward y-difference|."""
    dx = disp[..., :, 1:] - disp[..., :, :-1]
    dy = disp[..., 1:, :] - disp[..., :-1, :]
    zero = disp.new_zeros(())
    tx = dx.abs().mean() if dx.numel() else zero
    ty = dy.abs().mean() if dy.numel() else zero
    return tx + ty


def total_loss(pred, gt, disp, weights: LossWeights, extractor=None, extra_disparities=()):
    """Weighted sum and per-term breakdown.

    ``extra_disparities`` extends the TV term to additional fields (e.g. the
    stage disparities); each contributes its own TV value.
    """
    terms = {"dblr": l_dblr(pred, gt)}
    if weights.perc > 0:
        terms["perc"] = l_perc(pred, gt, extractor)
    else:
        terms["perc"] = pred.new_zeros(())
    if disp is not None:
        tv = l_tv(disp)
        for d in extra_disparities:
            tv = tv + l_tv(d)
        terms["tv"] = tv
    else:
        terms["tv"] = pred.new_zeros(())
    total = weights.dblr * terms["dblr"] + weights.perc * terms["perc"] + weights.tv * terms["tv"]
    return total, {k: float(v.detach()) for k, v in terms.items()}
