"""Coarse cross-modal disparity between a blurry image and an event voxel grid.

Both modalities are pixel-unshuffled to 1/8, 1/4, 1/2 and full resolution,
encoded per scale, fused by pyramid-attention blocks and decoded coarse to
fine: the 1/8 level predicts an initial disparity, every finer level adds a
residual to the x2-upsampled estimate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import pixel_unshuffle, upsample_disparity

SCALES = (8, 4, 2, 1)


@dataclass
class DispNetConfig:
    image_channels: int = 3
    bins: int = 6
    # feature width per unshuffle factor
    widths: dict = field(default_factory=lambda: {1: 32, 2: 48, 4: 64, 8: 96})
    pa_kernel_sizes: tuple = (1, 3, 5)
    max_disparity: float = 48.0
    # initial disparity (full-resolution pixels) the coarse head starts from
    init_disparity: float = 0.0
    # coarse head output unit in full-resolution pixels; None -> max_disparity
    coarse_unit: float | None = None

    def __post_init__(self):
        self.widths = {int(k): int(v) for k, v in self.widths.items()}
        if set(self.widths) != set(SCALES):
            raise ValueError(f"widths must cover scales {SCALES}")
        if tuple(self.pa_kernel_sizes) != (1, 3, 5):
            raise ValueError("pyramid attention uses 1x1, 3x3 and 5x5 branches")
        self.pa_kernel_sizes = tuple(self.pa_kernel_sizes)


def conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.LeakyReLU(0.1),
        nn.Conv2d(cout, cout, 3, padding=1), nn.LeakyReLU(0.1),
    )


class PyramidAttention(nn.Module):
    """Gate both modality branches with attention from parallel 1/3/5 convs."""

    def __init__(self, ch, kernel_sizes=(1, 3, 5)):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv2d(2 * ch, 2 * ch, k, padding=k // 2) for k in kernel_sizes)

    def forward(self, f_img, f_evt):
        x = torch.cat([f_img, f_evt], 1)
        logits = sum(branch(x) for branch in self.branches)
        a_img, a_evt = torch.sigmoid(logits).chunk(2, 1)
        return a_img * f_img + a_evt * f_evt


class DispNet(nn.Module):
    def __init__(self, cfg: DispNetConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.enc_img = nn.ModuleDict(
            {str(r): conv_block(cfg.image_channels * r * r, w[r]) for r in SCALES})
        self.enc_evt = nn.ModuleDict(
            {str(r): conv_block(cfg.bins * r * r, w[r]) for r in SCALES})
        self.pa = nn.ModuleDict(
            {str(r): PyramidAttention(w[r], cfg.pa_kernel_sizes) for r in SCALES})
        dec = {}
        for i, r in enumerate(SCALES):
            cin = w[r] if i == 0 else w[r] + w[SCALES[i - 1]]
            dec[str(r)] = conv_block(cin, w[r])
        self.dec = nn.ModuleDict(dec)
        self.heads = nn.ModuleDict(
            {str(r): nn.Conv2d(w[r], 1, 3, padding=1) for r in SCALES})
        self.coarse_unit = cfg.max_disparity if cfg.coarse_unit is None else cfg.coarse_unit
        nn.init.constant_(self.heads["8"].bias, cfg.init_disparity / self.coarse_unit)

    def forward(self, blurry, voxel):
        """Returns ``(disparity, diagnostics)``; disparity is (B, 1, H, W).

        ``diagnostics["terms"]`` holds the initial map and every residual,
        each upsampled to full resolution, so their sum is
        ``diagnostics["unclamped"]``.
        """
        if blurry.shape[-2:] != voxel.shape[-2:] or blurry.shape[0] != voxel.shape[0]:
            raise ValueError(f"modality dims differ: {tuple(blurry.shape)} vs {tuple(voxel.shape)}")
        h, w = blurry.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"input dims {h}x{w} must be divisible by 8")

        disp = None
        feat = None
        terms = []
        per_scale = {}
        for r in SCALES:
            key = str(r)
            f_img = self.enc_img[key](pixel_unshuffle(blurry, r))
            f_evt = self.enc_evt[key](pixel_unshuffle(voxel, r))
            fused = self.pa[key](f_img, f_evt)
            if feat is not None:
                up = F.interpolate(feat, scale_factor=2, mode="bilinear", align_corners=False)
                fused = torch.cat([fused, up], 1)
            feat = self.dec[key](fused)
            out = self.heads[key](feat)
            if disp is None:
                # range-normalised coarse prediction, in 1/8-scale pixels
                out = out * (self.coarse_unit / 8.0)
                disp = out
            else:
                disp = upsample_disparity(disp) + out
                terms = [upsample_disparity(t) for t in terms]
            terms.append(out)
            per_scale[r] = disp
        # terms were upsampled alongside the running estimate
        diagnostics = {"terms": terms, "unclamped": disp, "per_scale": per_scale}
        return disp.clamp(0.0, self.cfg.max_disparity), diagnostics
