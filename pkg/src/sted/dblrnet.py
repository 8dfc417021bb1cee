"""Fine alignment and deblurring network.

Blur and event inputs get separate shallow extractors (at half resolution),
then pass through ``N`` cascaded dual-feature stages. Each stage refines
both paths with a residual dense block, predicts per-group horizontal
disparities in both directions, warps each path's channel groups toward the
other and fuses self and warped features with an attention gate. The
disparity estimator and fusion gates are shared by all stages. A global
fusion head turns the blur-path outputs of every stage plus the last
event-path output into ``M`` frames.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .geometry import backward_warp, pixel_shuffle, pixel_unshuffle


@dataclass
class DblrNetConfig:
    C: int = 48
    N: int = 6
    L: int = 6
    M: int = 7
    out_channels: int = 3
    bins: int = 6
    growth: int = 16
    rdb_layers: int = 4
    use_dual_path: bool = True
    use_bde: bool = True
    use_aff: bool = True
    # add the blurry input to every predicted frame
    blurry_skip: bool = True

    def __post_init__(self):
        if self.N < 1 or self.M < 1 or self.L < 1:
            raise ValueError("N, M and L must be >= 1")
        if self.C % self.L:
            raise ValueError(f"C={self.C} not divisible by L={self.L}")


class SFE(nn.Module):
    """x2 space-to-depth, channel projection, one 3x3 refinement."""

    def __init__(self, in_ch, C):
        super().__init__()
        self.proj = nn.Conv2d(in_ch * 4, C, 1)
        self.conv = nn.Conv2d(C, C, 3, padding=1)
        self.act = nn.ReLU()

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"input dims {h}x{w} must be even")
        return self.conv(self.act(self.proj(pixel_unshuffle(x, 2))))


class RDB(nn.Module):
    def __init__(self, C, growth=16, n_layers=4):
        super().__init__()
        self.C = C
        self.convs = nn.ModuleList(
            nn.Conv2d(C + i * growth, growth, 3, padding=1) for i in range(n_layers))
        self.act = nn.ReLU()
        self.fusion = nn.Conv2d(C + n_layers * growth, C, 1)

    def forward(self, x, drop_layer=None):
        if x.shape[1] != self.C:
            raise ValueError(f"expected {self.C} channels, got {x.shape[1]}")
        feats = [x]
        for i, conv in enumerate(self.convs):
            out = self.act(conv(torch.cat(feats, 1)))
            if i == drop_layer:
                out = torch.zeros_like(out)
            feats.append(out)
        return x + self.fusion(torch.cat(feats, 1))


class BDE(nn.Module):
    """Predicts L blur->event and L event->blur horizontal fields."""

    def __init__(self, C, L):
        super().__init__()
        if C % L:
            raise ValueError(f"C={C} not divisible by L={L}")
        self.L = L
        self.net = nn.Sequential(
            nn.Conv2d(2 * C, C, 3, padding=1), nn.LeakyReLU(0.1),
            nn.Conv2d(C, C, 3, padding=1), nn.LeakyReLU(0.1),
            nn.Conv2d(C, 2 * L, 3, padding=1),
        )
        # start from identity alignment
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, f_blur, f_event):
        if f_blur.shape != f_event.shape:
            raise ValueError("feature pair shapes differ")
        d = self.net(torch.cat([f_blur, f_event], 1))
        return d[:, : self.L], d[:, self.L:]


def group_warp(f: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    """Warp channel group ``l`` of ``f`` (B, C, H, W) with field ``d[:, l]`` (B, L, H, W)."""
    b, c, h, w = f.shape
    L = d.shape[1]
    if c % L:
        raise ValueError(f"{c} channels not divisible into {L} groups")
    if d.shape[0] != b or d.shape[-2:] != (h, w):
        raise ValueError(f"fields {tuple(d.shape)} do not match features {tuple(f.shape)}")
    out = backward_warp(f.reshape(b * L, c // L, h, w), d.reshape(b * L, 1, h, w))
    return out.reshape(b, c, h, w)


class AFF(nn.Module):
    """Gated fusion ``A*self + (1-A)*other`` followed by a residual 1x1 projection."""

    def __init__(self, C, gated=True):
        super().__init__()
        self.gated = gated
        self.gate = nn.Conv2d(2 * C, C, 3, padding=1)
        self.proj = nn.Conv2d(C, C, 1)

    def fuse(self, f_self, w_other):
        if f_self.shape != w_other.shape:
            raise ValueError("AFF inputs differ in shape")
        if not self.gated:
            return 0.5 * (f_self + w_other)
        a = torch.sigmoid(self.gate(torch.cat([f_self, w_other], 1)))
        return a * f_self + (1.0 - a) * w_other

    def forward(self, f_self, w_other):
        return f_self + self.proj(self.fuse(f_self, w_other))


class DDFE(nn.Module):
    """One cascade stage; owns its RDBs, borrows the shared BDE and AFFs."""

    def __init__(self, cfg: DblrNetConfig):
        super().__init__()
        self.rdb_b = RDB(cfg.C, cfg.growth, cfg.rdb_layers)
        self.rdb_e = RDB(cfg.C, cfg.growth, cfg.rdb_layers)

    def forward(self, f_b, f_e, bde, aff_b, aff_e, use_bde=True):
        f_b = self.rdb_b(f_b)
        f_e = self.rdb_e(f_e)
        if use_bde:
            d_be, d_eb = bde(f_b, f_e)
            w_b = group_warp(f_b, d_eb)
            w_e = group_warp(f_e, d_be)
        else:
            n, _, h, w = f_b.shape
            d_be = d_eb = f_b.new_zeros(n, bde.L, h, w)
            w_b, w_e = f_b, f_e
        # each path fuses with the other path's warped features
        return aff_b(f_b, w_e), aff_e(f_e, w_b), (d_be, d_eb)


class GFF(nn.Module):
    def __init__(self, in_ch, C, M, out_channels):
        super().__init__()
        self.in_ch = in_ch
        self.M = M
        self.out_channels = out_channels
        self.fuse = nn.Conv2d(in_ch, C, 1)
        self.body = nn.Sequential(
            nn.Conv2d(C, C, 3, padding=1), nn.ReLU(),
            nn.Conv2d(C, 4 * M * out_channels, 3, padding=1),
        )

    def forward(self, f_cat):
        if f_cat.shape[1] != self.in_ch:
            raise ValueError(f"expected {self.in_ch} channels, got {f_cat.shape[1]}")
        out = pixel_shuffle(self.body(self.fuse(f_cat)), 2)
        b, _, h, w = out.shape
        return out.reshape(b, self.M, self.out_channels, h, w)


class DblrNet(nn.Module):
    def __init__(self, cfg: DblrNetConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.C
        if cfg.use_dual_path:
            self.sfe_b = SFE(cfg.out_channels, C)
            self.sfe_e = SFE(cfg.bins, C)
            self.bde = BDE(C, cfg.L)
            self.aff_b = AFF(C, gated=cfg.use_aff)
            self.aff_e = AFF(C, gated=cfg.use_aff)
            self.stages = nn.ModuleList(DDFE(cfg) for _ in range(cfg.N))
            gff_in = (cfg.N + 1) * C
        else:
            # single path on the channel-concatenated inputs
            self.sfe = SFE(cfg.out_channels + cfg.bins, C)
            self.stages = nn.ModuleList(
                RDB(C, cfg.growth, cfg.rdb_layers) for _ in range(cfg.N))
            gff_in = cfg.N * C
        self.gff = GFF(gff_in, C, cfg.M, cfg.out_channels)

    def forward(self, blurry, voxel):
        """Returns frames (B, M, C_out, H, W) and per-stage diagnostics."""
        cfg = self.cfg
        if blurry.shape[-2:] != voxel.shape[-2:]:
            raise ValueError("blurry and voxel spatial dims differ")
        disparities = []
        if cfg.use_dual_path:
            f_b = self.sfe_b(blurry)
            f_e = self.sfe_e(voxel)
            blur_feats = []
            for stage in self.stages:
                f_b, f_e, d = stage(f_b, f_e, self.bde, self.aff_b, self.aff_e,
                                    use_bde=cfg.use_bde)
                blur_feats.append(f_b)
                disparities.append(d)
            f_cat = torch.cat(blur_feats + [f_e], 1)
        else:
            f = self.sfe(torch.cat([blurry, voxel], 1))
            feats = []
            for rdb in self.stages:
                f = rdb(f)
                feats.append(f)
            f_cat = torch.cat(feats, 1)
        frames = self.gff(f_cat)
        if cfg.blurry_skip:
            frames = frames + blurry.unsqueeze(1)
        diagnostics = {
            "disparities": disparities,
            "stage_magnitude": [
                0.5 * (d_be.abs().mean() + d_eb.abs().mean()).detach().item()
                for d_be, d_eb in disparities],
        }
        return frames, diagnostics
