"""Horizontal backward warping, pixel (un)shuffle and disparity persistence.

Disparity convention ("x_minus_d"): ``out[..., y, x] = src[..., y, x - d[y, x]]``,
so a positive disparity samples to the left.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

CONVENTION = "x_minus_d"


def _as_disp4(disp: torch.Tensor, src: torch.Tensor) -> torch.Tensor:
    if disp.dim() == src.dim() - 1:
        disp = disp.unsqueeze(-3)
    if disp.dim() != 4 or disp.shape[1] != 1:
        raise ValueError(f"disparity must be (B, 1, H, W) or (B, H, W), got {tuple(disp.shape)}")
    if disp.shape[0] != src.shape[0] or disp.shape[-2:] != src.shape[-2:]:
        raise ValueError(f"disparity {tuple(disp.shape)} does not match source {tuple(src.shape)}")
    return disp


def backward_warp(src: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Bilinear horizontal sampling of ``src`` (B, C, H, W) at ``x - disp``.

    Each of the two taps contributes zero when it falls outside [0, W-1].
    Differentiable w.r.t. both arguments.
    """
    if src.dim() != 4:
        raise ValueError(f"source must be (B, C, H, W), got {tuple(src.shape)}")
    disp = _as_disp4(disp, src)
    if not torch.isfinite(disp).all():
        raise ValueError("non-finite disparity")
    b, c, h, w = src.shape
    xs = torch.arange(w, dtype=disp.dtype, device=disp.device) - disp
    x0 = torch.floor(xs)
    w1 = xs - x0
    w0 = 1.0 - w1
    i0 = x0.long()
    i1 = i0 + 1
    valid0 = ((i0 >= 0) & (i0 <= w - 1)).to(src.dtype)
    valid1 = ((i1 >= 0) & (i1 <= w - 1)).to(src.dtype)
    idx0 = i0.clamp(0, w - 1).expand(b, c, h, w)
    idx1 = i1.clamp(0, w - 1).expand(b, c, h, w)
    v0 = src.gather(-1, idx0)
    v1 = src.gather(-1, idx1)
    return v0 * (w0 * valid0) + v1 * (w1 * valid1)


def shift_columns(src: torch.Tensor, d: int) -> torch.Tensor:
    """Integer shift ``out[..., x] = src[..., x - d]`` with zero fill."""
    out = torch.zeros_like(src)
    w = src.shape[-1]
    if d >= 0:
        if d < w:
            out[..., d:] = src[..., : w - d]
    elif -d < w:
        out[..., : w + d] = src[..., -d:]
    return out


def pixel_unshuffle(t: torch.Tensor, r: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, C*r*r, H/r, W/r).

    Output channel ``c*r*r + i*r + j`` holds ``t[:, c, i::r, j::r]``.
    """
    if r < 1:
        raise ValueError("factor must be >= 1")
    h, w = t.shape[-2:]
    if h % r or w % r:
        raise ValueError(f"spatial dims {h}x{w} not divisible by {r}")
    return F.pixel_unshuffle(t, r)


def pixel_shuffle(t: torch.Tensor, r: int) -> torch.Tensor:
    """Inverse of :func:`pixel_unshuffle`."""
    if r < 1:
        raise ValueError("factor must be >= 1")
    if t.shape[-3] % (r * r):
        raise ValueError(f"{t.shape[-3]} channels not divisible by {r * r}")
    return F.pixel_shuffle(t, r)


def align_events(voxel: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Warp every temporal bin of a (B, bins, H, W) voxel tensor with one disparity map."""
    return backward_warp(voxel, disp)


def upsample_disparity(disp: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Bilinear spatial upsampling with values rescaled to the finer pixel grid."""
    return F.interpolate(disp, scale_factor=factor, mode="bilinear", align_corners=False) * factor


@dataclass
class DisparityMap:
    data: np.ndarray  # (H, W)
    convention: str = CONVENTION

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError("disparity map must be 2-D")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("non-finite disparity")

    def save(self, path) -> None:
        path = Path(path)
        self.data.astype("<f4").tofile(path)
        path.with_suffix(".json").write_text(json.dumps(
            {"height": self.data.shape[0], "width": self.data.shape[1],
             "dtype": "float32", "convention": self.convention}))

    @classmethod
    def load(cls, path) -> "DisparityMap":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta.get("convention") != CONVENTION:
            raise ValueError(f"unsupported disparity convention {meta.get('convention')!r}")
        raw = np.fromfile(path, "<f4")
        h, w = meta["height"], meta["width"]
        if raw.size != h * w:
            raise ValueError(f"{path}: expected {h * w} values, found {raw.size}")
        return cls(raw.reshape(h, w))
