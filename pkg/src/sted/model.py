"""End-to-end network: coarse disparity, event pre-alignment, deblurring."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .dblrnet import DblrNet, DblrNetConfig
from .dispnet import DispNet, DispNetConfig
from .geometry import align_events


@dataclass
class ModelConfig:
    image_channels: int = 3
    bins: int = 6
    C: int = 48
    N: int = 6
    L: int = 6
    M: int = 7
    growth: int = 16
    rdb_layers: int = 4
    disp_widths: dict = field(default_factory=lambda: {1: 32, 2: 48, 4: 64, 8: 96})
    max_disparity: float = 48.0
    init_disparity: float = 0.0
    coarse_unit: float | None = None
    use_dispnet: bool = True
    use_dual_path: bool = True
    use_bde: bool = True
    use_aff: bool = True
    blurry_skip: bool = True

    def __post_init__(self):
        self.disp_widths = {int(k): int(v) for k, v in self.disp_widths.items()}

    def dispnet(self) -> DispNetConfig:
        return DispNetConfig(image_channels=self.image_channels, bins=self.bins,
                             widths=dict(self.disp_widths), max_disparity=self.max_disparity,
                             init_disparity=self.init_disparity,
                             coarse_unit=self.coarse_unit)

    def dblrnet(self) -> DblrNetConfig:
        return DblrNetConfig(C=self.C, N=self.N, L=self.L, M=self.M,
                             out_channels=self.image_channels, bins=self.bins,
                             growth=self.growth, rdb_layers=self.rdb_layers,
                             use_dual_path=self.use_dual_path, use_bde=self.use_bde,
                             use_aff=self.use_aff, blurry_skip=self.blurry_skip)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class StEDNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        # built even when disabled so checkpoints share one layout
        self.dispnet = DispNet(cfg.dispnet())
        self.dblrnet = DblrNet(cfg.dblrnet())

    def forward(self, blurry, voxel, disparity=None):
        """``disparity`` overrides the DispNet estimate when given.

        Returns a dict with ``frames`` (B, M, C, H, W), ``disparity``
        (B, 1, H, W), ``aligned`` voxels and network diagnostics.
        """
        disp_diag = {}
        if disparity is not None:
            disp = disparity
        elif self.cfg.use_dispnet:
            disp, disp_diag = self.dispnet(blurry, voxel)
        else:
            b, _, h, w = blurry.shape
            disp = blurry.new_zeros(b, 1, h, w)
        aligned = align_events(voxel, disp)
        frames, dblr_diag = self.dblrnet(blurry, aligned)
        return {"frames": frames, "disparity": disp, "aligned": aligned,
                "dispnet": disp_diag, **dblr_diag}
