"""Miniature high-resolution backbone with feature and density heads.

Two parallel branches run at full and half resolution and exchange
information at each stage, so the density head keeps spatial precision while
the pooled feature head sees wider context. Small enough for CPU inference
on 128x128 patches.
"""
from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F


class ExchangeBlock(nn.Module):
    """One high/low resolution stage with cross-resolution fusion."""

    def __init__(self, width: int):
        super().__init__()
        self.high = nn.Sequential(nn.Conv2d(width, width, 3, padding=1), nn.ReLU(inplace=True))
        self.low = nn.Sequential(nn.Conv2d(width, width, 3, padding=1), nn.ReLU(inplace=True))
        self.fuse_high = nn.Conv2d(2 * width, width, 1)
        self.fuse_low = nn.Conv2d(2 * width, width, 1)

    def forward(self, high: torch.Tensor, low: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.high(high)
        l = self.low(low)
        up = F.interpolate(l, size=h.shape[-2:], mode="bilinear", align_corners=False)
        down = F.avg_pool2d(h, 2)
        h_out = F.relu(self.fuse_high(torch.cat([h, up], dim=1)))
        l_out = F.relu(self.fuse_low(torch.cat([l, down], dim=1)))
        return h_out, l_out


class PatchBackbone(nn.Module):
    def __init__(self, feature_dim: int = 64, width: int = 16, stages: int = 2):
        super().__init__()
        self.feature_dim = feature_dim
        self.width = width
        self.stages_count = stages
        self.stem = nn.Sequential(nn.Conv2d(1, width, 3, padding=1), nn.ReLU(inplace=True))
        self.down = nn.Conv2d(width, width, 3, stride=2, padding=1)
        self.stages = nn.ModuleList(ExchangeBlock(width) for _ in range(stages))
        self.feature_head = nn.Linear(width, feature_dim)
        self.density_head = nn.Conv2d(width, 1, 1)

    def forward(self, patches: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, 1, H, W) in [0, 1] -> ((B, d) features, (B, H, W) density in [0, 1])."""
        high = self.stem(patches)
        low = F.relu(self.down(high))
        for stage in self.stages:
            high, low = stage(high, low)
        merged = high + F.interpolate(low, size=high.shape[-2:], mode="bilinear", align_corners=False)
        pooled = merged.mean(dim=(2, 3))
        features = self.feature_head(pooled)
        density = torch.sigmoid(self.density_head(merged)).squeeze(1)
        return features, density

    def last_layer_parameters(self):
        """The last layers: final exchange stage plus both heads.

        The density objective reaches the feature output through the shared
        final stage, so fine-tuning moves the embeddings too; everything
        upstream stays frozen.
        """
        yield from self.stages[-1].parameters()
        yield from self.feature_head.parameters()
        yield from self.density_head.parameters()


def save_checkpoint(model: PatchBackbone, path: str | Path) -> None:
    torch.save(
        {
            "state_dict": model.state_dict(),
            "feature_dim": model.feature_dim,
            "width": model.width,
            "stages": model.stages_count,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> PatchBackbone:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model = PatchBackbone(payload["feature_dim"], payload["width"], payload["stages"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def init_checkpoint(path: str | Path, feature_dim: int = 64, width: int = 16, seed: int = 0) -> None:
    torch.manual_seed(seed)
    model = PatchBackbone(feature_dim=feature_dim, width=width)
    save_checkpoint(model, path)
