"""Desk-scale multi-stage feature extractor.

Two modes: ``passthrough`` uses the dataset's per-stage patch grids
verbatim (covers precomputed-feature protocols, including a single 1x1
stage), while ``conv`` derives stages from one raw input grid with a small
strided convolutional stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import ConfigError

MODE_PASSTHROUGH = "passthrough"
MODE_CONV = "conv"


@dataclass
class BackboneConfig:
    mode: str = MODE_PASSTHROUGH
    widths: tuple[int, ...] = (32, 64)  # conv mode: output channels per stage
    downsamples: tuple[int, ...] = (2, 2)  # conv mode: stride per stage

    def validate(self) -> None:
        if self.mode not in (MODE_PASSTHROUGH, MODE_CONV):
            raise ConfigError(f"backbone: unknown mode {self.mode!r}")
        if self.mode == MODE_CONV:
            if not self.widths:
                raise ConfigError("backbone: conv mode needs at least one stage width")
            if len(self.widths) != len(self.downsamples):
                raise ConfigError("backbone: widths and downsamples must align")
            if any(w < 1 for w in self.widths) or any(d < 1 for d in self.downsamples):
                raise ConfigError("backbone: widths and downsamples must be positive")

    @property
    def num_stages(self) -> int:
        return len(self.widths)


class ConvBackbone(nn.Module):
    """Strided conv stack turning one raw grid into multiple stages."""

    def __init__(self, config: BackboneConfig, in_channels: int):
        super().__init__()
        config.validate()
        if config.mode != MODE_CONV:
            raise ConfigError("ConvBackbone requires conv mode")
        self.config = config
        layers = []
        prev = in_channels
        for width, stride in zip(config.widths, config.downsamples):
            layers.append(nn.Conv2d(prev, width, kernel_size=3, stride=stride, padding=1))
            prev = width
        self.convs = nn.ModuleList(layers)

    def forward(self, grid: torch.Tensor) -> list[torch.Tensor]:
        """(B, H, W, C_in) -> per-stage patch tensors (B, P_s, D_s), shallow to deep."""
        x = grid.permute(0, 3, 1, 2)
        stages = []
        for conv in self.convs:
            x = torch.relu(conv(x))
            b, d, h, w = x.shape
            stages.append(x.permute(0, 2, 3, 1).reshape(b, h * w, d))
        return stages


def extract_stages(
    features_by_stage: list[torch.Tensor],
    config: BackboneConfig,
    conv: ConvBackbone | None = None,
) -> list[torch.Tensor]:
    """Per-stage patch tensors for a batch, shallow to deep.

    Passthrough returns the input list unchanged; conv mode consumes a
    single raw stage shaped (B, H, W, C) or (B, P, C) with square P.
    """
    config.validate()
    if config.mode == MODE_PASSTHROUGH:
        return features_by_stage
    if conv is None:
        raise ConfigError("backbone: conv mode requires a ConvBackbone module")
    if len(features_by_stage) != 1:
        raise ConfigError("backbone: conv mode expects exactly one raw input stage")
    grid = features_by_stage[0]
    if grid.ndim == 3:
        b, p, d = grid.shape
        side = int(round(p**0.5))
        if side * side != p:
            raise ConfigError(f"backbone: cannot reshape {p} patches into a square grid")
        grid = grid.reshape(b, side, side, d)
    return conv(grid)
