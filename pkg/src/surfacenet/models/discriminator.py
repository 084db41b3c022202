"""Patch discriminator over stacked SVBRDF maps.

Six plain convolutions (no normalization, so every score depends only on its
receptive field). In ``patch`` mode the last layer emits a grid of per-patch
probabilities; in ``image`` mode features are globally pooled before the last
layer, giving one image-level score.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from ..materials import STACK_CHANNELS, MaterialMaps
from .generator import ConfigError


@dataclass
class LayerSpec:
    kernel: int
    stride: int
    padding: int
    channels: int


def _patch_layers(widths) -> list[LayerSpec]:
    # 256 -> 128 -> 64 -> 32 -> 16 -> 16 -> 14
    strided = [LayerSpec(4, 2, 1, c) for c in widths[:4]]
    return strided + [LayerSpec(3, 1, 1, widths[4]), LayerSpec(3, 1, 0, 1)]


@dataclass
class DiscriminatorConfig:
    input_channels: int = STACK_CHANNELS
    layers: list[LayerSpec] = field(default_factory=lambda: _patch_layers([16, 32, 64, 128, 128]))
    mode: str = "patch"  # "patch" or "image"
    negative_slope: float = 0.2
    # (input size, required score-map size); None skips the check
    reference_grid: tuple[int, int] | None = (256, 14)
    seed: int = 1

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        if self.reference_grid is not None:
            self.reference_grid = tuple(self.reference_grid)

    def output_size(self, n: int) -> int:
        """Score-map side length for an n x n input (patch mode)."""
        for l in self.layers:
            n = (n + 2 * l.padding - l.kernel) // l.stride + 1
        return n

    def receptive_field(self) -> tuple[int, int, float]:
        """(size, jump, centre of score 0) in input pixels, centre measured in pixel indices."""
        size, jump, start = 1, 1, 0.0
        for l in self.layers:
            start += ((l.kernel - 1) / 2 - l.padding) * jump
            size += (l.kernel - 1) * jump
            jump *= l.stride
        return size, jump, start

    def validate(self) -> None:
        if len(self.layers) != 6:
            raise ConfigError(f"discriminator must have exactly 6 convolutional layers, got {len(self.layers)}")
        if self.layers[-1].channels != 1:
            raise ConfigError("last discriminator layer must output 1 channel")
        if self.mode not in ("patch", "image"):
            raise ConfigError(f"unknown discriminator mode {self.mode!r}")
        if self.mode == "patch" and self.reference_grid is not None:
            n_in, n_out = self.reference_grid
            got = self.output_size(n_in)
            if got != n_out:
                raise ConfigError(f"layer arithmetic maps {n_in}x{n_in} to {got}x{got}, expected {n_out}x{n_out}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def paper(cls, **overrides) -> DiscriminatorConfig:
        return cls(layers=_patch_layers([64, 128, 256, 512, 512]), **overrides)

    @classmethod
    def desk(cls, **overrides) -> DiscriminatorConfig:
        return cls(**overrides)

    @classmethod
    def small_input(cls, widths=(16, 32, 64, 128, 128), **overrides) -> DiscriminatorConfig:
        """Six layers for inputs as small as 8x8: two stride-2 layers, then stride 1 throughout."""
        layers = [LayerSpec(4, 2, 1, widths[0]), LayerSpec(4, 2, 1, widths[1])]
        layers += [LayerSpec(3, 1, 1, c) for c in widths[2:5]] + [LayerSpec(3, 1, 1, 1)]
        return cls(layers=layers, reference_grid=None, **overrides)


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.config = cfg
        convs, cin = [], cfg.input_channels
        for i, l in enumerate(cfg.layers):
            if cfg.mode == "image" and i == len(cfg.layers) - 1:
                convs.append(nn.Conv2d(cin, l.channels, 1))
            else:
                convs.append(nn.Conv2d(cin, l.channels, l.kernel, l.stride, l.padding))
            cin = l.channels
        self.convs = nn.ModuleList(convs)
        self.act = nn.LeakyReLU(cfg.negative_slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 10, H, W) maps -> (B, 1, h, w) probabilities."""
        if x.shape[1] != self.config.input_channels:
            raise ValueError(f"discriminator expects {self.config.input_channels} channels, got {x.shape[1]}")
        for conv in self.convs[:-1]:
            x = self.act(conv(x))
        if self.config.mode == "image":
            x = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.convs[-1](x))


def build_discriminator(config: DiscriminatorConfig) -> Discriminator:
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return Discriminator(config)


def _as_batch(net: Discriminator, maps) -> torch.Tensor:
    if isinstance(maps, MaterialMaps):
        dtype = next(net.parameters()).dtype
        return torch.from_numpy(np.ascontiguousarray(maps.stack().transpose(2, 0, 1)))[None].to(dtype)
    return maps


def patch_scores(net: Discriminator, maps) -> torch.Tensor:
    """Per-patch probabilities, (B, 1, h, w). ``maps`` is a MaterialMaps or a stacked batch."""
    return net(_as_batch(net, maps))


def discriminate(net: Discriminator, maps) -> torch.Tensor:
    """Mean patch probability per sample, shape (B,)."""
    return patch_scores(net, maps).mean(dim=(1, 2, 3))
