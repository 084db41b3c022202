"""Fully-convolutional multi-head SVBRDF generator.

Residual encoder at output stride 8, atrous spatial pyramid pooling, a decoder
of three upsampling stages that each re-inject a downsampled copy of the input
image, a shared feature trunk, and one small prediction head per map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..materials import MIN_NORMAL_Z, STACK_ORDER, MapKind, MaterialMaps


NORMAL_Z_LOGIT = 3.0


class ConfigError(ValueError):
    pass


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    g = groups
    while channels % g:
        g -= 1
    return nn.GroupNorm(g, channels)


@dataclass
class HeadSpec:
    kind: str
    channels: int
    activation: str = "sigmoid"


def _default_heads() -> list[HeadSpec]:
    return [HeadSpec(k.value, k.channels) for k in MapKind]


@dataclass
class GeneratorConfig:
    scale: str = "desk"
    block: str = "basic"  # "basic" or "bottleneck"
    stem_channels: int = 16
    stem_stride: int = 1
    encoder_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    encoder_block_counts: list[int] = field(default_factory=lambda: [2, 2, 2])
    encoder_strides: list[int] = field(default_factory=lambda: [2, 2, 2])
    encoder_dilations: list[int] = field(default_factory=lambda: [1, 1, 1])
    aspp_dilations: list[int] = field(default_factory=lambda: [1, 2, 4])
    trunk_channels: int = 64
    decoder: str = "learned"  # "learned" (transposed conv) or "interpolate"
    skips: bool = True
    head_hidden: int = 16
    heads: list[HeadSpec] = field(default_factory=_default_heads)
    norm_groups: int = 8
    size_multiple: int = 32
    input_resolution: int = 64
    seed: int = 0

    def __post_init__(self):
        self.heads = [h if isinstance(h, HeadSpec) else HeadSpec(**h) for h in self.heads]

    @property
    def downsampling(self) -> int:
        return self.stem_stride * int(np.prod(self.encoder_strides))

    def validate(self) -> None:
        n = len(self.encoder_channels)
        if not (len(self.encoder_block_counts) == len(self.encoder_strides) == len(self.encoder_dilations) == n) or n == 0:
            raise ConfigError("encoder_channels, encoder_block_counts, encoder_strides and encoder_dilations must have equal non-zero length")
        if any(d <= 0 for d in self.aspp_dilations) or not self.aspp_dilations:
            raise ConfigError(f"aspp_dilations must be positive and non-empty, got {self.aspp_dilations}")
        if any(d <= 0 for d in self.encoder_dilations):
            raise ConfigError("encoder_dilations must be positive")
        if self.trunk_channels <= 0:
            raise ConfigError("trunk_channels must be positive")
        if self.downsampling != 8:
            raise ConfigError(f"encoder must downsample by exactly 8 to match the three x2 decoder stages, got {self.downsampling}")
        if self.size_multiple % self.downsampling:
            raise ConfigError(f"size_multiple {self.size_multiple} must be a multiple of the encoder stride {self.downsampling}")
        if self.block not in ("basic", "bottleneck"):
            raise ConfigError(f"unknown block type {self.block!r}")
        if self.decoder not in ("learned", "interpolate"):
            raise ConfigError(f"unknown decoder {self.decoder!r}")
        if not self.heads:
            raise ConfigError("at least one prediction head is required")
        kinds = [h.kind for h in self.heads]
        if sorted(kinds) != sorted(k.value for k in MapKind):
            raise ConfigError(f"need exactly one head per map kind, got {kinds}")
        for h in self.heads:
            if h.channels != MapKind(h.kind).channels:
                raise ConfigError(f"head {h.kind} must have {MapKind(h.kind).channels} channels")
            if h.activation not in ("sigmoid", "hardsigmoid"):
                raise ConfigError(f"unsupported head activation {h.activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def paper(cls, **overrides) -> GeneratorConfig:
        """ResNet-101-style bottleneck encoder (output stride 8) and a 256-map trunk."""
        base = dict(
            scale="paper",
            block="bottleneck",
            stem_channels=64,
            stem_stride=4,
            encoder_channels=[256, 512, 1024, 2048],
            encoder_block_counts=[3, 4, 23, 3],
            encoder_strides=[1, 2, 1, 1],
            encoder_dilations=[1, 1, 2, 4],
            aspp_dilations=[6, 12, 18],
            trunk_channels=256,
            head_hidden=64,
            norm_groups=32,
            input_resolution=256,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> GeneratorConfig:
        return cls(**overrides)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, dilation=1, groups=8):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, padding=dilation, dilation=dilation, bias=False)
        self.n1 = _norm(cout, groups)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, padding=dilation, dilation=dilation, bias=False)
        self.n2 = _norm(cout, groups)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout, groups))

    def forward(self, x):
        out = F.relu(self.n1(self.conv1(x)))
        out = self.n2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class Bottleneck(nn.Module):
    def __init__(self, cin, cout, stride=1, dilation=1, groups=32):
        super().__init__()
        width = cout // 4
        self.conv1 = nn.Conv2d(cin, width, 1, bias=False)
        self.n1 = _norm(width, groups)
        self.conv2 = nn.Conv2d(width, width, 3, stride, padding=dilation, dilation=dilation, bias=False)
        self.n2 = _norm(width, groups)
        self.conv3 = nn.Conv2d(width, cout, 1, bias=False)
        self.n3 = _norm(cout, groups)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout, groups))

    def forward(self, x):
        out = F.relu(self.n1(self.conv1(x)))
        out = F.relu(self.n2(self.conv2(out)))
        out = self.n3(self.conv3(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class Encoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        g = cfg.norm_groups
        if cfg.stem_stride == 1:
            self.stem = nn.Sequential(nn.Conv2d(3, cfg.stem_channels, 3, 1, 1, bias=False), _norm(cfg.stem_channels, g), nn.ReLU())
        elif cfg.stem_stride == 4:
            self.stem = nn.Sequential(
                nn.Conv2d(3, cfg.stem_channels, 7, 2, 3, bias=False), _norm(cfg.stem_channels, g), nn.ReLU(),
                nn.MaxPool2d(3, 2, 1),
            )
        else:
            raise ConfigError(f"stem_stride must be 1 or 4, got {cfg.stem_stride}")
        block = BasicBlock if cfg.block == "basic" else Bottleneck
        stages, cin = [], cfg.stem_channels
        for cout, count, stride, dil in zip(cfg.encoder_channels, cfg.encoder_block_counts, cfg.encoder_strides, cfg.encoder_dilations):
            blocks = [block(cin, cout, stride, dil, g)] + [block(cout, cout, 1, dil, g) for _ in range(count - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.out_channels = cin

    def forward(self, x):
        return self.stages(self.stem(x))


class ASPP(nn.Module):
    """Parallel dilated 3x3 branches plus an image-pooling branch, concatenated and projected."""

    def __init__(self, cin, cout, dilations, groups=8):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(nn.Conv2d(cin, cout, 3, padding=d, dilation=d, bias=False), _norm(cout, groups), nn.ReLU())
            for d in dilations
        )
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1, bias=False), _norm(cout, groups), nn.ReLU())
        self.project = nn.Sequential(
            nn.Conv2d(cout * (len(dilations) + 1), cout, 1, bias=False), _norm(cout, groups), nn.ReLU()
        )

    def forward(self, x):
        feats = [b(x) for b in self.branches]
        feats.append(self.pool(x).expand(-1, -1, *x.shape[-2:]))
        return self.project(torch.cat(feats, dim=1))


def aspp_forward(features: torch.Tensor, dilations, out_channels: int | None = None, seed: int = 0) -> torch.Tensor:
    """Apply a freshly initialized ASPP block (seeded) to ``features``."""
    cout = out_channels or features.shape[1]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = ASPP(features.shape[1], cout, list(dilations)).to(features.dtype)
    return module(features)


def downsample_input(image: torch.Tensor, factor: int) -> torch.Tensor:
    """Area-average downsampling of a (B, C, H, W) batch by 1, 2 or 4."""
    if factor not in (1, 2, 4):
        raise ValueError(f"factor must be 1, 2 or 4, got {factor}")
    if image.shape[-1] % factor or image.shape[-2] % factor:
        raise ValueError(f"spatial size {tuple(image.shape[-2:])} not divisible by {factor}")
    return image if factor == 1 else F.avg_pool2d(image, factor)


class UpStage(nn.Module):
    """Transposed-conv x2 upsampling, optional image skip (concat + 1x1), residual refinement."""

    def __init__(self, cin, cout, skip: bool, learned: bool, groups=8):
        super().__init__()
        self.learned = learned
        if learned:
            self.up = nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False), _norm(cout, groups), nn.ReLU())
        self.skip = skip
        if skip:
            self.fuse = nn.Sequential(nn.Conv2d(cout + 3, cout, 1, bias=False), _norm(cout, groups), nn.ReLU())
        self.refine = BasicBlock(cout, cout, groups=groups)

    def forward(self, x, image_copy):
        if self.learned:
            x = self.up(x)
        if self.skip:
            x = self.fuse(torch.cat([x, image_copy], dim=1))
        return self.refine(x)


class Head(nn.Module):
    def __init__(self, spec: HeadSpec, cin: int, hidden: int):
        super().__init__()
        self.spec = spec
        self.body = nn.Sequential(
            nn.Conv2d(cin, hidden, 3, padding=1), nn.ReLU(), nn.Conv2d(hidden, spec.channels, 1)
        )
        if spec.kind == MapKind.NORMAL.value:
            # start near flat normals (decoded z ~ 0.9) instead of on the z clamp
            with torch.no_grad():
                self.body[2].bias[2] += NORMAL_Z_LOGIT

    def forward(self, x):
        logits = self.body(x)
        out = torch.sigmoid(logits) if self.spec.activation == "sigmoid" else F.hardsigmoid(logits)
        if self.spec.kind == MapKind.NORMAL.value:
            out = renormalize_encoded_normals(out)
        return out


def renormalize_encoded_normals(enc: torch.Tensor) -> torch.Tensor:
    """Decode (channel axis 1), clamp z, renormalize, re-encode. Differentiable."""
    n = enc * 2.0 - 1.0
    n = torch.cat([n[:, :2], n[:, 2:3].clamp(min=MIN_NORMAL_Z)], dim=1)
    n = n / n.norm(dim=1, keepdim=True)
    return (n + 1.0) / 2.0


class Generator(nn.Module):
    """Maps a (B, 3, H, W) image batch to a dict of per-kind (B, C, H, W) maps in [0, 1]."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.config = cfg
        g = cfg.norm_groups
        self.encoder = Encoder(cfg)
        self.aspp = ASPP(self.encoder.out_channels, cfg.trunk_channels, cfg.aspp_dilations, g)
        learned = cfg.decoder == "learned"
        if learned:
            self.stages = nn.ModuleList(UpStage(cfg.trunk_channels, cfg.trunk_channels, cfg.skips, True, g) for _ in range(3))
        else:
            self.stages = nn.ModuleList([UpStage(cfg.trunk_channels, cfg.trunk_channels, cfg.skips, False, g)])
        self.heads = nn.ModuleDict({h.kind: Head(h, cfg.trunk_channels, cfg.head_hidden) for h in cfg.heads})

    def trunk(self, image: torch.Tensor) -> torch.Tensor:
        """Shared feature maps at input resolution, (B, trunk_channels, H, W)."""
        x = self.aspp(self.encoder(image))
        if self.config.decoder == "learned":
            for stage, factor in zip(self.stages, (4, 2, 1)):
                x = stage(x, downsample_input(image, factor) if self.config.skips else None)
        else:
            x = F.interpolate(x, size=image.shape[-2:], mode="bilinear", align_corners=False)
            x = self.stages[0](x, image if self.config.skips else None)
        return x

    def forward(self, image: torch.Tensor) -> dict[str, torch.Tensor]:
        feats = self.trunk(image)
        return {kind: head(feats) for kind, head in self.heads.items()}

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_generator(config: GeneratorConfig) -> Generator:
    """Construct a generator with parameters drawn from ``config.seed``."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return Generator(config)


def check_input_size(net: Generator, h: int, w: int) -> None:
    m = net.config.size_multiple
    if h % m or w % m:
        raise ValueError(f"input is {h}x{w}; height and width must be multiples of {m} (encoder stride constraint)")


def stack_outputs(out: dict[str, torch.Tensor]) -> torch.Tensor:
    """Concatenate generator outputs along channels in discriminator order."""
    return torch.cat([out[k.value] for k in STACK_ORDER], dim=1)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(image, dtype=np.float32).transpose(2, 0, 1)))[None]


def outputs_to_maps(out: dict[str, torch.Tensor], index: int = 0) -> MaterialMaps:
    arrs = {k: v[index].detach().cpu().double().numpy().transpose(1, 2, 0) for k, v in out.items()}
    return MaterialMaps(**{k: np.clip(a, 0.0, 1.0) for k, a in arrs.items()})


@torch.no_grad()
def generator_forward(net: Generator, image: np.ndarray) -> MaterialMaps:
    """Estimate maps for one H x W x 3 image with values in [0, 1].

    Raises:
        ValueError: if H or W is not a multiple of ``net.config.size_multiple``.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    check_input_size(net, *image.shape[:2])
    was_training = net.training
    net.eval()
    try:
        dtype = next(net.parameters()).dtype
        out = net(image_to_tensor(image).to(dtype))
    finally:
        net.train(was_training)
    return outputs_to_maps(out)
