"""Training objectives.

Supervised reconstruction: sum over map kinds of L1 + beta * (1 - MS-SSIM).
Adversarial: cross-entropy discriminator loss and the non-saturating
generator loss -log D(G(I)), both written as quantities to minimize.
Total generator objective: supervised + alpha * adversarial.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .materials import MapKind, MaterialMaps
from .msssim import ms_ssim

LOG_EPS = 1e-8


class LossConfigError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha: float = 0.2
    beta: float = 0.84
    l1: bool = True
    msssim: bool = True
    adversarial: bool = True

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise LossConfigError(f"alpha and beta must be non-negative, got {self.alpha}, {self.beta}")
        if not (self.l1 or self.msssim or self.adversarial):
            raise LossConfigError("at least one loss term must be enabled")

    @property
    def supervised(self) -> bool:
        return self.l1 or self.msssim

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    l1: dict[str, float] = field(default_factory=dict)
    msssim: dict[str, float] = field(default_factory=dict)
    sup: float | None = None
    adv_g: float | None = None
    adv_d_real: float | None = None
    adv_d_fake: float | None = None
    disc: float | None = None
    total: float | None = None

    def flat(self) -> dict[str, float]:
        out = {f"l1/{k}": v for k, v in self.l1.items()}
        out.update({f"msssim/{k}": v for k, v in self.msssim.items()})
        for name in ("sup", "adv_g", "adv_d_real", "adv_d_fake", "disc", "total"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out

    def lines(self, step: int) -> list[str]:
        """One "step term value" line per recorded term."""
        return [f"{step} {term} {value:.9g}" for term, value in self.flat().items()]

    def has_nan(self) -> bool:
        return any(not math.isfinite(v) for v in self.flat().values())


def _as_tensors(m) -> dict[str, torch.Tensor]:
    if isinstance(m, MaterialMaps):
        return {k.value: torch.from_numpy(np.ascontiguousarray(m[k].transpose(2, 0, 1)))[None] for k in MapKind}
    return m


def l1_map_loss(pred, gt) -> dict[str, torch.Tensor]:
    """Mean absolute difference per map kind (mean over batch, pixels and channels)."""
    pred, gt = _as_tensors(pred), _as_tensors(gt)
    out = {}
    for k in MapKind:
        p, g = pred[k.value], gt[k.value]
        if p.shape != g.shape:
            raise ValueError(f"{k.value}: prediction {tuple(p.shape)} and ground truth {tuple(g.shape)} differ")
        out[k.value] = (p - g).abs().mean()
    return out


def msssim_map_loss(pred, gt) -> dict[str, torch.Tensor]:
    """Batch-mean MS-SSIM per map kind."""
    pred, gt = _as_tensors(pred), _as_tensors(gt)
    return {k.value: ms_ssim(pred[k.value], gt[k.value]).mean() for k in MapKind}


def supervised_loss(pred, gt, weights: LossWeights) -> tuple[torch.Tensor, LossReport]:
    report = LossReport()
    total = 0.0
    if weights.l1:
        l1 = l1_map_loss(pred, gt)
        report.l1 = {k: v.item() for k, v in l1.items()}
        total = total + sum(l1.values())
    if weights.msssim:
        sim = msssim_map_loss(pred, gt)
        report.msssim = {k: v.item() for k, v in sim.items()}
        total = total + weights.beta * sum(1.0 - v for v in sim.values())
    total = torch.as_tensor(total) if not torch.is_tensor(total) else total
    report.sup = total.item()
    return total, report


def _prob(d) -> torch.Tensor:
    return d if torch.is_tensor(d) else torch.as_tensor(d, dtype=torch.float64)


def discriminator_loss(d_real, d_fake) -> torch.Tensor:
    """-[log D(real) + log(1 - D(fake))], averaged over the batch."""
    d_real, d_fake = _prob(d_real), _prob(d_fake)
    return -(torch.log(d_real + LOG_EPS) + torch.log(1.0 - d_fake + LOG_EPS)).mean()


def generator_adv_loss(d_fake) -> torch.Tensor:
    """-log D(G(I)), averaged over the batch."""
    d_fake = _prob(d_fake)
    return -torch.log(d_fake + LOG_EPS).mean()


def total_generator_loss(sup, adv_g, weights: LossWeights):
    sup = 0.0 if sup is None or not weights.supervised else sup
    if weights.adversarial and adv_g is not None:
        return sup + weights.alpha * adv_g
    return sup
