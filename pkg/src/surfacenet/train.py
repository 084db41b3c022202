"""Dual-stream adversarial training.

Synthetic steps: one discriminator update (ground-truth maps as real,
predicted maps as fake), then one generator update on the supervised loss
plus alpha times the adversarial loss. Real steps use unannotated photographs:
the discriminator sees ground-truth synthetic maps from a reservoir as real
and predictions for the photographs as fake; the generator is updated by the
adversarial term alone.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, check_state_compatible, load_archive, save_archive
from .dataset import RealImageRecord, SvbrdfRecord
from .losses import (LossReport, LossWeights, discriminator_loss, generator_adv_loss, supervised_loss,
                     total_generator_loss)
from .materials import MapKind
from .models import (Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, build_discriminator,
                     build_generator, discriminate)
from .models.generator import stack_outputs

log = logging.getLogger(__name__)

SYNTHETIC, REAL = "synthetic", "real"
LOG_NAME = "train_log.jsonl"
CHECKPOINT_DIR = "checkpoints"
_STREAM_IDS = {SYNTHETIC: 0, REAL: 1, "reservoir": 2}


class TrainingDiverged(RuntimeError):
    """A loss became NaN or infinite; ``dump_path`` holds the offending batch description."""

    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    learning_rate: float = 4e-5
    batch_size: int = 4
    max_iterations: int = 2000
    # None picks 0.5 when real images are supplied and 0 otherwise
    real_stream_ratio: float | None = None
    seed: int = 0
    checkpoint_interval: int = 0  # 0 keeps only the final checkpoint
    weights: LossWeights = field(default_factory=LossWeights)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    schedule: str = "d_then_g"  # one D step then one G step per batch
    hygiene_checks: bool = False  # hash the idle network around every update

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.adam_betas = tuple(self.adam_betas)

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_iterations < 0:
            raise ValueError(f"max_iterations must be >= 0, got {self.max_iterations}")
        if self.real_stream_ratio is not None and not 0.0 <= self.real_stream_ratio <= 1.0:
            raise ValueError(f"real_stream_ratio must be in [0, 1], got {self.real_stream_ratio}")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint_interval must be >= 0")
        if self.schedule != "d_then_g":
            raise ValueError(f"unknown update schedule {self.schedule!r}")
        self.weights.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def paper(cls, **overrides) -> TrainConfig:
        base = dict(learning_rate=4e-5, batch_size=6, max_iterations=250_000)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> TrainConfig:
        # small nets and few steps: a larger step size than the reference 4e-5
        base = dict(learning_rate=2e-4, batch_size=4, max_iterations=2000)
        base.update(overrides)
        return cls(**base)


def stream_schedule(iterations: int, ratio: float, seed: int) -> np.ndarray:
    """Boolean array, True where the step consumes a real batch.

    Exactly round(ratio * iterations) steps are real, placed by a seeded
    permutation so the mix is spread over the run.
    """
    n_real = int(round(ratio * iterations))
    is_real = np.zeros(iterations, dtype=bool)
    if n_real:
        order = np.random.default_rng([seed, 7]).permutation(iterations)
        is_real[order[:n_real]] = True
    return is_real


def batch_indices(n: int, batch_size: int, k: int, seed: int, stream: str) -> np.ndarray:
    """Indices of the k-th batch drawn from n items, epoch-wise shuffled.

    A pure function of its arguments, which is what makes resumed runs match
    uninterrupted ones.
    """
    start = k * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n)
        perm = np.random.default_rng([seed, _STREAM_IDS[stream], epoch]).permutation(n)
        out.extend(perm[offset:offset + batch_size - len(out)].tolist())
    return np.asarray(out)


def _param_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha1()
    for p in module.parameters():
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _images(records) -> torch.Tensor:
    return torch.from_numpy(np.stack([r.input_image.transpose(2, 0, 1) for r in records]).astype(np.float32))


def _gt(records) -> dict[str, torch.Tensor]:
    return {
        k.value: torch.from_numpy(np.stack([r.maps[k].transpose(2, 0, 1) for r in records]).astype(np.float32))
        for k in MapKind
    }


@dataclass
class TrainState:
    iteration: int
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    running: dict[str, float] = field(default_factory=dict)

    def update_running(self, report: LossReport, decay: float = 0.98) -> None:
        for k, v in report.flat().items():
            prev = self.running.get(k)
            self.running[k] = v if prev is None else decay * prev + (1 - decay) * v


class Trainer:
    """Owns both networks, their optimizers and the two data streams."""

    def __init__(self, config: TrainConfig, synthetic: list[SvbrdfRecord], real: list[RealImageRecord] | None = None,
                 generator_config: GeneratorConfig | None = None,
                 discriminator_config: DiscriminatorConfig | None = None, out_dir=None):
        config.validate()
        if not synthetic:
            raise ValueError("synthetic dataset is empty")
        self.config = config
        self.gen_config = generator_config or GeneratorConfig.desk()
        self.disc_config = discriminator_config or DiscriminatorConfig.desk()
        self.out_dir = Path(out_dir) if out_dir is not None else None

        self.synthetic = list(synthetic)
        self.real = list(real or [])
        ratio = config.real_stream_ratio
        if ratio is None:
            ratio = 0.5 if self.real else 0.0
        if ratio > 0 and not self.real:
            log.info("no real images supplied; real_stream_ratio forced to 0")
            ratio = 0.0
        if ratio > 0 and not config.weights.adversarial:
            log.info("adversarial term disabled; real stream has nothing to train, real_stream_ratio forced to 0")
            ratio = 0.0
        self.real_stream_ratio = ratio

        h, w = self.synthetic[0].maps.resolution
        check_input_size_for(self.gen_config, h, w)
        for r in self.real:
            if r.image.shape[:2] != (h, w):
                raise ValueError(f"real image {r.id} is {r.image.shape[:2]}, training resolution is {(h, w)}")

        self.images = _images(self.synthetic)
        self.gt = _gt(self.synthetic)
        self.gt_stack = stack_outputs(self.gt)  # also the reservoir of real-class examples for D
        self.real_images = _images(self.real) if self.real else None

        torch.manual_seed(config.seed)
        g = build_generator(self.gen_config)
        d = build_discriminator(self.disc_config)
        adam = dict(lr=config.learning_rate, betas=config.adam_betas, eps=config.adam_eps)
        self.state = TrainState(0, g, d, torch.optim.Adam(g.parameters(), **adam),
                                torch.optim.Adam(d.parameters(), **adam))
        self.schedule = stream_schedule(config.max_iterations, ratio, config.seed)

    # data

    def stream_at(self, iteration: int) -> str:
        return REAL if self.schedule[iteration] else SYNTHETIC

    def _stream_count(self, iteration: int, stream: str) -> int:
        # how many steps of this stream precede ``iteration``
        n_real = int(self.schedule[:iteration].sum())
        return n_real if stream == REAL else iteration - n_real

    def synthetic_batch(self, k: int) -> np.ndarray:
        return batch_indices(len(self.synthetic), self.config.batch_size, k, self.config.seed, SYNTHETIC)

    def real_batch(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        c = self.config
        return (batch_indices(len(self.real), c.batch_size, k, c.seed, REAL),
                batch_indices(len(self.synthetic), c.batch_size, k, c.seed, "reservoir"))

    # updates

    def _d_update(self, real_maps: torch.Tensor, fake_maps: torch.Tensor, report: LossReport) -> None:
        s = self.state
        g_digest = _param_digest(s.generator) if self.config.hygiene_checks else None
        s.opt_d.zero_grad(set_to_none=True)
        d_real = discriminate(s.discriminator, real_maps)
        d_fake = discriminate(s.discriminator, fake_maps.detach())
        loss = discriminator_loss(d_real, d_fake)
        report.adv_d_real = d_real.mean().item()
        report.adv_d_fake = d_fake.mean().item()
        report.disc = loss.item()
        self._check_finite(report, "discriminator")
        loss.backward()
        s.opt_d.step()
        if g_digest is not None and _param_digest(s.generator) != g_digest:
            raise AssertionError("discriminator update changed generator parameters")

    def _g_update(self, loss: torch.Tensor, report: LossReport) -> None:
        s = self.state
        d_digest = _param_digest(s.discriminator) if self.config.hygiene_checks else None
        report.total = float(loss.item() if torch.is_tensor(loss) else loss)
        self._check_finite(report, "generator")
        s.opt_g.zero_grad(set_to_none=True)
        loss.backward()
        s.opt_g.step()
        s.opt_d.zero_grad(set_to_none=True)  # drop gradients the G loss left on D
        if d_digest is not None and _param_digest(s.discriminator) != d_digest:
            raise AssertionError("generator update changed discriminator parameters")

    def _check_finite(self, report: LossReport, where: str) -> None:
        if not report.has_nan():
            return
        self._batch_info["where"] = where
        self._batch_info["losses"] = {k: repr(v) for k, v in report.flat().items()}
        dump = None
        if self.out_dir is not None:
            dump = self.out_dir / f"nan_dump_{self.state.iteration:07d}.json"
            dump.parent.mkdir(parents=True, exist_ok=True)
            dump.write_text(json.dumps(self._batch_info, indent=2) + "\n")
        raise TrainingDiverged(f"non-finite loss in {where} update at iteration {self.state.iteration}, "
                               f"batch ids {self._batch_info['ids']}" + (f"; dump written to {dump}" if dump else ""),
                               dump)

    def train_step_synthetic(self, idx) -> LossReport:
        s, w = self.state, self.config.weights
        idx = np.asarray(idx)
        self._batch_info = {"iteration": s.iteration, "stream": SYNTHETIC, "ids": [self.synthetic[i].id for i in idx]}
        images = self.images[idx]
        gt = {k: v[idx] for k, v in self.gt.items()}
        report = LossReport()
        out = s.generator(images)
        fake = stack_outputs(out)
        if w.adversarial:
            self._d_update(self.gt_stack[idx], fake, report)
        sup = None
        if w.supervised:
            sup, sup_report = supervised_loss(out, gt, w)
            report.l1, report.msssim, report.sup = sup_report.l1, sup_report.msssim, sup_report.sup
        adv = None
        if w.adversarial:
            adv = generator_adv_loss(discriminate(s.discriminator, fake))
            report.adv_g = adv.item()
        self._g_update(total_generator_loss(sup, adv, w), report)
        s.iteration += 1
        s.update_running(report)
        return report

    def real_generator_loss(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Generator objective on unannotated images: alpha * -log D(G(I)), nothing else.

        Returns (loss, unweighted adversarial term).
        """
        s = self.state
        fake = stack_outputs(s.generator(images))
        adv = generator_adv_loss(discriminate(s.discriminator, fake))
        return total_generator_loss(None, adv, self.config.weights), adv

    def train_step_real(self, idx, reservoir_idx) -> LossReport:
        s = self.state
        if len(self.gt_stack) == 0:
            raise ValueError("ground-truth reservoir is empty")
        idx, reservoir_idx = np.asarray(idx), np.asarray(reservoir_idx)
        self._batch_info = {"iteration": s.iteration, "stream": REAL, "ids": [self.real[i].id for i in idx]}
        images = self.real_images[idx]
        report = LossReport()
        fake = stack_outputs(s.generator(images))
        self._d_update(self.gt_stack[reservoir_idx], fake, report)
        loss, adv = self.real_generator_loss(images)
        report.adv_g = adv.item()
        self._g_update(loss, report)
        s.iteration += 1
        s.update_running(report)
        return report

    def step(self) -> tuple[str, LossReport]:
        """Run the step scheduled for the current iteration."""
        it = self.state.iteration
        if it >= len(self.schedule):
            raise RuntimeError(f"iteration {it} is past max_iterations={self.config.max_iterations}")
        stream = self.stream_at(it)
        k = self._stream_count(it, stream)
        if stream == REAL:
            return stream, self.train_step_real(*self.real_batch(k))
        return stream, self.train_step_synthetic(self.synthetic_batch(k))

    # persistence

    def save_checkpoint(self, path) -> Path:
        s = self.state
        return save_archive(path, {
            "iteration": s.iteration,
            "generator/config": self.gen_config.to_dict(),
            "generator/state": s.generator.state_dict(),
            "discriminator/config": self.disc_config.to_dict(),
            "discriminator/state": s.discriminator.state_dict(),
            "optim/generator": s.opt_g.state_dict(),
            "optim/discriminator": s.opt_d.state_dict(),
            "rng/torch": torch.get_rng_state(),
            "train/config": _plain(self.config.to_dict()),
            "train/running": dict(s.running),
        })

    def load_checkpoint(self, path) -> None:
        """Restore everything; on error the current state is left untouched."""
        data = load_archive(path)
        s = self.state
        for ns, net in (("generator", s.generator), ("discriminator", s.discriminator)):
            if f"{ns}/state" not in data:
                raise CheckpointError(f"{path}: no {ns} namespace")
            check_state_compatible(net, data[f"{ns}/state"], ns)
        s.generator.load_state_dict(data["generator/state"])
        s.discriminator.load_state_dict(data["discriminator/state"])
        s.opt_g.load_state_dict(data["optim/generator"])
        s.opt_d.load_state_dict(data["optim/discriminator"])
        torch.set_rng_state(data["rng/torch"])
        s.iteration = int(data["iteration"])
        s.running = dict(data.get("train/running", {}))

    def checkpoint_path(self, iteration: int) -> Path:
        return self.out_dir / CHECKPOINT_DIR / f"step_{iteration:07d}.pt"

    def run(self, resume: bool = False, on_step=None) -> list[dict]:
        """Train until ``max_iterations``; returns the per-step log records."""
        c = self.config
        log_path = self.out_dir / LOG_NAME if self.out_dir is not None else None
        history: list[dict] = []
        if resume:
            latest = latest_checkpoint(self.out_dir) if self.out_dir is not None else None
            if latest is None:
                log.info("no checkpoint to resume from; starting fresh")
            else:
                self.load_checkpoint(latest)
                log.info("resumed from %s at iteration %d", latest, self.state.iteration)
        if log_path is not None:
            log_path.parent.mkdir(parents=True, exist_ok=True)
            history = _read_log(log_path, self.state.iteration) if resume else []
            log_path.write_text("".join(json.dumps(r) + "\n" for r in history))
        fh = open(log_path, "a") if log_path is not None else None
        try:
            while self.state.iteration < c.max_iterations:
                stream, report = self.step()
                record = {"iteration": self.state.iteration, "stream": stream, **report.flat()}
                history.append(record)
                if fh is not None:
                    fh.write(json.dumps(record) + "\n")
                    fh.flush()
                if on_step is not None:
                    on_step(self, record)
                it = self.state.iteration
                if self.out_dir is not None and c.checkpoint_interval and it % c.checkpoint_interval == 0:
                    self.save_checkpoint(self.checkpoint_path(it))
        finally:
            if fh is not None:
                fh.close()
        if self.out_dir is not None:
            self.save_checkpoint(self.checkpoint_path(self.state.iteration))
        return history


def check_input_size_for(config: GeneratorConfig, h: int, w: int) -> None:
    m = config.size_multiple
    if h % m or w % m:
        raise ValueError(f"training resolution {h}x{w} is not a multiple of {m} (encoder stride constraint)")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _read_log(path: Path, upto: int) -> list[dict]:
    if not path.is_file():
        return []
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            if rec["iteration"] <= upto:
                out.append(rec)
    return out


def latest_checkpoint(out_dir) -> Path | None:
    ckpts = sorted((Path(out_dir) / CHECKPOINT_DIR).glob("step_*.pt"))
    return ckpts[-1] if ckpts else None


def train(config: TrainConfig, synthetic, real=None, generator_config=None, discriminator_config=None, out_dir=None,
          resume: bool = False) -> tuple[Trainer, list[dict]]:
    trainer = Trainer(config, synthetic, real, generator_config, discriminator_config, out_dir)
    history = trainer.run(resume=resume)
    return trainer, history


def load_generator(path) -> Generator:
    """Rebuild a generator from any archive that has a generator namespace."""
    data = load_archive(path)
    if "generator/config" not in data:
        raise CheckpointError(f"{path}: no generator namespace")
    net = build_generator(GeneratorConfig(**data["generator/config"]))
    check_state_compatible(net, data["generator/state"], "generator")
    net.load_state_dict(data["generator/state"])
    net.eval()
    return net


def smoothed(values, window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")

