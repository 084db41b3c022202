"""Reconstruction metrics, dataset evaluation and the ablation harness."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import LossWeights
from .materials import MapKind, MaterialMaps
from .models import DiscriminatorConfig, Generator, GeneratorConfig, generator_forward
from .render import DEFAULT_FLASH_INTENSITY, FIVE_FLASH_POSITIONS, LightSetup, render_flash

log = logging.getLogger(__name__)

MAP_COLUMNS = ("diffuse", "normal", "roughness", "specular")
TABLE_HEADERS = ("Diff.", "Nrm.", "Rgh.", "Spec.", "Rend.")


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2)))


def rmse_maps(pred: MaterialMaps, gt: MaterialMaps) -> dict[str, float]:
    """Per-kind RMSE over all pixels and channels, on stored [0, 1] values (normals encoded)."""
    if pred.resolution != gt.resolution:
        raise ValueError(f"resolution mismatch: {pred.resolution} vs {gt.resolution}")
    return {k.value: _rmse(pred[k], gt[k]) for k in MapKind}


def rmse_renderings(pred: MaterialMaps, gt: MaterialMaps, intensity: float = DEFAULT_FLASH_INTENSITY) -> float:
    """Tone-mapped RMSE averaged over the five fixed flash positions."""
    if pred.resolution != gt.resolution:
        raise ValueError(f"resolution mismatch: {pred.resolution} vs {gt.resolution}")
    errs = []
    for pos in FIVE_FLASH_POSITIONS.values():
        setup = LightSetup.flash(pos, intensity)
        errs.append(_rmse(render_flash(pred, setup).tone_mapped, render_flash(gt, setup).tone_mapped))
    return float(np.mean(errs))


def scalar_reduce(maps: MaterialMaps) -> tuple[float, np.ndarray]:
    """(mean roughness, per-channel mean specular) for scalar-parameter comparisons."""
    return float(maps.roughness.mean()), maps.specular.mean(axis=(0, 1))


@dataclass
class MetricsReport:
    maps: dict[str, float]
    rendering: float | None
    count: int
    label: str = ""
    skipped: int = 0

    @property
    def mean_map_rmse(self) -> float:
        return float(np.mean([self.maps[k] for k in MAP_COLUMNS]))

    def row(self) -> list[float | None]:
        return [self.maps[k] for k in MAP_COLUMNS] + [self.rendering]

    def to_dict(self) -> dict:
        return {"label": self.label, "count": self.count, "skipped": self.skipped, "maps": dict(self.maps),
                "rendering": self.rendering, "mean_map_rmse": self.mean_map_rmse}


def evaluate_dataset(predict, records, label: str = "") -> MetricsReport:
    """Average per-record metrics.

    Args:
        predict: a Generator, or any callable mapping a record to MaterialMaps.
        records: SvbrdfRecords with ground truth.
        label: stored on the report.

    Records whose prediction or rendering fails are skipped and counted; if
    every record fails the last error is raised.
    """
    records = list(records)
    if not records:
        raise ValueError("cannot evaluate an empty dataset")
    if isinstance(predict, Generator):
        net = predict
        predict = lambda r: generator_forward(net, r.input_image)  # noqa: E731
    per_map, rend, skipped, last_exc = [], [], 0, None
    for r in records:
        try:
            pred = predict(r)
            m = rmse_maps(pred, r.maps)
            e = rmse_renderings(pred, r.maps)
        except Exception as exc:
            log.warning("skipping record %s: %s", r.id, exc)
            skipped += 1
            last_exc = exc
            continue
        per_map.append(m)
        rend.append(e)
    if not per_map:
        raise RuntimeError(f"all {len(records)} records failed evaluation") from last_exc
    # sum in a fixed key order so the result does not depend on record order beyond float rounding
    maps = {k: float(np.mean(sorted(d[k] for d in per_map))) for k in MAP_COLUMNS}
    rendering = float(np.mean(sorted(rend))) if not skipped else None
    return MetricsReport(maps=maps, rendering=rendering, count=len(per_map), label=label, skipped=skipped)


def format_table(reports: list[MetricsReport]) -> str:
    """Aligned plain-text table with Diff./Nrm./Rgh./Spec./Rend. columns."""
    width = max([len("Config")] + [len(r.label) for r in reports])
    lines = ["  ".join([f"{'Config':<{width}}"] + [f"{h:>7}" for h in TABLE_HEADERS])]
    for r in reports:
        cells = [f"{v:7.4f}" if v is not None else f"{'n/a':>7}" for v in r.row()]
        lines.append("  ".join([f"{r.label:<{width}}"] + cells))
    return "\n".join(lines) + "\n"


def format_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", *MAP_COLUMNS, "rendering", "count"])
    for r in reports:
        w.writerow([r.label, *[f"{v:.6f}" if v is not None else "" for v in r.row()], r.count])
    return buf.getvalue()


@dataclass
class AblationRow:
    label: str
    generator: dict = field(default_factory=dict)
    discriminator: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    use_real: bool = False


@dataclass
class AblationPlan:
    rows: list[AblationRow]

    def __post_init__(self):
        self.rows = [r if isinstance(r, AblationRow) else AblationRow(**r) for r in self.rows]
        labels = [r.label for r in self.rows]
        dupes = sorted({l for l in labels if labels.count(l) > 1})
        if dupes:
            raise ValueError(f"ablation labels must be unique; repeated: {dupes}")
        if not self.rows:
            raise ValueError("ablation plan has no rows")

    @property
    def labels(self) -> list[str]:
        return [r.label for r in self.rows]

    @classmethod
    def from_file(cls, path) -> AblationPlan:
        import yaml

        data = yaml.safe_load(Path(path).read_text())
        rows = data["rows"] if isinstance(data, dict) else data
        return cls(rows)


NO_ADV = {"adversarial": False}
ARCHITECTURE_PLAN = AblationPlan([
    AblationRow("Base", generator={"skips": False, "decoder": "interpolate"}, weights=NO_ADV),
    AblationRow("+ Dec.", generator={"skips": False}, weights=NO_ADV),
    AblationRow("+ Skip", weights=NO_ADV),
    AblationRow("+ Image", discriminator={"mode": "image"}),
    AblationRow("+ Patch"),
])
LOSS_PLAN = AblationPlan([
    AblationRow("L1", weights={"msssim": False, "adversarial": False}),
    AblationRow("L_sup", weights=NO_ADV),
    AblationRow("L_unsup", weights={"l1": False, "msssim": False}),
    AblationRow("full (synth)"),
    AblationRow("full (synth+real)", use_real=True),
])
PLANS = {"architecture": ARCHITECTURE_PLAN, "loss": LOSS_PLAN}


def run_ablation(plan: AblationPlan, train_records, test_records, train_config, real_records=None,
                 generator_config: GeneratorConfig | None = None,
                 discriminator_config: DiscriminatorConfig | None = None, out_dir=None) -> list[MetricsReport]:
    """Train and evaluate every row with the same seeds and budget.

    A row that fails is logged and reported with NaN metrics; the remaining
    rows still run. With ``out_dir`` each row gets a subdirectory holding its
    checkpoint and report, and the table is written as text and CSV.
    """
    from .train import Trainer

    base_g = generator_config or GeneratorConfig.desk()
    base_d = discriminator_config or DiscriminatorConfig.desk()
    out_dir = Path(out_dir) if out_dir is not None else None
    reports = []
    for i, row in enumerate(plan.rows):
        row_dir = out_dir / f"{i:02d}_{_slug(row.label)}" if out_dir is not None else None
        try:
            g_cfg = _override(base_g, row.generator)
            d_cfg = _override(base_d, row.discriminator)
            t_cfg = copy.deepcopy(train_config)
            t_cfg.weights = LossWeights(**{**train_config.weights.to_dict(), **row.weights})
            if not row.use_real:
                t_cfg.real_stream_ratio = 0.0
            trainer = Trainer(t_cfg, train_records, real_records if row.use_real else None, g_cfg, d_cfg, row_dir)
            trainer.run()
            report = evaluate_dataset(trainer.state.generator, test_records, label=row.label)
        except Exception as exc:
            log.error("ablation row %r failed: %s", row.label, exc)
            nan = float("nan")
            report = MetricsReport({k: nan for k in MAP_COLUMNS}, nan, 0, row.label, skipped=len(test_records))
        if row_dir is not None:
            row_dir.mkdir(parents=True, exist_ok=True)
            (row_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        reports.append(report)
    if out_dir is not None:
        (out_dir / "ablation.txt").write_text(format_table(reports))
        (out_dir / "ablation.csv").write_text(format_csv(reports))
    return reports


def _override(cfg, overrides: dict):
    if not overrides:
        return copy.deepcopy(cfg)
    d = cfg.to_dict()
    unknown = sorted(set(overrides) - set(d))
    if unknown:
        raise ValueError(f"unknown {type(cfg).__name__} fields in ablation row: {unknown}")
    d.update(overrides)
    return type(cfg)(**d)


def _slug(label: str) -> str:
    s = "".join(c if c.isalnum() else "_" for c in label.lower()).strip("_")
    return "_".join(p for p in s.split("_") if p) or "row"
