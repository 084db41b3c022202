"""YAML run configuration with dotted-key overrides and schema checks.

A config file has the sections ``generator``, ``discriminator``, ``train``
(with a nested ``weights`` mapping) and ``data``. Every field is optional;
missing ones take desk-scale defaults.
"""

from __future__ import annotations

import copy
import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .losses import LossWeights
from .models import DiscriminatorConfig, GeneratorConfig
from .train import TrainConfig

DATA_DIR_ENV = "SURFACENET_DATA_DIR"


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads "1e-4" (no dot) as a float."""


_Loader.add_implicit_resolver("tag:yaml.org,2002:float", re.compile(r"^[-+]?\d+(\.\d*)?[eE][-+]?\d+$"),
                              list("-+0123456789"))


class ConfigSchemaError(ValueError):
    pass


@dataclass
class DataConfig:
    synthetic: str | None = None  # dataset directory with a manifest
    real: str | None = None  # <root>/<category>/<image> tree
    subset: str | None = "train"  # manifest split to train on; None uses every record


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig.desk)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {
            "generator": self.generator.to_dict(),
            "discriminator": self.discriminator.to_dict(),
            "train": self.train.to_dict(),
            "data": dataclasses.asdict(self.data),
        }


_SECTIONS = {"generator": GeneratorConfig, "discriminator": DiscriminatorConfig, "train": TrainConfig,
             "data": DataConfig}


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section: str, values: dict, cls) -> None:
    if not isinstance(values, dict):
        raise ConfigSchemaError(f"section {section!r} must be a mapping, got {type(values).__name__}")
    unknown = sorted(set(values) - _field_names(cls))
    if unknown:
        raise ConfigSchemaError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def parse_override(item: str) -> tuple[list[str], object]:
    """``train.learning_rate=1e-4`` -> (["train", "learning_rate"], 1e-4); values are parsed as YAML."""
    if "=" not in item:
        raise ConfigSchemaError(f"override {item!r} is not of the form key.path=value")
    key, raw = item.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if len(path) < 2:
        raise ConfigSchemaError(f"override key {key!r} needs a section, e.g. train.{key}")
    try:
        value = yaml.load(raw, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigSchemaError(f"cannot parse value of override {item!r}: {exc}") from exc
    return path, value


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides or []:
        path, value = parse_override(item)
        node = raw
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigSchemaError(f"override {item!r} descends into non-mapping key {p!r}")
        node[path[-1]] = value
    return raw


def build_run_config(raw: dict | None) -> RunConfig:
    """Validate a raw mapping against the schema and build the typed config.

    Raises:
        ConfigSchemaError: unknown sections or keys, wrong types or invalid values.
    """
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigSchemaError("config root must be a mapping")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigSchemaError(f"unknown config section(s): {', '.join(unknown)}")
    try:
        g_raw = raw.get("generator", {})
        _check_keys("generator", g_raw, GeneratorConfig)
        scale = g_raw.get("scale", "desk")
        if scale not in ("desk", "paper"):
            raise ConfigSchemaError(f"generator.scale must be desk or paper, got {scale!r}")
        gen = getattr(GeneratorConfig, scale)(**{k: v for k, v in g_raw.items() if k != "scale"})
        gen.validate()

        d_raw = raw.get("discriminator", {})
        _check_keys("discriminator", d_raw, DiscriminatorConfig)
        d_factory = DiscriminatorConfig.paper if scale == "paper" and "layers" not in d_raw else DiscriminatorConfig
        disc = d_factory(**d_raw)
        disc.validate()

        t_raw = raw.get("train", {})
        _check_keys("train", t_raw, TrainConfig)
        t_raw = dict(t_raw)
        if "weights" in t_raw:
            _check_keys("train.weights", t_raw["weights"], LossWeights)
        tr = (TrainConfig.paper if scale == "paper" else TrainConfig.desk)(**t_raw)
        tr.validate()

        data_raw = raw.get("data", {})
        _check_keys("data", data_raw, DataConfig)
        data = DataConfig(**data_raw)
    except ConfigSchemaError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigSchemaError(str(exc)) from exc
    return RunConfig(gen, disc, tr, data)


def load_run_config(path=None, overrides=None) -> RunConfig:
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigSchemaError(f"config file {path} does not exist")
        try:
            raw = yaml.load(path.read_text(), Loader=_Loader) or {}
        except yaml.YAMLError as exc:
            raise ConfigSchemaError(f"cannot parse {path}: {exc}") from exc
    return build_run_config(apply_overrides(raw, overrides))


def default_data_dir() -> Path | None:
    v = os.environ.get(DATA_DIR_ENV)
    return Path(v) if v else None


def dump_run_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(_plain(cfg.to_dict()), sort_keys=False)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
