"""Strip-format SVBRDF files, dataset manifests, real photographs and splits.

A strip is one 8-bit RGB image of width 5 x height holding the flash render and
the four maps side by side. The tile order and per-tile gamma are recorded in
the dataset manifest so files from other layouts can be read back.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .materials import MapKind, MaterialMaps, validate_maps
from .render import GAMMA, LightSetup, RenderedImage, render_flash

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
DEFAULT_TILE_ORDER = ("render", "normal", "diffuse", "roughness", "specular")
# File value = linear ** (1 / gamma). Diffuse stays linear by default: with a
# 2.2 curve, 8-bit codes near white are ~1.1/255 apart in linear units.
DEFAULT_GAMMA = {"render": GAMMA, "normal": 1.0, "diffuse": 1.0, "roughness": 1.0, "specular": 1.0}
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SvbrdfRecord:
    render: RenderedImage
    maps: MaterialMaps
    id: str
    category: str = "synthetic"

    def __post_init__(self):
        if self.render.pixels.shape[:2] != self.maps.resolution:
            raise ValueError(f"render {self.render.pixels.shape[:2]} and maps {self.maps.resolution} differ in resolution")

    @property
    def input_image(self) -> np.ndarray:
        """Network input: linear radiance clamped to [0, 1]."""
        return np.clip(self.render.pixels, 0.0, 1.0)


@dataclass(frozen=True)
class RealImageRecord:
    image: np.ndarray  # linear RGB in [0, 1]
    category: str
    id: str

    @property
    def input_image(self) -> np.ndarray:
        return self.image


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    test: tuple[str, ...]
    seed: int


def make_training_record(maps: MaterialMaps, light_sampler_seed: int = 0, id: str = "record", category: str = "synthetic",
                         intensity: float | None = None) -> SvbrdfRecord:
    """Render ``maps`` under the centred flash.

    ``light_sampler_seed`` is accepted for future light jitter; the flash is
    always centred for now.
    """
    report = validate_maps(maps)
    if not report:
        raise ValueError(f"invalid maps: {report}")
    setup = LightSetup.flash() if intensity is None else LightSetup.flash(intensity=intensity)
    return SvbrdfRecord(render=render_flash(maps, setup), maps=maps, id=id, category=category)


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def _tile_array(record: SvbrdfRecord, name: str, gamma: float) -> np.ndarray:
    if name == "render":
        linear = record.render.pixels
    else:
        linear = record.maps[MapKind(name)]
        if linear.shape[-1] == 1:
            linear = np.repeat(linear, 3, axis=-1)
    return np.clip(linear, 0.0, 1.0) ** (1.0 / gamma)


def quantize_maps(maps: MaterialMaps, gamma=None) -> MaterialMaps:
    """Snap maps onto the 8-bit grid of the strip format.

    Rendering the snapped maps gives exactly the render that loading the
    strip back and re-rendering gives.
    """
    gamma = {**DEFAULT_GAMMA, **(gamma or {})}
    return MaterialMaps(**{
        k.value: (_quantize(np.clip(maps[k], 0.0, 1.0) ** (1.0 / gamma[k.value])) / 255.0) ** gamma[k.value]
        for k in MapKind
    })


def save_strip(record: SvbrdfRecord, path, tile_order=DEFAULT_TILE_ORDER, gamma=None) -> None:
    gamma = {**DEFAULT_GAMMA, **(gamma or {})}
    tiles = [_tile_array(record, name, gamma[name]) for name in tile_order]
    Image.fromarray(_quantize(np.concatenate(tiles, axis=1))).save(path)


def gray_channel(rgb: np.ndarray) -> np.ndarray:
    """Collapse a replicated single-channel tile; channels that disagree are averaged."""
    if np.all(rgb == rgb[..., :1]):
        return rgb[..., :1].copy()
    return rgb.mean(axis=-1, keepdims=True)


def load_strip(path, tile_order=DEFAULT_TILE_ORDER, gamma=None, category: str = "synthetic") -> SvbrdfRecord:
    """Read a strip written by :func:`save_strip` (or any same-layout file).

    Raises:
        DatasetFormatError: if the width is not five times the height.
    """
    gamma = {**DEFAULT_GAMMA, **(gamma or {})}
    path = Path(path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    h, w = arr.shape[:2]
    n = len(tile_order)
    if w != n * h:
        raise DatasetFormatError(f"{path}: strip is {w}x{h} (WxH); expected width {n} x height = {n * h}")
    tiles = {name: arr[:, i * h:(i + 1) * h] ** gamma[name] for i, name in enumerate(tile_order)}
    maps = MaterialMaps(
        diffuse=tiles["diffuse"],
        normal=tiles["normal"],
        roughness=gray_channel(tiles["roughness"]),
        specular=tiles["specular"],
    )
    render = RenderedImage(tiles["render"])
    return SvbrdfRecord(render=render, maps=maps, id=path.stem, category=category)


def save_dataset(records, out_dir, split: DatasetSplit | None = None, tile_order=DEFAULT_TILE_ORDER, gamma=None,
                 extra: dict | None = None) -> Path:
    """Write strips plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gamma = {**DEFAULT_GAMMA, **(gamma or {})}
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("record ids must be unique")
    for r in records:
        save_strip(r, out_dir / f"{r.id}.png", tile_order, gamma)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "tile_order": list(tile_order),
        "gamma": gamma,
        "resolution": list(records[0].maps.resolution) if records else None,
        "ids": ids,
        "categories": {r.id: r.category for r in records},
        "split_seed": split.seed if split else None,
        "split": {"train": list(split.train), "test": list(split.test)} if split else None,
        **(extra or {}),
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise DatasetFormatError(f"no {MANIFEST_NAME} in {directory}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
    return manifest


def load_dataset(directory, subset: str | None = None) -> list[SvbrdfRecord]:
    """Load strips listed in the manifest, optionally only the train or test ids."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    ids = manifest["ids"]
    if subset is not None:
        if not manifest.get("split"):
            raise DatasetFormatError(f"{directory}: manifest has no split, cannot select {subset!r}")
        ids = manifest["split"][subset]
    cats = manifest.get("categories", {})
    return [
        load_strip(directory / f"{i}.png", manifest["tile_order"], manifest["gamma"], category=cats.get(i, "synthetic"))
        for i in ids
    ]


def _resize_center_crop(im: Image.Image, size: int) -> Image.Image:
    w, h = im.size
    scale = size / min(w, h)
    nw, nh = max(size, round(w * scale)), max(size, round(h * scale))
    if (nw, nh) != (w, h):
        im = im.resize((nw, nh), Image.Resampling.LANCZOS)
    left, top = (nw - size) // 2, (nh - size) // 2
    return im.crop((left, top, left + size, top + size))


def load_real_images(directory, resolution: int = 256) -> list[RealImageRecord]:
    """Load ``<root>/<category>/<name>.<ext>`` photographs.

    Each image is resized so its shortest side equals ``resolution``, centre
    cropped to a square and linearized with the inverse 2.2 gamma. Unreadable
    files are skipped with a warning.

    Raises:
        FileNotFoundError: directory missing.
        ValueError: no readable image found.
    """
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"real image directory {root} does not exist")
    records = []
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(cat_dir.iterdir()):
            if f.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            try:
                with Image.open(f) as im:
                    im = _resize_center_crop(im.convert("RGB"), resolution)
                    arr = np.asarray(im, dtype=np.float64) / 255.0
            except Exception as exc:  # PIL raises a zoo of types on bad files
                warnings.warn(f"skipping unreadable image {f}: {exc}", stacklevel=2)
                continue
            records.append(RealImageRecord(image=arr ** GAMMA, category=cat_dir.name, id=f"{cat_dir.name}/{f.stem}"))
    if not records:
        raise ValueError(f"no readable images under {root}")
    return records


def split_dataset(records, train_fraction: float, seed: int) -> DatasetSplit:
    """Per-category stratified split; each category gets round(fraction * n) train ids."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    by_cat: dict[str, list[str]] = {}
    for r in records:
        by_cat.setdefault(r.category, []).append(r.id)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cat in sorted(by_cat):
        ids = sorted(by_cat[cat])
        if len(ids) < 2:
            raise ValueError(f"category {cat!r} has {len(ids)} record(s); at least 2 are needed to split")
        n_train = min(max(int(round(train_fraction * len(ids))), 1), len(ids) - 1)
        order = rng.permutation(len(ids))
        train += [ids[i] for i in order[:n_train]]
        test += [ids[i] for i in order[n_train:]]
    return DatasetSplit(train=tuple(train), test=tuple(test), seed=seed)

