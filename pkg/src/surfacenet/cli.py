"""Command-line entry point: ``surfacenet <subcommand> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as cfgmod
from .checkpoint import CheckpointError
from .dataset import (DEFAULT_GAMMA, DEFAULT_TILE_ORDER, IMAGE_EXTENSIONS, MANIFEST_NAME, DatasetFormatError,
                      SvbrdfRecord, gray_channel, load_dataset, load_real_images, load_strip, make_training_record, quantize_maps,
                      read_manifest, save_dataset, save_strip, split_dataset)
from .materials import MapKind, MaterialMaps
from .procedural import PATTERNS, generate_procedural
from .render import (DEFAULT_FLASH_INTENSITY, GAMMA, LightSetup, RenderedImage, load_environment, render,
                     render_five)

log = logging.getLogger("surfacenet")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    """Bad flags, paths or config; maps to exit code 2."""


def _save_png(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)).save(path)


def _dataset_dir(arg) -> Path:
    if arg:
        return Path(arg)
    env = cfgmod.default_data_dir()
    if env is None:
        raise UsageError(f"no dataset given; pass --dataset or set {cfgmod.DATA_DIR_ENV}")
    return env


def _prepare_out_dir(out: Path, force: bool) -> None:
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


# gen-data

def record_seed(seed: int, index: int) -> int:
    return int(np.random.default_rng([seed, index]).integers(2**31 - 1))


def generate_records(n: int, patterns, resolution: int, seed: int) -> list[SvbrdfRecord]:
    records = []
    for i in range(n):
        pattern = patterns[i % len(patterns)]
        maps = quantize_maps(generate_procedural(record_seed(seed, i), pattern, resolution))
        records.append(make_training_record(maps, id=f"{pattern}_{i:05d}", category=pattern))
    return records


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be at least 1, got {args.n}")
    patterns = [p.strip() for p in args.patterns.split(",") if p.strip()]
    bad = [p for p in patterns if p not in PATTERNS]
    if bad or not patterns:
        raise UsageError(f"unknown pattern(s) {bad}; choose from {', '.join(PATTERNS)}")
    if args.resolution < 32 or args.resolution & (args.resolution - 1):
        raise UsageError(f"--resolution must be a power of two >= 32, got {args.resolution}")
    if not 0.0 < args.train_fraction < 1.0:
        raise UsageError("--train-fraction must be in (0, 1)")
    out = Path(args.out) if args.out else _dataset_dir(None)
    _prepare_out_dir(out, args.force)
    records = generate_records(args.n, patterns, args.resolution, args.seed)
    split = None
    counts = {p: sum(r.category == p for r in records) for p in patterns}
    if min(counts.values()) >= 2:
        split = split_dataset(records, args.train_fraction, args.seed)
    else:
        log.info("some pattern has fewer than 2 records; writing the dataset without a train/test split")
    path = save_dataset(records, out, split, extra={"generator": {"seed": args.seed, "patterns": patterns}})
    print(path)
    return EXIT_OK


# train

def _run_config(args):
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides += [f"train.seed={args.seed}", f"generator.seed={args.seed}", f"discriminator.seed={args.seed + 1}"]
    return cfgmod.load_run_config(args.config, overrides)


def _training_records(run, subset_override=None):
    data_dir = _dataset_dir(run.data.synthetic)
    if not (data_dir / MANIFEST_NAME).is_file():
        raise UsageError(f"synthetic dataset {data_dir} has no {MANIFEST_NAME}")
    manifest = read_manifest(data_dir)
    subset = subset_override if subset_override is not None else run.data.subset
    if subset and not manifest.get("split"):
        subset = None
    records = load_dataset(data_dir, subset)
    if not records:
        raise UsageError(f"synthetic dataset {data_dir} is empty")
    real = None
    if run.data.real:
        res = records[0].maps.resolution[0]
        real = load_real_images(run.data.real, resolution=res)
    return data_dir, manifest, records, real


def cmd_train(args) -> int:
    from .train import Trainer, TrainingDiverged

    run = _run_config(args)
    _, _, records, real = _training_records(run)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfgmod.dump_run_config(run))
    trainer = Trainer(run.train, records, real, run.generator, run.discriminator, out)
    try:
        history = trainer.run(resume=args.resume)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    final = history[-1] if history else {}
    print(json.dumps({"iteration": trainer.state.iteration, "checkpoint": str(trainer.checkpoint_path(trainer.state.iteration)),
                      "final": final}))
    return EXIT_OK


# infer

def _collect_images(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(f for f in p.iterdir() if f.suffix.lower() in IMAGE_EXTENSIONS)
        elif p.is_file():
            files.append(p)
        else:
            raise UsageError(f"input {p} does not exist")
    if not files:
        raise UsageError("no input images found")
    return files


def pad_to_multiple(image: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad bottom/right so both sides are multiples of ``multiple``; returns the original size."""
    h, w = image.shape[:2]
    ph, pw = -h % multiple, -w % multiple
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="reflect"), (h, w)


def cmd_infer(args) -> int:
    from .models import generator_forward
    from .train import load_generator

    files = _collect_images(args.inputs)
    try:
        net = load_generator(args.checkpoint)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    m = net.config.size_multiple
    images = []
    for f in files:
        with Image.open(f) as im:
            img = (np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0) ** GAMMA
        h, w = img.shape[:2]
        if (h % m or w % m) and not args.pad:
            raise UsageError(f"{f} is {w}x{h}; width and height must be multiples of {m} (or pass --pad)")
        images.append(img)
    out = Path(args.out)
    for f, img in zip(files, images):
        padded, (h, w) = pad_to_multiple(img, m) if args.pad else (img, img.shape[:2])
        maps = generator_forward(net, padded)
        maps = MaterialMaps(**{k.value: maps[k][:h, :w] for k in MapKind})
        for k in MapKind:
            arr = maps[k]
            arr = np.repeat(arr, 3, axis=-1) if arr.shape[-1] == 1 else arr
            path = out / f"{f.stem}_{k.value}.png"
            _save_png(arr ** (1.0 / DEFAULT_GAMMA[k.value]), path)
            print(path)
        strip = out / f"{f.stem}_strip.png"
        save_strip(SvbrdfRecord(RenderedImage(img), maps, f.stem), strip)
        print(strip)
    return EXIT_OK


# render

def _load_maps(path: Path) -> MaterialMaps:
    if path.is_file():
        manifest = None
        if (path.parent / MANIFEST_NAME).is_file():
            manifest = read_manifest(path.parent)
        order = manifest["tile_order"] if manifest else DEFAULT_TILE_ORDER
        gamma = manifest["gamma"] if manifest else None
        return load_strip(path, order, gamma).maps
    if path.is_dir():
        arrs = {}
        for k in MapKind:
            hits = sorted(path.glob(f"*{k.value}.png"))
            if len(hits) != 1:
                raise UsageError(f"expected exactly one *{k.value}.png in {path}, found {len(hits)}")
            with Image.open(hits[0]) as im:
                a = (np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0) ** DEFAULT_GAMMA[k.value]
            arrs[k.value] = gray_channel(a) if k is MapKind.ROUGHNESS else a
        return MaterialMaps(**arrs)
    raise UsageError(f"maps {path} not found")


def _parse_vec3(text: str) -> tuple[float, float, float]:
    try:
        v = tuple(float(x) for x in text.split(","))
    except ValueError:
        v = ()
    if len(v) != 3:
        raise UsageError(f"expected x,y,z, got {text!r}")
    return v


def cmd_render(args) -> int:
    maps = _load_maps(Path(args.maps))
    out = Path(args.out)
    if args.five_lights:
        for name, img in render_five(maps, args.intensity).items():
            path = out.with_name(f"{out.stem}_{name}{out.suffix or '.png'}")
            _save_png(img.tone_mapped, path)
            print(path)
        return EXIT_OK
    if args.env:
        setup = load_environment(args.env)
    else:
        setup = LightSetup.flash(_parse_vec3(args.light_position), args.intensity)
    _save_png(render(maps, setup).tone_mapped, out)
    print(out)
    return EXIT_OK


# eval / ablate

def cmd_eval(args) -> int:
    from .evaluate import evaluate_dataset, format_csv, format_table
    from .train import load_generator

    data_dir = _dataset_dir(args.dataset)
    if not (data_dir / MANIFEST_NAME).is_file():
        raise UsageError(f"dataset {data_dir} has no {MANIFEST_NAME}")
    manifest = read_manifest(data_dir)
    subset = args.subset
    if subset == "auto":
        subset = "test" if manifest.get("split") else None
    elif subset == "all":
        subset = None
    records = load_dataset(data_dir, subset)
    if not records:
        raise UsageError(f"dataset {data_dir} has no records{f' in subset {subset}' if subset else ''}")
    try:
        net = load_generator(args.checkpoint)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    report = evaluate_dataset(net, records, label=args.label or Path(args.checkpoint).stem)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(format_table([report]))
    (out / "metrics.csv").write_text(format_csv([report]))
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(format_table([report]), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluate import PLANS, AblationPlan, format_table, run_ablation

    run = _run_config(args)
    if args.plan in PLANS:
        plan = PLANS[args.plan]
    elif Path(args.plan).is_file():
        try:
            plan = AblationPlan.from_file(args.plan)
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"invalid ablation plan {args.plan}: {exc}") from exc
    else:
        raise UsageError(f"--plan must be one of {sorted(PLANS)} or a plan file, got {args.plan!r}")
    data_dir, manifest, _, real = _training_records(run, subset_override=None)
    if not manifest.get("split"):
        raise UsageError(f"ablation needs a train/test split in {data_dir}/{MANIFEST_NAME}")
    train_records = load_dataset(data_dir, "train")
    test_records = load_dataset(data_dir, "test")
    reports = run_ablation(plan, train_records, test_records, run.train, real, run.generator, run.discriminator,
                           args.out)
    print(format_table(reports), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="surfacenet", description="Single-image SVBRDF estimation toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    p.add_argument("-q", "--quiet", action="store_true", help="only errors")
    sub = p.add_subparsers(dest="command", required=True)

    def config_flags(sp):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. train.batch_size=2")
        sp.add_argument("--seed", type=int, help="seed for training, network init and data order")

    g = sub.add_parser("gen-data", help="write procedural strip records and a manifest")
    g.add_argument("--n", type=int, default=64, help="number of records")
    g.add_argument("--patterns", default=",".join(PATTERNS), help="comma-separated pattern names")
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.add_argument("--out", help=f"output directory (default ${cfgmod.DATA_DIR_ENV})")
    g.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train generator and discriminator")
    config_flags(t)
    t.add_argument("--out", required=True, help="run directory for checkpoints and the log")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="estimate maps for images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("inputs", nargs="+", help="image files or directories")
    i.add_argument("--out", required=True)
    i.add_argument("--pad", action="store_true", help="reflect-pad to the size multiple and crop back")
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("render", help="render a strip file or a directory of map images")
    r.add_argument("maps", help="strip .png or directory with *diffuse/normal/roughness/specular.png")
    r.add_argument("--out", required=True, help="output .png (suffixed per position with --five-lights)")
    r.add_argument("--light-position", default="0,0,1", help="flash position x,y,z")
    r.add_argument("--intensity", type=float, default=DEFAULT_FLASH_INTENSITY)
    r.add_argument("--five-lights", action="store_true", help="render the five evaluation flash positions")
    r.add_argument("--env", help="environment light file (lines: dx dy dz r g b)")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="RMSE metrics of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", help=f"dataset directory (default ${cfgmod.DATA_DIR_ENV})")
    e.add_argument("--subset", choices=("auto", "train", "test", "all"), default="auto",
                   help="auto uses the test split when the manifest has one")
    e.add_argument("--label", help="row label in the report")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate every row of an ablation plan")
    config_flags(a)
    a.add_argument("--plan", default="loss", help="architecture, loss, or a YAML plan file")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    if args.quiet:
        level = logging.ERROR
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigSchemaError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
