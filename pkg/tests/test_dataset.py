import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from surfacenet.dataset import (DatasetFormatError, RealImageRecord, load_dataset, load_real_images, load_strip,
                                make_training_record, quantize_maps, read_manifest, save_dataset, save_strip,
                                split_dataset)
from surfacenet.materials import MapKind, MaterialMaps, validate_maps
from surfacenet.procedural import PATTERNS, _pattern_fields, generate_procedural, hash2


@pytest.mark.parametrize("pattern", PATTERNS)
def test_procedural_valid_and_deterministic(pattern):
    a = generate_procedural(3, pattern, 64)
    b = generate_procedural(3, pattern, 64)
    assert validate_maps(a), validate_maps(a)
    for k in MapKind:
        np.testing.assert_array_equal(a[k], b[k])


def test_procedural_examples():
    flat = generate_procedural(11, "checker", 64, noise_overlay=False)
    assert len(np.unique(flat.diffuse.reshape(-1, 3), axis=0)) == 2
    m = generate_procedural(7, "perlin", 64)
    assert validate_maps(m)
    assert np.max(np.abs(np.linalg.norm(m.normals(), axis=-1) - 1.0)) < 1e-5
    with pytest.raises(ValueError):
        generate_procedural(0, "plaid", 64)
    with pytest.raises(ValueError):
        generate_procedural(0, "checker", 48)


def test_brick_mortar_is_flat_and_rough():
    res, seed = 64, 4
    m = generate_procedural(seed, "bricks", res, noise_overlay=False)
    mask, _, _ = _pattern_fields("bricks", res, seed, np.random.default_rng([seed, PATTERNS.index("bricks")]))
    mortar, brick = mask < 0.01, mask > 0.99
    assert m.roughness[mortar].mean() > m.roughness[brick].mean()
    assert np.std(m.normals()[..., 2][mortar]) <= np.std(m.normals()[..., 2]) + 1e-12


def test_hash_is_integer_exact():
    # lowbias32-style hashing is pure uint32 arithmetic: fixed values on every platform
    h = hash2(np.array([0, 1, 2]), np.array([0, 0, 5]), 9)
    assert h.dtype == np.uint32
    np.testing.assert_array_equal(h, hash2(np.array([0, 1, 2]), np.array([0, 0, 5]), 9))


def test_training_record_center_pixel():
    d, res = 0.4, 17
    rec = make_training_record(MaterialMaps.uniform((res, res), diffuse=d, specular=0.0, roughness=1.0), intensity=2.0)
    np.testing.assert_allclose(rec.render.pixels[8, 8], d * 2.0 / math.pi, rtol=1e-12)
    again = make_training_record(MaterialMaps.uniform((res, res), diffuse=d, specular=0.0, roughness=1.0),
                                 intensity=2.0)
    np.testing.assert_array_equal(rec.render.pixels, again.render.pixels)


def _random_maps(rng, res):
    n = rng.normal(size=(res, res, 3)) * [0.4, 0.4, 0.0]
    n[..., 2] = 1.0
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return MaterialMaps(rng.random((res, res, 3)), (n + 1) / 2, rng.random((res, res, 1)), rng.random((res, res, 3)))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_strip_roundtrip_bound(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    rec = make_training_record(_random_maps(rng, 8), id="r")
    path = tmp_path_factory.mktemp("strip") / "r.png"
    save_strip(rec, path)
    back = load_strip(path)
    for k in MapKind:
        assert np.max(np.abs(back.maps[k] - rec.maps[k])) <= 1 / 255 + 1e-12, k
    assert np.max(np.abs(back.render.tone_mapped - rec.render.tone_mapped)) <= 1 / 255 + 1e-12


def test_strip_geometry_and_format_error(tmp_path):
    Image.fromarray(np.zeros((256, 1280, 3), np.uint8)).save(tmp_path / "ok.png")
    rec = load_strip(tmp_path / "ok.png")
    assert rec.maps.resolution == (256, 256) and rec.render.pixels.shape == (256, 256, 3)
    Image.fromarray(np.zeros((256, 1000, 3), np.uint8)).save(tmp_path / "bad.png")
    with pytest.raises(DatasetFormatError, match="1000x256"):
        load_strip(tmp_path / "bad.png")


def test_quantized_maps_survive_strip_exactly(tmp_path):
    rec = make_training_record(quantize_maps(generate_procedural(2, "voronoi", 32)), id="q")
    save_strip(rec, tmp_path / "q.png")
    back = load_strip(tmp_path / "q.png")
    for k in MapKind:
        np.testing.assert_array_equal(back.maps[k], rec.maps[k])


def test_dataset_manifest(tmp_path, small_records):
    path = save_dataset(small_records, tmp_path)
    manifest = json.loads(path.read_text())
    assert manifest["ids"] == [r.id for r in small_records]
    assert manifest["tile_order"] == ["render", "normal", "diffuse", "roughness", "specular"]
    assert read_manifest(tmp_path)["resolution"] == [64, 64]
    loaded = load_dataset(tmp_path)
    assert [r.id for r in loaded] == manifest["ids"]
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path, "train")


def _write_images(root, cats=3, per=2, size=(40, 30)):
    rng = np.random.default_rng(0)
    for c in range(cats):
        (root / f"cat{c}").mkdir(parents=True)
        for i in range(per):
            Image.fromarray(rng.integers(0, 256, (size[1], size[0], 3), dtype=np.uint8)).save(root / f"cat{c}" / f"{i}.png")


def test_load_real_images(tmp_path):
    _write_images(tmp_path)
    recs = load_real_images(tmp_path, resolution=16)
    assert len(recs) == 6
    assert sorted({r.category for r in recs}) == ["cat0", "cat1", "cat2"]
    assert all(r.image.shape == (16, 16, 3) and 0 <= r.image.min() and r.image.max() <= 1 for r in recs)


def test_load_real_images_crop_policy(tmp_path):
    (tmp_path / "a").mkdir()
    img = np.zeros((512, 512, 3), np.uint8)
    img[:, 256:] = 255
    Image.fromarray(img).save(tmp_path / "a" / "x.png")
    rec = load_real_images(tmp_path, resolution=256)[0]
    assert rec.image.shape == (256, 256, 3)
    assert rec.image[:, :120].max() < 0.01 and rec.image[:, 136:].min() > 0.99


def test_load_real_images_skips_corrupt(tmp_path):
    _write_images(tmp_path, cats=1, per=2)
    (tmp_path / "cat0" / "broken.png").write_bytes(b"not a png")
    with pytest.warns(UserWarning) as caught:
        recs = load_real_images(tmp_path, resolution=16)
    assert len(recs) == 2
    assert sum("skipping unreadable" in str(w.message) for w in caught) == 1


def test_load_real_images_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_real_images(tmp_path / "missing")
    with pytest.raises(ValueError):
        load_real_images(tmp_path)


def _fake_real(n_per, cats):
    return [RealImageRecord(np.zeros((2, 2, 3)), f"c{c}", f"c{c}/{i}") for c in range(cats) for i in range(n_per)]


def test_split_examples():
    s = split_dataset(_fake_real(80, 3), 65 / 80, seed=1)
    for c in range(3):
        assert sum(i.startswith(f"c{c}/") for i in s.train) == 65
        assert sum(i.startswith(f"c{c}/") for i in s.test) == 15
    s = split_dataset(_fake_real(4, 1), 0.5, seed=0)
    assert len(s.train) == 2 and len(s.test) == 2
    assert split_dataset(_fake_real(10, 2), 0.7, 3) == split_dataset(_fake_real(10, 2), 0.7, 3)
    assert not set(s.train) & set(s.test)
    with pytest.raises(ValueError):
        split_dataset(_fake_real(1, 1), 0.5, 0)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 30), frac=st.floats(0.05, 0.95), seed=st.integers(0, 1000))
def test_split_proportions(n, frac, seed):
    s = split_dataset(_fake_real(n, 2), frac, seed)
    for c in range(2):
        n_train = sum(i.startswith(f"c{c}/") for i in s.train)
        assert abs(n_train - frac * n) < 1 + 1e-9 or n_train in (1, n - 1)
    assert len(s.train) + len(s.test) == 2 * n
