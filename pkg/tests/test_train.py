import json
import logging

import numpy as np
import pytest
import torch

from surfacenet.checkpoint import CheckpointError
from surfacenet.dataset import RealImageRecord, make_training_record
from surfacenet.losses import LossWeights
from surfacenet.models import GeneratorConfig
from surfacenet.procedural import PATTERNS, generate_procedural
from surfacenet.train import (TrainConfig, Trainer, TrainingDiverged, batch_indices, latest_checkpoint,
                              load_generator, smoothed, stream_schedule)


@pytest.fixture(scope="module")
def tiny_records():
    return [make_training_record(generate_procedural(s, PATTERNS[s % 5], 64), id=f"t{s}") for s in range(4)]


@pytest.fixture(scope="module")
def tiny_real():
    rng = np.random.default_rng(0)
    return [RealImageRecord(rng.random((64, 64, 3)) ** 2.2, "wood", f"wood/{i}") for i in range(3)]


def cfg(**kw):
    base = dict(max_iterations=6, batch_size=2, seed=0)
    base.update(kw)
    return TrainConfig.desk(**base)


def snapshot(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def test_config_validation():
    for bad in (dict(learning_rate=0), dict(batch_size=0), dict(real_stream_ratio=1.5)):
        with pytest.raises(ValueError):
            cfg(**bad).validate()
    assert TrainConfig().learning_rate == 4e-5
    assert TrainConfig.paper().batch_size == 6 and TrainConfig.paper().max_iterations == 250_000
    assert TrainConfig.desk().batch_size == 4


def test_scheduler_counts():
    assert stream_schedule(100, 0.5, seed=3).sum() == 50
    assert stream_schedule(100, 0.0, seed=3).sum() == 0
    assert stream_schedule(7, 1.0, seed=3).all()
    np.testing.assert_array_equal(stream_schedule(40, 0.3, 1), stream_schedule(40, 0.3, 1))


def test_batch_indices_cover_epochs():
    n, b = 5, 3
    seq = np.concatenate([batch_indices(n, b, k, seed=1, stream="synthetic") for k in range(5)])
    for e in range(3):
        assert sorted(seq[e * n:(e + 1) * n]) == list(range(n))
    np.testing.assert_array_equal(batch_indices(n, b, 4, 1, "synthetic"), batch_indices(n, b, 4, 1, "synthetic"))


def test_synthetic_step_bit_reproducible(tiny_records):
    a, b = Trainer(cfg(), tiny_records), Trainer(cfg(), tiny_records)
    ra, rb = a.train_step_synthetic([0, 1]), b.train_step_synthetic([0, 1])
    assert ra.flat() == rb.flat()
    for (k, va), vb in zip(a.state.generator.state_dict().items(), b.state.generator.state_dict().values()):
        assert torch.equal(va, vb), k


def test_adversarial_disabled_leaves_discriminator(tiny_records):
    t = Trainer(cfg(weights=LossWeights(alpha=0.0, adversarial=False), hygiene_checks=True), tiny_records)
    before = snapshot(t.state.discriminator)
    g_before = snapshot(t.state.generator)
    report = t.train_step_synthetic([0, 1])
    assert report.adv_g is None and report.disc is None
    for k, v in t.state.discriminator.state_dict().items():
        assert torch.equal(v, before[k])
    assert any(not torch.equal(v, g_before[k]) for k, v in t.state.generator.state_dict().items())


def test_hygiene_checks_pass_in_both_streams(tiny_records, tiny_real):
    t = Trainer(cfg(hygiene_checks=True, real_stream_ratio=0.5), tiny_records, tiny_real)
    t.train_step_synthetic([0, 1])
    t.train_step_real([0, 1], [2, 3])
    assert t.state.iteration == 2


def test_real_stream_forced_off_without_real_data(tiny_records, caplog):
    with caplog.at_level(logging.INFO, logger="surfacenet.train"):
        t = Trainer(cfg(real_stream_ratio=0.5), tiny_records)
    assert t.real_stream_ratio == 0.0 and not t.schedule.any()
    assert "forced to 0" in caplog.text


def test_real_step_requires_reservoir(tiny_records, tiny_real):
    t = Trainer(cfg(real_stream_ratio=0.5), tiny_records, tiny_real)
    t.gt_stack = t.gt_stack[:0]
    with pytest.raises(ValueError, match="reservoir is empty"):
        t.train_step_real([0], [])


def test_mixed_run_has_exact_real_count(tiny_records, tiny_real):
    t = Trainer(cfg(max_iterations=10, real_stream_ratio=0.5), tiny_records, tiny_real)
    history = t.run()
    assert sum(r["stream"] == "real" for r in history) == 5
    assert all("sup" not in r for r in history if r["stream"] == "real")


def test_nan_aborts_with_dump(tiny_records, tmp_path, monkeypatch):
    t = Trainer(cfg(), tiny_records, out_dir=tmp_path)
    import surfacenet.train as train_mod

    monkeypatch.setattr(train_mod, "generator_adv_loss", lambda d: torch.log(d - 2.0).mean())
    with pytest.raises(TrainingDiverged) as exc:
        t.train_step_synthetic([1, 2])
    assert "t1" in str(exc.value)
    dump = json.loads(exc.value.dump_path.read_text())
    assert dump["ids"] == ["t1", "t2"] and dump["where"] == "generator"


def test_overfit_single_record_50_steps(tiny_records):
    t = Trainer(cfg(max_iterations=50, batch_size=1, learning_rate=5e-4), tiny_records[:1])
    sup = [r["sup"] for r in t.run()]
    s = smoothed(sup, 10)
    assert s[-1] < s[0]


def test_checkpoint_roundtrip_and_errors(tiny_records, tmp_path):
    t = Trainer(cfg(), tiny_records, out_dir=tmp_path)
    t.train_step_synthetic([0, 1])
    path = t.save_checkpoint(tmp_path / "c.pt")
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        ref = t.state.generator(x)
    fresh = Trainer(cfg(seed=5), tiny_records)
    fresh.load_checkpoint(path)
    assert fresh.state.iteration == 1
    with torch.no_grad():
        out = fresh.state.generator(x)
    for k in ref:
        torch.testing.assert_close(out[k], ref[k], atol=1e-7, rtol=0)
    g = load_generator(path)
    with torch.no_grad():
        torch.testing.assert_close(g(x)["diffuse"], ref["diffuse"], atol=1e-7, rtol=0)

    raw = path.read_bytes()
    (tmp_path / "trunc.pt").write_bytes(raw[: len(raw) // 2])
    before = snapshot(fresh.state.generator)
    with pytest.raises(CheckpointError):
        fresh.load_checkpoint(tmp_path / "trunc.pt")
    for k, v in fresh.state.generator.state_dict().items():
        assert torch.equal(v, before[k])

    other = Trainer(cfg(), tiny_records, generator_config=GeneratorConfig.desk(trunk_channels=32))
    with pytest.raises(CheckpointError, match="first mismatch: generator/"):
        other.load_checkpoint(path)


def test_resume_matches_uninterrupted(tiny_records, tiny_real, tmp_path):
    c = cfg(max_iterations=8, checkpoint_interval=4, real_stream_ratio=0.5)
    full = Trainer(c, tiny_records, tiny_real, out_dir=tmp_path / "full").run()
    part_dir = tmp_path / "part"
    first = Trainer(cfg(max_iterations=8, checkpoint_interval=4, real_stream_ratio=0.5), tiny_records, tiny_real,
                    out_dir=part_dir)
    for _ in range(5):  # interrupted after the step-4 checkpoint
        first.step()
        if first.state.iteration == 4:
            first.save_checkpoint(first.checkpoint_path(4))
    assert latest_checkpoint(part_dir).name == "step_0000004.pt"
    resumed = Trainer(c, tiny_records, tiny_real, out_dir=part_dir).run(resume=True)
    assert [r["iteration"] for r in resumed] == list(range(5, 9))
    for a, b in zip(full[4:], resumed):
        assert a["stream"] == b["stream"]
        for k in a:
            if k not in ("iteration", "stream"):
                assert abs(a[k] - b[k]) <= 1e-6, k


@pytest.mark.slow
def test_desk_run_500_steps_reduces_supervised_loss(small_records):
    t = Trainer(TrainConfig.desk(max_iterations=500, seed=0), small_records)
    sup = [r["sup"] for r in t.run()]
    assert np.mean(sup[-20:]) < np.mean(sup[:20])
