import numpy as np
import pytest
import torch

from surfacenet.materials import MaterialMaps, validate_maps
from surfacenet.models import (DiscriminatorConfig, GeneratorConfig, build_discriminator, build_generator,
                               discriminate, generator_forward, patch_scores)
from surfacenet.models.discriminator import LayerSpec
from surfacenet.models.generator import ConfigError, aspp_forward, downsample_input


@pytest.fixture(scope="module")
def desk_g():
    return build_generator(GeneratorConfig.desk())


@pytest.fixture(scope="module")
def desk_d():
    return build_discriminator(DiscriminatorConfig.desk())


def test_desk_generator_budget(desk_g):
    assert desk_g.parameter_count() <= 2_000_000
    assert desk_g.config.encoder_block_counts == [2, 2, 2] and desk_g.config.trunk_channels == 64


@pytest.mark.parametrize("res", [64, 128])
def test_generator_shapes(desk_g, res):
    out = generator_forward(desk_g, np.random.default_rng(0).random((res, res, 3)))
    assert out.resolution == (res, res)
    assert validate_maps(out)


def test_generator_size_constraint(desk_g):
    with pytest.raises(ValueError, match="multiples of 32"):
        generator_forward(desk_g, np.zeros((100, 100, 3)))


def test_generator_seed_determinism():
    a = build_generator(GeneratorConfig.desk(seed=3))
    b = build_generator(GeneratorConfig.desk(seed=3))
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)


def test_generator_output_range_extreme_inputs(desk_g):
    x = torch.randn(2, 3, 32, 32) * 1e3
    with torch.no_grad():
        out = desk_g(x)
    for v in out.values():
        assert torch.isfinite(v).all() and v.min() >= 0 and v.max() <= 1


def test_heads_are_isolated():
    g = build_generator(GeneratorConfig.desk())
    x = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        before = g(x)
        for p in g.heads["roughness"].parameters():
            p.zero_()
        after = g(x)
    for k in before:
        if k == "roughness":
            assert not torch.equal(before[k], after[k])
        else:
            assert torch.equal(before[k], after[k])


def test_config_errors():
    with pytest.raises(ConfigError):
        build_generator(GeneratorConfig.desk(aspp_dilations=[0, 2]))
    with pytest.raises(ConfigError):
        build_generator(GeneratorConfig.desk(heads=[]))
    with pytest.raises(ConfigError):
        build_generator(GeneratorConfig.desk(encoder_strides=[2, 2, 1]))


def test_full_scale_trunk_shape():
    # shape-only check on the meta device; the full network is ~65M parameters
    with torch.device("meta"):
        from surfacenet.models.generator import Generator
        g = Generator(GeneratorConfig.paper())
        feats = g.trunk(torch.zeros(1, 3, 256, 256))
    assert tuple(feats.shape) == (1, 256, 256, 256)


def test_full_scale_forward_small_input():
    g = build_generator(GeneratorConfig.paper())
    with torch.no_grad():
        out = g(torch.rand(1, 3, 32, 32))
    assert {k: tuple(v.shape[-2:]) for k, v in out.items()} == {k: (32, 32) for k in out}


def test_aspp_examples():
    x = torch.randn(1, 16, 32, 32)
    assert aspp_forward(x, [1]).shape == x.shape
    assert aspp_forward(x, [6, 12, 18]).shape == x.shape
    z = aspp_forward(torch.zeros(1, 16, 8, 8), [1, 2])
    assert torch.isfinite(z).all()


def test_downsample_input_examples():
    x = torch.rand(1, 3, 8, 8)
    assert torch.equal(downsample_input(x, 1), x)
    c = torch.full((1, 3, 8, 8), 0.3)
    torch.testing.assert_close(downsample_input(c, 4), torch.full((1, 3, 2, 2), 0.3))
    blk = torch.tensor([[[[0.0, 0.0], [1.0, 1.0]]]])
    assert downsample_input(blk, 2).item() == 0.5
    assert abs(downsample_input(x, 2).mean() - x.mean()) < 1e-6
    with pytest.raises(ValueError):
        downsample_input(torch.rand(1, 3, 6, 6), 4)


def test_discriminator_reference_grid():
    d = build_discriminator(DiscriminatorConfig.paper())
    with torch.no_grad():
        s = d(torch.rand(1, 10, 256, 256))
    assert tuple(s.shape) == (1, 1, 14, 14)
    assert 256 / 14 == pytest.approx(18.3, abs=0.05)


def test_discriminator_desk_grid(desk_d):
    n = desk_d.config.output_size(64)
    assert n >= 2
    with torch.no_grad():
        assert tuple(desk_d(torch.rand(2, 10, 64, 64)).shape) == (2, 1, n, n)


def test_discriminator_config_errors():
    bad = [LayerSpec(4, 2, 1, 8)] * 5 + [LayerSpec(3, 1, 1, 1)]
    with pytest.raises(ConfigError, match="expected 14x14"):
        build_discriminator(DiscriminatorConfig(layers=bad))
    with pytest.raises(ConfigError, match="exactly 6"):
        build_discriminator(DiscriminatorConfig(layers=bad[:5]))


def test_discriminator_scores_and_mean(desk_d):
    x = torch.rand(3, 10, 64, 64)
    with torch.no_grad():
        s = patch_scores(desk_d, x)
        assert torch.equal(s, patch_scores(desk_d, x))
        assert ((s > 0) & (s < 1)).all()
        torch.testing.assert_close(discriminate(desk_d, x), s.mean(dim=(1, 2, 3)), rtol=0, atol=0)
        z = patch_scores(desk_d, torch.zeros(1, 10, 64, 64))
    assert torch.isfinite(z).all() and ((z > 0) & (z < 1)).all()
    with pytest.raises(ValueError, match="10 channels"):
        desk_d(torch.rand(1, 9, 64, 64))


def test_discriminate_accepts_material_maps(desk_d):
    m = MaterialMaps.uniform((64, 64))
    assert discriminate(desk_d, m).shape == (1,)


def test_discriminator_locality():
    cfg = DiscriminatorConfig.paper()
    size, jump, start = cfg.receptive_field()
    d = build_discriminator(cfg).double()
    x = torch.rand(1, 10, 256, 256, dtype=torch.float64)
    y = x.clone()
    y[..., :16, :16] += 0.5
    with torch.no_grad():
        a, b = d(x)[0, 0], d(y)[0, 0]
    # the last score's receptive field starts at its centre minus half the field size
    last = start + jump * (a.shape[-1] - 1)
    assert last - (size - 1) / 2 > 16
    assert abs(a[-1, -1] - b[-1, -1]) < 1e-6
    assert abs(a[0, 0] - b[0, 0]) > 0


def _fd_rel_err(params, loss_fn, every, h, rng):
    grads = torch.autograd.grad(loss_fn(), params)
    auto, fd = [], []
    with torch.no_grad():
        for p, gr in zip(params, grads):
            flat = p.view(-1)
            for i in rng.choice(flat.numel(), max(1, flat.numel() // every), replace=False):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                fd.append((up - down) / (2 * h))
                auto.append(gr.reshape(-1)[i].item())
    auto, fd = np.array(auto), np.array(fd)
    return np.linalg.norm(auto - fd) / np.linalg.norm(auto)


def test_autodiff_matches_fine_finite_differences():
    """Same setup as the acceptance gradient check, with h small enough that ReLU kinks are rarely straddled."""
    from surfacenet.losses import (LossWeights, discriminator_loss, generator_adv_loss, supervised_loss,
                                   total_generator_loss)
    from surfacenet.materials import MapKind
    from surfacenet.models import discriminate
    from surfacenet.models.generator import stack_outputs

    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    g = build_generator(GeneratorConfig.desk(size_multiple=8)).double()
    d = build_discriminator(DiscriminatorConfig.small_input()).double()
    image = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    gt = {k.value: torch.rand(1, k.channels, 8, 8, dtype=torch.float64) for k in MapKind}
    w = LossWeights(msssim=False)

    def g_loss():
        out = g(image)
        sup, _ = supervised_loss(out, gt, w)
        return total_generator_loss(sup, generator_adv_loss(discriminate(d, stack_outputs(out))), w)

    assert _fd_rel_err(list(g.parameters()), g_loss, 500, 1e-6, rng) < 1e-2
    with torch.no_grad():
        fake = stack_outputs(g(image))
    real = stack_outputs(gt)
    d_loss = lambda: discriminator_loss(discriminate(d, real), discriminate(d, fake))  # noqa: E731
    assert _fd_rel_err(list(d.parameters()), d_loss, 100, 1e-6, rng) < 1e-2


def test_normal_head_starts_near_flat():
    g = build_generator(GeneratorConfig.desk())
    with torch.no_grad():
        z = g(torch.rand(1, 3, 64, 64))["normal"][:, 2] * 2 - 1
    assert float(z.min()) > 0.5
