import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surfacenet.materials import (STACK_CHANNELS, DegenerateNormalWarning, MapKind, MaterialError, MaterialMaps,
                                  decode_normal, encode_normal, validate_maps)


def test_map_kinds_and_channels():
    assert [k.channels for k in MapKind] == [3, 3, 1, 3]
    assert STACK_CHANNELS == 10


def test_encode_examples():
    np.testing.assert_allclose(encode_normal([0.0, 0.0, 1.0]), [0.5, 0.5, 1.0])
    np.testing.assert_allclose(encode_normal([0.6, 0.0, 0.8]), [0.8, 0.5, 0.9])
    with pytest.raises(MaterialError):
        encode_normal([1.0, 0.0, 0.0])
    with pytest.raises(MaterialError):
        encode_normal([0.0, 0.0, 2.0])


def test_decode_examples():
    np.testing.assert_allclose(decode_normal([0.5, 0.5, 1.0]), [0.0, 0.0, 1.0])
    np.testing.assert_allclose(decode_normal([0.8, 0.5, 0.9]), [0.6, 0.0, 0.8], atol=1e-12)
    with pytest.warns(DegenerateNormalWarning):
        flat = decode_normal([0.5, 0.5, 0.5])
    np.testing.assert_allclose(flat, [0.0, 0.0, 1.0])
    with pytest.raises(MaterialError):
        decode_normal([1.2, 0.5, 0.5])


@settings(max_examples=200, deadline=None)
@given(theta=st.floats(0.0, np.arccos(0.05)), phi=st.floats(0.0, 2 * np.pi))
def test_encode_decode_roundtrip(theta, phi):
    n = np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
    np.testing.assert_allclose(decode_normal(encode_normal(n)), n, atol=1e-6)


def test_validate_reports():
    good = MaterialMaps.uniform((4, 4))
    assert validate_maps(good)
    bad = MaterialMaps(good.diffuse.copy(), good.normal, good.roughness, good.specular)
    bad.diffuse[1, 2, 0] = 1.2
    report = validate_maps(bad)
    assert not report and "(y=1, x=2, c=0)" in str(report)
    wrong = MaterialMaps(good.diffuse, good.normal[:2], good.roughness, good.specular)
    report = validate_maps(wrong)
    assert not report and "normal: shape" in str(report)


def test_stack_roundtrip_and_roughness_axis(rng):
    m = MaterialMaps(rng.random((3, 5, 3)), MaterialMaps.uniform((3, 5)).normal, rng.random((3, 5)), rng.random((3, 5, 3)))
    assert m.roughness.shape == (3, 5, 1)
    back = MaterialMaps.from_stack(m.stack())
    for k in MapKind:
        np.testing.assert_array_equal(back[k], m[k])
