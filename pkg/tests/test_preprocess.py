import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import median_brute
from structreg.preprocess import (
    PreprocessConfig, apply_body_mask, enhance_vessels, median_filter, normalize_unit, preprocess,
)
from structreg.volume import GeometryError, LabelMask, ScalarVolume


def V(a):
    return ScalarVolume.from_array(np.asarray(a, dtype=float))


def tube_phantom(n=24):
    _, y, z = np.meshgrid(*(np.arange(n),) * 3, indexing="ij")
    c = n // 2
    tube = (y - c) ** 2 + (z - c) ** 2 <= 4
    img = np.full((n,) * 3, 0.3)
    img[tube] = 0.6
    from scipy.ndimage import gaussian_filter
    return gaussian_filter(img, 0.7), tube


def test_body_mask():
    rng = np.random.default_rng(0)
    v = rng.random((5, 5, 5))
    assert np.array_equal(apply_body_mask(V(v), LabelMask.from_array(np.ones((5, 5, 5), bool))).values, v)
    assert not apply_body_mask(V(v), LabelMask.from_array(np.zeros((5, 5, 5), bool))).values.any()
    k = rng.random((5, 5, 5)) < 0.5
    assert np.array_equal(apply_body_mask(V(v), LabelMask.from_array(k)).values, v * k)
    with pytest.raises(GeometryError):
        apply_body_mask(V(v), LabelMask.from_array(np.ones((5, 5, 4), bool)))


def test_normalize_examples():
    out = normalize_unit(V(np.array([10.0, 20.0, 30.0]).reshape(3, 1, 1))).values.ravel()
    assert out.tolist() == [0.0, 0.5, 1.0]
    assert not normalize_unit(V(np.full((3, 3, 3), 7.0))).values.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-1e3, 1e3), st.floats(1e-3, 1e3))
def test_normalize_endpoints_exact(seed, shift, scale):
    v = np.random.default_rng(seed).random((4, 5, 3)) * scale + shift
    out = normalize_unit(V(v)).values
    assert out.min() == 0.0 and out.max() == 1.0


def test_median_examples():
    c = np.full((5, 5, 5), 0.25)
    assert np.array_equal(median_filter(V(c)).values, c)
    imp = np.zeros((5, 5, 5))
    imp[2, 2, 2] = 1.0
    assert not median_filter(V(imp), 3).values.any()
    with pytest.raises(ValueError):
        median_filter(V(c), 4)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([1, 3, 5]))
def test_median_matches_sort_oracle(seed, window):
    v = np.random.default_rng(seed).random((5, 5, 5))
    assert np.array_equal(median_filter(V(v), window).values, median_brute(v, window))


def test_median_idempotent_on_piecewise_constant():
    # layered slabs at least two voxels thick
    v = np.zeros((10, 10, 10))
    v[2:5] = 1.0
    v[5:8] = 0.5
    v[8:] = 0.75
    once = median_filter(V(v)).values
    assert np.array_equal(median_filter(V(once)).values, once)


def test_enhance_zero_gain_and_constant():
    rng = np.random.default_rng(1)
    v = rng.random((8, 8, 8))
    assert np.array_equal(enhance_vessels(V(v), PreprocessConfig(gain=0.0)).values, v)
    c = np.full((8, 8, 8), 0.4)
    assert np.array_equal(enhance_vessels(V(c)).values, c)


def test_enhance_brightens_tube_only():
    img, tube = tube_phantom()
    out = enhance_vessels(V(img)).values
    assert out[tube].mean() > img[tube].mean()
    # background well away from the tube
    _, y, z = np.meshgrid(*(np.arange(24),) * 3, indexing="ij")
    far = (y - 12) ** 2 + (z - 12) ** 2 >= 49
    assert abs(out[far].mean() - img[far].mean()) < 0.01


def test_pipeline_range_and_determinism():
    rng = np.random.default_rng(2)
    v = rng.random((12, 12, 12)) * 400 - 100
    keep = LabelMask.from_array(rng.random((12, 12, 12)) < 0.8)
    a = preprocess(V(v), keep).values
    b = preprocess(V(v), keep).values
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert np.array_equal(a, b)


@pytest.mark.parametrize("kw", [dict(median_window=2), dict(median_window=0), dict(gain=-1.0),
                                dict(clip_percentile=60.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        PreprocessConfig(**kw)
