import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage as ndi

from oracles import edt_brute, surface_brute
from structreg.structures import (
    EmptyMaskError, VoxelSet, centerline_weights, distance_map, extract_surface,
)
from structreg.volume import GridGeometry, LabelMask, ScalarVolume


def mask_of(arr, spacing=(1.0, 1.0, 1.0)):
    return LabelMask.from_array(np.asarray(arr, bool), spacing)


def test_voxelset_dedups_and_rejects_outside():
    g = GridGeometry((3, 3, 3), (1.0, 1.0, 1.0))
    vs = VoxelSet(g, [[1, 1, 1], [0, 0, 0], [1, 1, 1]])
    assert len(vs) == 2
    assert vs.to_mask().count == 2
    with pytest.raises(ValueError):
        VoxelSet(g, [[3, 0, 0]])


def test_surface_single_voxel():
    m = np.zeros((5, 5, 5), bool)
    m[2, 2, 2] = True
    s = extract_surface(mask_of(m))
    assert s.indices.tolist() == [[2, 2, 2]]


def test_surface_cube_shell():
    m = np.zeros((7, 7, 7), bool)
    m[1:6, 1:6, 1:6] = True
    s = extract_surface(mask_of(m))
    assert len(s) == 98
    interior = m & ~s.to_mask().values
    assert np.array_equal(interior, ndi.binary_erosion(m))


def test_surface_full_grid_is_faces():
    m = np.ones((4, 5, 6), bool)
    s = extract_surface(mask_of(m)).to_mask().values
    faces = np.zeros_like(m)
    faces[[0, -1]] = faces[:, [0, -1]] = faces[:, :, [0, -1]] = True
    assert np.array_equal(s, faces)


def test_surface_empty_raises():
    with pytest.raises(EmptyMaskError):
        extract_surface(mask_of(np.zeros((3, 3, 3))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_surface_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((6, 7, 5)) < 0.6
    m[0, 0, 0] = True
    s = extract_surface(mask_of(m)).to_mask().values
    assert np.array_equal(s, surface_brute(m))


def test_distance_trivial():
    assert not distance_map(mask_of(np.zeros((4, 4, 4)))).values.any()
    m = np.zeros((5, 5, 5), bool)
    m[2, 2, 2] = True
    assert distance_map(mask_of(m)).values[2, 2, 2] == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([(1.0, 1.0, 1.0), (0.7, 0.8, 2.5), (1.5, 0.5, 1.0)]))
def test_distance_matches_brute_force(seed, spacing):
    rng = np.random.default_rng(seed)
    dims = tuple(rng.integers(3, 10, size=3))
    m = rng.random(dims) < rng.uniform(0.5, 0.95)
    dm = distance_map(mask_of(m, spacing)).values
    assert np.array_equal(dm, edt_brute(m, spacing))


def test_distance_lipschitz_and_background_zero():
    rng = np.random.default_rng(3)
    m = ndi.binary_dilation(rng.random((12, 12, 12)) < 0.05, iterations=2)
    dm = distance_map(mask_of(m, (0.8, 0.8, 1.5))).values
    assert (dm[~m] == 0).all() and (dm[m] > 0).all()
    for ax, s in enumerate((0.8, 0.8, 1.5)):
        assert np.abs(np.diff(dm, axis=ax)).max() <= s + 1e-12


def test_centerline_weights_formula():
    g = GridGeometry((3, 3, 3), (1.0, 1.0, 1.0))
    dm = np.zeros((3, 3, 3))
    dm[1, 1, 1] = 1.0
    wc = centerline_weights(VoxelSet(g, [[0, 0, 0], [1, 1, 1]]), ScalarVolume(g, dm))
    assert wc.weights[0] == 1.0
    assert wc.weights[1] == pytest.approx(0.36788, abs=1e-5)


def test_branch_weights_exceed_trunk_core():
    dims = (40, 24, 24)
    x, y, z = np.meshgrid(*(np.arange(n) for n in dims), indexing="ij")
    trunk = (y - 8) ** 2 + (z - 12) ** 2 <= 4.5 ** 2
    branch = ((x - 25) ** 2 + (z - 12) ** 2 <= 1.2 ** 2) & (y > 12)
    m = mask_of(trunk | branch)
    dm = distance_map(m)
    core = VoxelSet(m.geometry, np.argwhere(trunk & ((y - 8) ** 2 + (z - 12) ** 2 <= 1) & (x > 5) & (x < 34)))
    thin = VoxelSet(m.geometry, np.argwhere(branch & (y > 15)))
    w_core = centerline_weights(core, dm).weights
    w_thin = centerline_weights(thin, dm).weights
    assert w_thin.min() > w_core.max()
    # weights decrease with distance
    d = dm.values[tuple(thin.indices.T)]
    order = np.argsort(d)
    assert np.all(np.diff(w_thin[order]) <= 0)
