import numpy as np
import pytest

from oracles import flood_fill_count, random_tube_mask, skeleton_width_ok
from structreg.skeleton import skeletonize, skeletonize_array
from structreg.structures import EmptyMaskError
from structreg.volume import LabelMask


def cylinder(dims, centre_yz, radius, xr):
    x, y, z = np.meshgrid(*(np.arange(n) for n in dims), indexing="ij")
    return ((y - centre_yz[0]) ** 2 + (z - centre_yz[1]) ** 2 <= radius ** 2) & \
        (x >= xr[0]) & (x < xr[1])


def test_single_voxel_is_fixed_point():
    m = np.zeros((5, 5, 5), bool)
    m[2, 2, 2] = True
    s = skeletonize(LabelMask.from_array(m))
    assert s.indices.tolist() == [[2, 2, 2]]


def test_empty_raises():
    with pytest.raises(EmptyMaskError):
        skeletonize(LabelMask.from_array(np.zeros((3, 3, 3), bool)))


def test_cylinder_becomes_axis_curve():
    m = cylinder((26, 11, 11), (5, 5), 2, (3, 23))
    s = skeletonize_array(m)
    assert flood_fill_count(s) == 1
    assert s.sum() >= 10
    xs = np.argwhere(s)
    # one voxel per x slice along the run of the curve
    _, counts = np.unique(xs[:, 0], return_counts=True)
    assert counts.max() == 1
    assert np.abs(xs[:, 1:] - 5).max() <= 1
    assert not (s & ~m).any()


def test_two_cylinders_two_components():
    m = cylinder((24, 20, 11), (4, 5), 2, (2, 22)) | cylinder((24, 20, 11), (14, 5), 2, (2, 22))
    s = skeletonize_array(m)
    assert flood_fill_count(s) == 2


def test_solid_ball_keeps_one_point_or_curve():
    x, y, z = np.meshgrid(*(np.arange(11),) * 3, indexing="ij")
    m = (x - 5) ** 2 + (y - 5) ** 2 + (z - 5) ** 2 <= 16
    s = skeletonize_array(m)
    assert flood_fill_count(s) == 1
    assert s.sum() <= 3


def test_hollow_box_keeps_cavity():
    m = np.zeros((9, 9, 9), bool)
    m[1:8, 1:8, 1:8] = True
    m[3:6, 3:6, 3:6] = False
    s = skeletonize_array(m)
    # the enclosed cavity survives, so the background stays split in two
    from scipy import ndimage as ndi
    _, nbg = ndi.label(~np.pad(s, 1))
    assert nbg == 2


def test_random_tubes_topology_and_width():
    rng = np.random.default_rng(11)
    for _ in range(4):
        m = random_tube_mask(rng, dims=(24, 24, 24))
        s = skeletonize_array(m)
        assert flood_fill_count(s) == flood_fill_count(m)
        assert skeleton_width_ok(s)
        assert not (s & ~m).any()


def test_deterministic():
    m = random_tube_mask(np.random.default_rng(2), dims=(20, 20, 20))
    assert np.array_equal(skeletonize_array(m), skeletonize_array(m))
