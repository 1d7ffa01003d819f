import numpy as np
import pytest

from structreg.metrics import dsc_hard, rfp
from structreg.phantom import PhantomError, PhantomSpec, generate, ground_truth_error
from structreg.structures import distance_array
from structreg.volume import DisplacementField, LabelMask, warp_mask


def test_same_seed_bit_identical(small_spec):
    a = generate(small_spec(seed=4))
    b = generate(small_spec(seed=4))
    for name in ("fixed", "moving"):
        assert getattr(a, name).values.tobytes() == getattr(b, name).values.tobytes()
    assert np.array_equal(a.truth.vectors, b.truth.vectors)
    c = generate(small_spec(seed=5))
    assert not np.array_equal(a.moving.values, c.moving.values)


def test_zero_displacement(small_spec):
    p = generate(small_spec(max_displacement=0.0))
    assert not p.truth.vectors.any()
    assert p.fixed.geometry == p.moving.geometry
    assert np.array_equal(p.liver_fixed.values, p.liver_moving.values)
    assert np.array_equal(p.artery_fixed.values, p.artery_moving.values)


def test_default_spec_invariants():
    spec = PhantomSpec(seed=1)
    p = generate(spec)
    assert p.fixed.geometry.dims == (64, 64, 64)
    assert rfp(p.truth) == 0.0
    mag = np.sqrt((p.truth.vectors ** 2).sum(axis=0))
    assert mag.max() == pytest.approx(spec.max_displacement)
    # clearance between the two trees in the moving frame, by distance transform
    dist = distance_array(~p.artery_moving.values, spec.spacing)
    assert dist[p.vein_moving.values].min() >= spec.clearance
    assert not (p.artery_moving.values & p.vein_moving.values).any()
    assert not (p.artery_fixed.values & p.vein_fixed.values).any()


@pytest.mark.parametrize("seed", [0, 7])
def test_liver_masks_related_by_truth(small_spec, seed):
    p = generate(small_spec(seed=seed))
    warped = warp_mask(p.liver_moving, p.truth, "nearest").values
    diff = warped ^ p.liver_fixed.values
    # differences only in a one-voxel band around the boundary
    band = distance_array(p.liver_fixed.values, (1, 1, 1)) <= 1.0
    band |= distance_array(~p.liver_fixed.values, (1, 1, 1)) <= 1.0
    assert not (diff & ~band).any()
    assert dsc_hard(LabelMask(p.liver_fixed.geometry, warped), p.liver_fixed) > 97


def test_contrast_model(small_spec):
    p = generate(small_spec(seed=2))
    a, v = p.artery_moving.values, p.vein_fixed.values
    liver_m = p.liver_moving.values & ~a & ~p.vein_moving.values
    assert p.moving.values[a].mean() > p.moving.values[liver_m].mean()
    liver_f = p.liver_fixed.values & ~v & ~p.artery_fixed.values
    assert p.fixed.values[v].mean() > p.fixed.values[liver_f].mean()
    assert p.moving.values.min() >= 0 and p.fixed.values.max() <= 1


def test_unsatisfiable_clearance(small_spec):
    with pytest.raises(PhantomError):
        generate(small_spec(clearance=30.0, max_tries=3))


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(max_displacement=5.0, bump_sigma=10.0)
    with pytest.raises(ValueError):
        PhantomSpec(clearance=-1.0)


def test_ground_truth_error(small_spec):
    p = generate(small_spec(seed=0))
    assert ground_truth_error(p.truth, p.truth, p.liver_fixed) == (0.0, 0.0, 0.0)
    shifted = DisplacementField(p.truth.geometry,
                                p.truth.vectors + np.array([1.0, 0, 0]).reshape(3, 1, 1, 1))
    assert ground_truth_error(shifted, p.truth, p.liver_fixed) == pytest.approx((1.0, 1.0, 1.0))
    rng = np.random.default_rng(0)
    u = rng.standard_normal(p.truth.vectors.shape)
    rec = DisplacementField(p.truth.geometry, u)
    err = np.linalg.norm(u - p.truth.vectors, axis=0)[p.liver_fixed.values]
    got = ground_truth_error(rec, p.truth, p.liver_fixed)
    assert got == pytest.approx((err.mean(), np.median(err), err.max()), abs=1e-12)
    with pytest.raises(ValueError):
        ground_truth_error(rec, p.truth, LabelMask(p.truth.geometry, np.zeros((32, 32, 32), bool)))
