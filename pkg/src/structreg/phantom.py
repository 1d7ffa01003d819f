"""Synthetic liver/vessel pairs with known deformations.

The anatomy (ellipsoidal liver, two disjoint vessel trees, smooth parenchyma
texture) is defined analytically in the moving frame. The fixed image samples
the same anatomy at ``p + u(p)`` for a smooth ground-truth field ``u``, so
``moving o (Id + u) = fixed`` up to interpolation. Arteries are bright in the
moving (arterial) phase and veins in the fixed (venous) phase; only the artery
mask is available for the moving image and only the vein mask for the fixed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy import ndimage as ndi

from .energy import ImagePair
from .structures import distance_array
from .volume import (DisplacementField, GridGeometry, LabelMask, ScalarVolume, Trilinear,
                     check_geometry, identity_grid, jacobian_array)


class PhantomError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (64, 64, 64)
    spacing: Tuple[float, float, float] = (0.8, 0.8, 1.0)
    seed: int = 0
    # liver ellipsoid semi-axes in mm and centre jitter in mm
    liver_radii: Tuple[float, float, float] = (19.0, 17.0, 21.0)
    liver_jitter: float = 1.5
    # vessel trees (radii in mm); veins follow the artery layout in a parallel plane
    branches: int = 5
    artery_radius: Tuple[float, float] = (1.4, 0.85)
    vein_radius: Tuple[float, float] = (2.0, 1.2)
    clearance: float = 0.8
    max_tries: int = 50
    # ground-truth deformation
    bumps: int = 3
    max_displacement: float = 3.0
    bump_sigma: float = 10.0
    # intensities: (moving, fixed) levels
    parenchyma: float = 0.5
    texture: float = 0.2
    texture_sigma: float = 1.0
    artery_level: Tuple[float, float] = (0.95, 0.5)
    vein_level: Tuple[float, float] = (0.5, 0.95)
    noise: float = 0.005

    def __post_init__(self):
        if self.max_displacement < 0:
            raise ValueError("max_displacement must be >= 0")
        if self.max_displacement > 0.4 * self.bump_sigma + 1e-12:
            raise ValueError("max_displacement must not exceed 0.4 * bump_sigma")
        if self.clearance < 0:
            raise ValueError("clearance must be >= 0")


@dataclass(frozen=True, eq=False)
class PhantomPair:
    fixed: ScalarVolume
    moving: ScalarVolume
    liver_fixed: LabelMask
    liver_moving: LabelMask
    vein_fixed: LabelMask
    artery_moving: LabelMask
    truth: DisplacementField
    # for evaluation only: the artery tree seen in the fixed frame
    artery_fixed: LabelMask = None
    vein_moving: LabelMask = None

    def image_pair(self, vessels: bool = True) -> ImagePair:
        return ImagePair(self.fixed, self.moving, self.liver_fixed, self.liver_moving,
                         self.vein_fixed if vessels else None,
                         self.artery_moving if vessels else None)


@dataclass
class _Tree:
    # segments as (start_mm, end_mm, radius_mm)
    segments: List[tuple] = field(default_factory=list)


def _segment_distance(points, a, b):
    ab = b - a
    t = np.clip(((points - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(points - proj, axis=-1)


def _tree_occupancy(points, tree: _Tree, edge):
    """Soft occupancy in [0, 1] and the binary mask (distance <= radius)."""
    occ = np.zeros(points.shape[:-1])
    mask = np.zeros(points.shape[:-1], bool)
    for a, b, r in tree.segments:
        d = _segment_distance(points, a, b)
        occ = np.maximum(occ, np.clip(0.5 + (r - d) / edge, 0.0, 1.0))
        mask |= d <= r
    return occ, mask


def _inside_ellipsoid(points, centre, radii):
    return (((points - centre) / radii) ** 2).sum(axis=-1)


def _random_unit(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def _tree_layout(rng, spec, centre, radii, main, normal):
    """Trunk plus side branches, all lying in the plane orthogonal to ``normal``."""
    inplane = np.cross(normal, main)
    trunk_len = 1.1 * float(radii.min())
    start = centre - 0.5 * trunk_len * main
    layout = [(0.0, 1.0, None, trunk_len)]
    for k in range(spec.branches):
        t = (k + 0.6) / (spec.branches + 0.2) + rng.uniform(-0.05, 0.05)
        side = 1.0 if k % 2 == 0 else -1.0
        angle = rng.uniform(0.6, 1.1)
        d = np.cos(angle) * main + side * np.sin(angle) * inplane
        layout.append((t, rng.uniform(9.0, 14.0), d, None))
    return start, layout


def _build_tree(spec, layout, start, main, trunk_len, r_trunk, r_branch, shift,
                centre, radii, rng=None, branch_shift=None):
    tree = _Tree()
    origin = start + shift
    end = origin + trunk_len * main
    tree.segments.append((origin, end, r_trunk))
    # branches may sit on a different offset than the trunk so that thin
    # branches run as close to their partners as the trunks do
    delta = np.zeros(3) if branch_shift is None else branch_shift - shift
    for t, length, d, _ in layout[1:]:
        root = origin + t * (end - origin) + delta
        if rng is not None:
            length *= rng.uniform(0.85, 1.15)
        tip = root + length * d
        while _inside_ellipsoid(tip, centre, radii) > 0.6 and length > 3.0:
            length *= 0.9
            tip = root + length * d
        tree.segments.append((root, tip, r_branch))
    return tree


def _bump_field(rng, spec, geom, centre_vox):
    grid = identity_grid(geom.dims)
    u = np.zeros((3,) + geom.dims)
    if spec.max_displacement == 0 or spec.bumps == 0:
        return u
    amps = []
    for _ in range(spec.bumps):
        c = centre_vox + rng.uniform(-8, 8, size=3)
        a = _random_unit(rng) * rng.uniform(0.5, 1.0)
        r2 = sum((grid[i] - c[i]) ** 2 for i in range(3))
        u += a.reshape(3, 1, 1, 1) * np.exp(-r2 / (2 * spec.bump_sigma ** 2))
        amps.append(a)
    peak = np.sqrt((u ** 2).sum(axis=0)).max()
    scale = spec.max_displacement / peak
    u *= scale
    # each bump's gradient norm is at most |a| exp(-1/2) / sigma
    bound = sum(np.linalg.norm(a) * scale for a in amps) * np.exp(-0.5) / spec.bump_sigma
    if bound >= 1.0:
        raise PhantomError(f"deformation gradient bound {bound:.3f} >= 1")
    return u


def generate(spec: PhantomSpec = PhantomSpec()) -> PhantomPair:
    """Build a deterministic phantom pair for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    geom = GridGeometry(spec.dims, spec.spacing)
    sp = np.array(spec.spacing)
    extent = (np.array(spec.dims) - 1) * sp
    centre = extent / 2 + rng.uniform(-spec.liver_jitter, spec.liver_jitter, 3)
    radii = np.array(spec.liver_radii)
    if np.any(centre - radii < 2 * sp + spec.max_displacement * sp) or \
            np.any(centre + radii > extent - 2 * sp - spec.max_displacement * sp):
        raise PhantomError("liver does not fit the grid with the requested deformation")

    grid = identity_grid(spec.dims)
    pts_moving = np.moveaxis(grid, 0, -1) * sp
    edge = float(sp.min())

    centre_vox = centre / sp
    u = _bump_field(rng, spec, geom, centre_vox)
    if spec.max_displacement > 0 and np.any(jacobian_array(u) <= 0):
        raise PhantomError("ground-truth field folds")

    # the trees lie in parallel planes; the plane normal follows the mean
    # displacement over the liver, so the deformation carries the fixed-phase
    # vein across the moving-phase artery as unpaired enhancement does in vivo
    main = _random_unit(rng)
    inside = _inside_ellipsoid(np.moveaxis(identity_grid(spec.dims), 0, -1) * sp,
                               centre, radii) <= 1.0
    drift = u[:, inside].mean(axis=1) * sp
    normal = drift - (drift @ main) * main
    if np.linalg.norm(normal) < 1e-3:
        normal = np.cross(main, _random_unit(rng))
    normal /= np.linalg.norm(normal)
    start, layout = _tree_layout(rng, spec, centre, radii, main, normal)
    trunk_len = layout[0][3]
    artery = _build_tree(spec, layout, start, main, trunk_len, *spec.artery_radius,
                         np.zeros(3), centre, radii)
    artery_occ, artery_mask = _tree_occupancy(pts_moving, artery, edge)
    if not artery_mask.any():
        raise PhantomError("artery tree is empty on this grid")
    dist_to_artery = distance_array(~artery_mask, spec.spacing)
    # the vein tree runs alongside the artery tree, each segment offset along
    # the normal by the sum of the paired radii plus the clearance
    offset_trunk = spec.artery_radius[0] + spec.vein_radius[0] + spec.clearance
    offset_branch = spec.artery_radius[1] + spec.vein_radius[1] + spec.clearance
    for attempt in range(spec.max_tries):
        along = rng.uniform(-1.0, 1.0) * main
        extra = 0.25 * attempt
        vein = _build_tree(spec, layout, start, main, trunk_len, *spec.vein_radius,
                           (offset_trunk + extra) * normal + along, centre, radii, rng,
                           branch_shift=(offset_branch + extra) * normal + along)
        vein_occ, vein_mask = _tree_occupancy(pts_moving, vein, edge)
        if vein_mask.any() and not (vein_mask & artery_mask).any() and \
                dist_to_artery[vein_mask].min() >= spec.clearance:
            break
    else:
        raise PhantomError(f"no vein tree with clearance {spec.clearance} mm "
                           f"after {spec.max_tries} tries")

    texture = ndi.gaussian_filter(rng.standard_normal(spec.dims), spec.texture_sigma,
                                mode="nearest")
    texture *= spec.texture / max(np.abs(texture).max(), 1e-12)

    pts_fixed = np.moveaxis(grid + u, 0, -1) * sp
    tex_fixed = Trilinear(grid + u, spec.dims).sample(texture)

    def image(points, tex, phase):
        q = _inside_ellipsoid(points, centre, radii)
        # soft liver edge about one voxel wide
        rmin = float(radii.min())
        liver_occ = np.clip(0.5 + (1.0 - np.sqrt(q)) * rmin / edge, 0.0, 1.0)
        a_occ, a_mask = _tree_occupancy(points, artery, edge)
        v_occ, v_mask = _tree_occupancy(points, vein, edge)
        base = spec.parenchyma + tex
        img = base.copy()
        img += a_occ * (spec.artery_level[phase] - base)
        img += v_occ * (spec.vein_level[phase] - base)
        img *= liver_occ
        return img, q <= 1.0, a_mask, v_mask

    mov, liver_m, art_m, vein_m = image(pts_moving, texture, 0)
    fix, liver_f, art_f, vein_f = image(pts_fixed, tex_fixed, 1)
    if spec.noise:
        mov = mov + spec.noise * rng.standard_normal(spec.dims)
        fix = fix + spec.noise * rng.standard_normal(spec.dims)
    mov = np.clip(mov, 0.0, 1.0)
    fix = np.clip(fix, 0.0, 1.0)
    art_m &= liver_m
    vein_m &= liver_m
    art_f &= liver_f
    vein_f &= liver_f
    if (art_m & vein_m).any() or (art_f & vein_f).any():
        raise PhantomError("artery and vein masks overlap")

    return PhantomPair(
        fixed=ScalarVolume(geom, fix), moving=ScalarVolume(geom, mov),
        liver_fixed=LabelMask(geom, liver_f), liver_moving=LabelMask(geom, liver_m),
        vein_fixed=LabelMask(geom, vein_f), artery_moving=LabelMask(geom, art_m),
        truth=DisplacementField(geom, u),
        artery_fixed=LabelMask(geom, art_f), vein_moving=LabelMask(geom, vein_m))


def ground_truth_error(recovered: DisplacementField, truth: DisplacementField,
                       roi: LabelMask):
    """(mean, median, max) endpoint error in voxels inside ``roi``."""
    check_geometry(recovered, truth, roi)
    if not roi.values.any():
        raise ValueError("empty region of interest")
    err = np.sqrt(((recovered.vectors - truth.vectors) ** 2).sum(axis=0))[roi.values]
    return float(err.mean()), float(np.median(err)), float(err.max())
