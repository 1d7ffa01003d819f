"""Registration energy terms with analytic gradients.

Every term returns its value together with the gradient with respect to the
displacement field(s) it depends on. Fields are ``(3, nx, ny, nz)`` arrays in
voxel units; wrappers accept the typed containers from :mod:`structreg.volume`.
"""
from __future__ import annotations

from dataclasses import dataclass, fields as dc_fields
from typing import Optional

import numba
import numpy as np
from scipy import ndimage as ndi

from .structures import (VoxelSet, WeightedCenterline, centerline_weights, distance_map,
                         extract_surface)
from .skeleton import skeletonize
from .volume import (DisplacementField, LabelMask, ScalarVolume, Trilinear, check_geometry,
                     identity_grid)

DICE_EPS = 1e-7
NCC_EPS = 1e-5

# forward-difference directions of the 26-neighbourhood, one per +/- pair; the
# representative has its last non-zero component positive, so the xy-plane
# subset is x, y, (1, 1) and (-1, 1)
DIRECTIONS = np.array([
    (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (1, 1, 0), (-1, 1, 0), (1, 0, 1), (-1, 0, 1), (0, 1, 1), (0, -1, 1),
    (1, 1, 1), (-1, 1, 1), (1, -1, 1), (-1, -1, 1),
])


def _arr(x):
    if isinstance(x, (ScalarVolume, LabelMask)):
        return x.values.astype(np.float64)
    if isinstance(x, DisplacementField):
        return x.vectors
    return np.asarray(x, dtype=np.float64)


# --- similarity ---------------------------------------------------------------

def _box_sum(x, window):
    return ndi.uniform_filter(x, size=window, mode="constant") * float(window) ** 3


def ncc_arrays(fixed, warped, window=9):
    """(loss, d loss / d warped) for local squared NCC, or global NCC if window == 0."""
    I = np.asarray(fixed, dtype=np.float64)
    J = np.asarray(warped, dtype=np.float64)
    if I.shape != J.shape:
        raise ValueError("fixed and warped shapes differ")
    N = I.size
    if window == 0:
        Ic = I - I.mean()
        Jc = J - J.mean()
        a = float((Ic * Jc).sum())
        b = float((Ic * Ic).sum())
        c = float((Jc * Jc).sum())
        if b <= 0.0 or c <= 0.0:
            return 0.0, np.zeros_like(J)
        rb, rc = np.sqrt(b), np.sqrt(c)
        ncc = a / (rb * rc)
        grad = Ic / (rb * rc) - a * Jc / (rb * rc ** 3)
        return -ncc, -grad
    if window < 1 or window % 2 == 0:
        raise ValueError(f"NCC window must be odd and >= 1 (or 0 for global), got {window}")
    n = float(window) ** 3
    Is = _box_sum(I, window)
    Js = _box_sum(J, window)
    I2 = _box_sum(I * I, window)
    J2 = _box_sum(J * J, window)
    IJ = _box_sum(I * J, window)
    cross = IJ - Is * Js / n
    Ivar = I2 - Is * Is / n
    Jvar = J2 - Js * Js / n
    D = Ivar * Jvar + NCC_EPS
    cc = cross * cross / D
    loss = -float(cc.mean())
    dA = 2.0 * cross / D
    dC = -cross * cross * Ivar / (D * D)
    s = -1.0 / N
    g_ij = s * dA
    g_js = s * (dA * (-Is / n) + dC * (-2.0 * Js / n))
    g_j2 = s * dC
    grad = _box_sum(g_ij, window) * I + _box_sum(g_js, window) + 2.0 * J * _box_sum(g_j2, window)
    return loss, grad


def ncc_loss(fixed: ScalarVolume, warped: ScalarVolume, window: int = 9):
    """Negative mean squared local NCC over ``window``^3 boxes; ``window=0`` selects
    the negative global NCC. Returns ``(loss, gradient wrt warped values)``."""
    check_geometry(fixed, warped)
    return ncc_arrays(fixed.values, warped.values, window)


# --- overlap ------------------------------------------------------------------

def dice_arrays(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inter = float((a * b).sum())
    denom = float(a.sum() + b.sum()) + DICE_EPS
    dice = 2.0 * inter / denom
    ga = 2.0 * b / denom - 2.0 * inter / denom ** 2
    gb = 2.0 * a / denom - 2.0 * inter / denom ** 2
    return dice, ga, gb


def dice_soft(a, b):
    """Soft Dice ``2 sum(ab) / (sum a + sum b + eps)`` with gradients to both inputs."""
    return dice_arrays(_arr(a), _arr(b))


def _mask_term(fixed_mask, moving_mask, u, sign, tri=None):
    S_F = _arr(fixed_mask)
    S_M = _arr(moving_mask)
    if tri is None:
        tri = Trilinear(identity_grid(S_M.shape) + u, S_M.shape)
    warped = tri.sample(S_M)
    dice, _, gw = dice_arrays(S_F, warped)
    grad = sign * gw[None] * tri.derivative(S_M)
    return sign * dice, grad


def overlap_loss(S_F: LabelMask, S_M: LabelMask, field: DisplacementField):
    """-Dice(S_F, S_M o phi) with soft warping; gradient wrt the field."""
    check_geometry(S_F, S_M, field)
    return _mask_term(S_F, S_M, field.vectors, -1.0)


def nonoverlap_loss(S_F: LabelMask, S_M: LabelMask, field: DisplacementField):
    """+Dice between unpaired masks; minimising it pushes the structures apart."""
    check_geometry(S_F, S_M, field)
    return _mask_term(S_F, S_M, field.vectors, 1.0)


# --- regularisers -------------------------------------------------------------

def smoothness_array(u):
    u = np.asarray(u, dtype=np.float64)
    if min(u.shape[1:]) < 2:
        raise ValueError("smoothness needs at least 2 voxels per axis")
    value = 0.0
    grad = np.zeros_like(u)
    for ax in (1, 2, 3):
        d = np.diff(u, axis=ax)
        value += float((d * d).sum())
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[ax] = slice(1, None)
        lo[ax] = slice(None, -1)
        grad[tuple(hi)] += 2.0 * d
        grad[tuple(lo)] -= 2.0 * d
    return value, grad


def smoothness(field: DisplacementField):
    """Sum over voxels of squared forward differences of u along x, y and z."""
    return smoothness_array(field.vectors)


def direction_lengths(spacing):
    sp = np.asarray(spacing, dtype=np.float64)
    return np.sqrt(((DIRECTIONS * sp) ** 2).sum(axis=1))


@numba.njit(cache=True)
def _directional_kernel(u, pts, dirs, lengths, w):
    nx, ny, nz = u.shape[1], u.shape[2], u.shape[3]
    values = np.zeros(pts.shape[0])
    grad = np.zeros(u.shape)
    for j in range(pts.shape[0]):
        x, y, z = pts[j, 0], pts[j, 1], pts[j, 2]
        for d in range(dirs.shape[0]):
            qx, qy, qz = x + dirs[d, 0], y + dirs[d, 1], z + dirs[d, 2]
            if qx < 0 or qy < 0 or qz < 0 or qx >= nx or qy >= ny or qz >= nz:
                continue
            L = lengths[d]
            for k in range(3):
                delta = (u[k, qx, qy, qz] - u[k, x, y, z]) / L
                values[j] += delta * delta
                c = 2.0 * w[j] * delta / L
                grad[k, qx, qy, qz] += c
                grad[k, x, y, z] -= c
    return values, grad


def directional_arrays(u, points, spacing, weights=None):
    """Per-point sum over the 13 directions of |du / step|^2, and the gradient of
    ``sum(weights * values)`` with respect to ``u``."""
    u = np.ascontiguousarray(u, dtype=np.float64)
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 3)
    w = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=np.float64)
    return _directional_kernel(u, pts, DIRECTIONS.astype(np.int64), direction_lengths(spacing), w)


def directional_gradient_sq(field: DisplacementField, points: VoxelSet, weights=None):
    """|grad' u(p)|^2 at each point: 3 axial, 6 face-diagonal and 4 body-diagonal
    forward differences, each divided by its physical step length. Neighbours
    outside the grid contribute nothing."""
    check_geometry(field, points)
    return directional_arrays(field.vectors, points.indices, field.geometry.spacing, weights)


def surface_constraint(field: DisplacementField, surface: VoxelSet):
    """Sum of directional_gradient_sq over surface points."""
    vals, grad = directional_gradient_sq(field, surface)
    return float(vals.sum()), grad


def centerline_constraint(field: DisplacementField, wc: WeightedCenterline):
    """Sum over centerline points of w(p) |grad' u(p)|^2."""
    vals, grad = directional_gradient_sq(field, wc.points, wc.weights)
    return float((wc.weights * vals).sum()), grad


# --- inverse consistency ------------------------------------------------------

def _ic_half(ua, ub, tri=None):
    # mean |ua(p) + ub(p + ua(p))|^2 with gradients to ua and ub
    dims = ua.shape[1:]
    N = float(np.prod(dims))
    if tri is None:
        tri = Trilinear(identity_grid(dims) + ua, dims)
    r = ua + tri.sample(ub)
    value = float((r * r).sum()) / N
    coef = 2.0 * r / N
    ga = coef + np.einsum("i...,ij...->j...", coef, tri.derivative(ub))
    gb = tri.adjoint(coef)
    return value, ga, gb


def ic_arrays(uf, ub, tri_f=None, tri_b=None):
    v1, gf1, gb1 = _ic_half(uf, ub, tri_f)
    v2, gb2, gf2 = _ic_half(ub, uf, tri_b)
    return v1 + v2, gf1 + gf2, gb1 + gb2


def inverse_consistency_loss(fwd: DisplacementField, bwd: DisplacementField):
    """mean |phi_b(phi_f(p)) - p|^2 + mean |phi_f(phi_b(p)) - p|^2, with gradients
    ``(value, grad_fwd, grad_bwd)``."""
    check_geometry(fwd, bwd)
    return ic_arrays(fwd.vectors, bwd.vectors)


# --- total energy -------------------------------------------------------------

@dataclass(frozen=True)
class EnergyWeights:
    """Weights of the total loss. ``inverse_consistency`` is an extension; zero
    recovers the six-group energy exactly."""

    overlap: float = 5.0
    nonoverlap: float = 4.0
    smoothness: float = 1.0
    surface: float = 0.5
    centerline: float = 1.0
    inverse_consistency: float = 1.0

    def __post_init__(self):
        for f in dc_fields(self):
            v = float(getattr(self, f.name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"weight {f.name} must be a non-negative number, got {v}")
            object.__setattr__(self, f.name, v)


TERM_NAMES = ("sim", "seg_l", "seg_v", "reg", "ireg", "s", "is", "v", "iv", "ic")


@dataclass(frozen=True)
class EnergyBreakdown:
    """Per-term values as they enter the total.

    ``reg``/``ireg`` are means over voxels, field components and the three axes
    (the raw sums divided by ``9 N``); the structure terms are weighted sums
    divided by their point counts.
    """

    sim: float = 0.0
    seg_l: float = 0.0
    seg_v: float = 0.0
    reg: float = 0.0
    ireg: float = 0.0
    s: float = 0.0
    is_: float = 0.0
    v: float = 0.0
    iv: float = 0.0
    ic: float = 0.0
    total: float = 0.0

    def terms(self) -> dict:
        return {name: getattr(self, "is_" if name == "is" else name) for name in TERM_NAMES}

    def as_dict(self) -> dict:
        d = self.terms()
        d["total"] = self.total
        return d

    def recompute_total(self, w: EnergyWeights) -> float:
        return (self.sim + w.overlap * self.seg_l + w.nonoverlap * self.seg_v
                + w.smoothness * (self.reg + self.ireg)
                + w.surface * (self.s + self.is_)
                + w.centerline * (self.v + self.iv)
                + w.inverse_consistency * self.ic)


@dataclass(frozen=True, eq=False)
class ImagePair:
    """Fixed/moving images with optional paired organ masks and unpaired vessel masks."""

    fixed: ScalarVolume
    moving: ScalarVolume
    liver_fixed: Optional[LabelMask] = None
    liver_moving: Optional[LabelMask] = None
    vessel_fixed: Optional[LabelMask] = None
    vessel_moving: Optional[LabelMask] = None

    def __post_init__(self):
        check_geometry(self.fixed, self.moving, self.liver_fixed, self.liver_moving,
                       self.vessel_fixed, self.vessel_moving)

    @property
    def geometry(self):
        return self.fixed.geometry


@dataclass(frozen=True, eq=False)
class StructureSet:
    """Organ surfaces and weighted vessel centerlines on both sides of a pair."""

    surface_fixed: Optional[VoxelSet] = None
    surface_moving: Optional[VoxelSet] = None
    centerline_fixed: Optional[WeightedCenterline] = None
    centerline_moving: Optional[WeightedCenterline] = None

    @classmethod
    def extract(cls, pair: ImagePair) -> "StructureSet":
        def surf(m):
            return extract_surface(m) if m is not None and m.values.any() else None

        def line(m):
            if m is None or not m.values.any():
                return None
            return centerline_weights(skeletonize(m), distance_map(m))

        return cls(surf(pair.liver_fixed), surf(pair.liver_moving),
                   line(pair.vessel_fixed), line(pair.vessel_moving))


def _weighted_mean_directional(u, pts, weights, spacing):
    if pts is None or not len(pts):
        return 0.0, None
    vals, grad = directional_arrays(u, pts, spacing, weights)
    n = float(len(pts))
    w = np.ones(len(vals)) if weights is None else weights
    return float((w * vals).sum()) / n, grad / n


def total_energy_arrays(pair: ImagePair, uf, ub, structures: StructureSet,
                        weights: EnergyWeights, window: int = 9):
    """(EnergyBreakdown, grad_fwd, grad_bwd) for raw field arrays."""
    geom = pair.geometry
    dims = geom.dims
    # reg/ireg: mean over voxels, components and axes of the squared differences
    N = 9.0 * float(geom.size)
    grid = identity_grid(dims)
    tri_f = Trilinear(grid + uf, dims)
    gf = np.zeros_like(uf)
    gb = np.zeros_like(ub)
    parts = {}

    I_M = pair.moving.values
    sim, g_w = ncc_arrays(pair.fixed.values, tri_f.sample(I_M), window)
    gf += g_w[None] * tri_f.derivative(I_M)
    parts["sim"] = sim

    if weights.overlap and pair.liver_fixed is not None and pair.liver_moving is not None:
        val, g = _mask_term(pair.liver_fixed, pair.liver_moving, uf, -1.0, tri_f)
        parts["seg_l"] = val
        gf += weights.overlap * g
    if weights.nonoverlap and pair.vessel_fixed is not None and pair.vessel_moving is not None:
        val, g = _mask_term(pair.vessel_fixed, pair.vessel_moving, uf, 1.0, tri_f)
        parts["seg_v"] = val
        gf += weights.nonoverlap * g

    if weights.smoothness:
        val, g = smoothness_array(uf)
        parts["reg"] = val / N
        gf += (weights.smoothness / N) * g
        val, g = smoothness_array(ub)
        parts["ireg"] = val / N
        gb += (weights.smoothness / N) * g

    sp = geom.spacing
    if weights.surface:
        for key, u, g_acc, vs in (("s", uf, gf, structures.surface_fixed),
                                  ("is_", ub, gb, structures.surface_moving)):
            val, g = _weighted_mean_directional(u, None if vs is None else vs.indices, None, sp)
            parts[key] = val
            if g is not None:
                g_acc += weights.surface * g
    if weights.centerline:
        for key, u, g_acc, wc in (("v", uf, gf, structures.centerline_fixed),
                                  ("iv", ub, gb, structures.centerline_moving)):
            if wc is None:
                continue
            val, g = _weighted_mean_directional(u, wc.points.indices, wc.weights, sp)
            parts[key] = val
            if g is not None:
                g_acc += weights.centerline * g

    if weights.inverse_consistency:
        val, g1, g2 = ic_arrays(uf, ub, tri_f, None)
        parts["ic"] = val
        gf += weights.inverse_consistency * g1
        gb += weights.inverse_consistency * g2

    br = EnergyBreakdown(**parts)
    br = EnergyBreakdown(**{**parts, "total": br.recompute_total(weights)})
    return br, gf, gb


def total_energy(pair: ImagePair, fwd: DisplacementField, bwd: DisplacementField,
                 structures: Optional[StructureSet] = None,
                 weights: EnergyWeights = EnergyWeights(), window: int = 9):
    """Total loss over both fields; terms with absent inputs contribute zero."""
    check_geometry(pair.fixed, fwd, bwd)
    if structures is None:
        structures = StructureSet()
    return total_energy_arrays(pair, fwd.vectors, bwd.vectors, structures, weights, window)
