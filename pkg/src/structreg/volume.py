"""Grid types, trilinear sampling, warping, field composition/inversion and
Jacobian analysis.

Arrays are indexed ``[x, y, z]``; flattening with ``order="F"`` gives the
x-fastest linear layout used on disk. Displacement fields are stored as
``(3, nx, ny, nz)`` arrays in voxel units, encoding ``phi(p) = p + u(p)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numba
import numpy as np


class GeometryError(ValueError):
    """Raised when inputs that must share a grid do not."""


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GridGeometry:
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise ValueError("geometry needs three dims and three spacings")
        if min(dims) < 1:
            raise ValueError(f"dims must be >= 1, got {dims}")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values, np.float64)
        if values.shape != self.geometry.dims:
            raise GeometryError(f"values shape {values.shape} != dims {self.geometry.dims}")
        if not np.all(np.isfinite(values)):
            raise ValueError("volume values must be finite")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, values, spacing=(1.0, 1.0, 1.0)) -> "ScalarVolume":
        values = np.asarray(values)
        return cls(GridGeometry(values.shape, spacing), values)


@dataclass(frozen=True, eq=False)
class LabelMask:
    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values, bool)
        if values.shape != self.geometry.dims:
            raise GeometryError(f"mask shape {values.shape} != dims {self.geometry.dims}")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, values, spacing=(1.0, 1.0, 1.0)) -> "LabelMask":
        values = np.asarray(values)
        return cls(GridGeometry(values.shape, spacing), values)

    @property
    def count(self) -> int:
        return int(self.values.sum())


@dataclass(frozen=True, eq=False)
class DisplacementField:
    geometry: GridGeometry
    vectors: np.ndarray

    def __post_init__(self):
        vectors = _frozen(self.vectors, np.float64)
        if vectors.shape != (3,) + self.geometry.dims:
            raise GeometryError(
                f"field shape {vectors.shape} != (3,) + {self.geometry.dims}")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("field components must be finite")
        object.__setattr__(self, "vectors", vectors)

    @classmethod
    def zeros(cls, geometry: GridGeometry) -> "DisplacementField":
        return cls(geometry, np.zeros((3,) + geometry.dims))

    @classmethod
    def constant(cls, geometry: GridGeometry, t) -> "DisplacementField":
        t = np.asarray(t, dtype=np.float64).reshape(3, 1, 1, 1)
        return cls(geometry, np.broadcast_to(t, (3,) + geometry.dims))


def check_geometry(*items):
    """Raise GeometryError unless every item carries the same geometry."""
    geoms = [it.geometry for it in items if it is not None]
    for g in geoms[1:]:
        if g != geoms[0]:
            raise GeometryError(f"geometry mismatch: {geoms[0]} vs {g}")
    return geoms[0] if geoms else None


def identity_grid(dims) -> np.ndarray:
    """Voxel coordinates as a ``(3,) + dims`` float array."""
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims),
                                indexing="ij"))


@numba.njit(cache=True)
def _tri_sample(flat, base, step, fr):
    k, m = flat.shape[0], base.shape[0]
    out = np.empty((k, m))
    sx, sy, sz = step[0], step[1], step[2]
    for j in range(m):
        b = base[j]
        fx, fy, fz = fr[0, j], fr[1, j], fr[2, j]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        for q in range(k):
            f = flat[q]
            c00 = gx * f[b] + fx * f[b + sx]
            c10 = gx * f[b + sy] + fx * f[b + sx + sy]
            c01 = gx * f[b + sz] + fx * f[b + sx + sz]
            c11 = gx * f[b + sy + sz] + fx * f[b + sx + sy + sz]
            out[q, j] = gz * (gy * c00 + fy * c10) + fz * (gy * c01 + fy * c11)
    return out


@numba.njit(cache=True)
def _tri_derivative(flat, base, step, fr, live):
    k, m = flat.shape[0], base.shape[0]
    out = np.zeros((k, 3, m))
    sx, sy, sz = step[0], step[1], step[2]
    for j in range(m):
        b = base[j]
        fx, fy, fz = fr[0, j], fr[1, j], fr[2, j]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        for q in range(k):
            f = flat[q]
            v000 = f[b]
            v100 = f[b + sx]
            v010 = f[b + sy]
            v110 = f[b + sx + sy]
            v001 = f[b + sz]
            v101 = f[b + sx + sz]
            v011 = f[b + sy + sz]
            v111 = f[b + sx + sy + sz]
            if live[0, j]:
                out[q, 0, j] = (gz * (gy * (v100 - v000) + fy * (v110 - v010))
                                + fz * (gy * (v101 - v001) + fy * (v111 - v011)))
            if live[1, j]:
                out[q, 1, j] = (gz * (gx * (v010 - v000) + fx * (v110 - v100))
                                + fz * (gx * (v011 - v001) + fx * (v111 - v101)))
            if live[2, j]:
                out[q, 2, j] = (gy * (gx * (v001 - v000) + fx * (v101 - v100))
                                + fy * (gx * (v011 - v010) + fx * (v111 - v110)))
    return out


@numba.njit(cache=True)
def _tri_adjoint(values, base, step, fr, size):
    k, m = values.shape[0], base.shape[0]
    out = np.zeros((k, size))
    sx, sy, sz = step[0], step[1], step[2]
    for j in range(m):
        b = base[j]
        fx, fy, fz = fr[0, j], fr[1, j], fr[2, j]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        for q in range(k):
            v = values[q, j]
            o = out[q]
            o[b] += gx * gy * gz * v
            o[b + sx] += fx * gy * gz * v
            o[b + sy] += gx * fy * gz * v
            o[b + sx + sy] += fx * fy * gz * v
            o[b + sz] += gx * gy * fz * v
            o[b + sx + sz] += fx * gy * fz * v
            o[b + sy + sz] += gx * fy * fz * v
            o[b + sx + sy + sz] += fx * fy * fz * v
    return out


class Trilinear:
    """Precomputed trilinear stencil for a batch of sample points.

    Coordinates are clamped to ``[0, n - 1]`` per axis. The same stencil can
    sample several arrays, return spatial derivatives with respect to the
    sample coordinates, and apply its adjoint (scatter back onto the grid).
    Derivatives are zero along an axis wherever the coordinate was clamped.
    Array arguments may carry one leading batch axis.
    """

    def __init__(self, coords: np.ndarray, dims):
        coords = np.asarray(coords, dtype=np.float64)
        self.dims = tuple(int(n) for n in dims)
        self.shape = coords.shape[1:]
        m = int(np.prod(self.shape))
        nx, ny, nz = self.dims
        # C-order strides of [x, y, z]; singleton axes get a zero step
        strides = (ny * nz, nz, 1)
        base = np.zeros(m, dtype=np.int64)
        frac = np.zeros((3, m))
        live = np.zeros((3, m), dtype=np.bool_)
        step = np.zeros(3, dtype=np.int64)
        for ax in range(3):
            n = self.dims[ax]
            if n == 1:
                continue
            c = coords[ax].reshape(-1)
            cc = np.clip(c, 0.0, n - 1.0)
            i0 = np.minimum(np.floor(cc).astype(np.int64), n - 2)
            base += i0 * strides[ax]
            frac[ax] = cc - i0
            live[ax] = (c > 0.0) & (c < n - 1.0)
            step[ax] = strides[ax]
        self.base, self.frac, self.live, self.step = base, frac, live, step

    def _flat(self, arr):
        arr = np.asarray(arr, dtype=np.float64)
        single = arr.shape == self.dims
        flat = np.ascontiguousarray(arr).reshape((1 if single else arr.shape[0], -1))
        return flat, single

    def sample(self, arr: np.ndarray) -> np.ndarray:
        flat, single = self._flat(arr)
        out = _tri_sample(flat, self.base, self.step, self.frac)
        return out.reshape(self.shape) if single else out.reshape((-1,) + self.shape)

    def derivative(self, arr: np.ndarray) -> np.ndarray:
        """d(sample)/d(coordinate) as a ``(3,) + shape`` array."""
        flat, single = self._flat(arr)
        out = _tri_derivative(flat, self.base, self.step, self.frac, self.live)
        if single:
            return out.reshape((3,) + self.shape)
        return out.reshape((-1, 3) + self.shape)

    def adjoint(self, values: np.ndarray) -> np.ndarray:
        """Scatter ``values`` onto the grid with the sampling weights."""
        values = np.asarray(values, dtype=np.float64)
        single = values.shape == self.shape
        flat = np.ascontiguousarray(values).reshape((1 if single else values.shape[0], -1))
        out = _tri_adjoint(flat, self.base, self.step, self.frac, int(np.prod(self.dims)))
        return out.reshape(self.dims) if single else out.reshape((-1,) + self.dims)


def sample_trilinear(vol: ScalarVolume, point) -> float:
    """Trilinear value of ``vol`` at a continuous voxel-space point."""
    point = np.asarray(point, dtype=np.float64).reshape(3, 1)
    if not np.all(np.isfinite(point)):
        raise ValueError("point must be finite")
    return float(Trilinear(point, vol.geometry.dims).sample(vol.values)[0])


def warp_array(arr: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``arr`` resampled at ``p + u(p)`` (array-level helper)."""
    coords = identity_grid(arr.shape) + u
    return Trilinear(coords, arr.shape).sample(arr)


def warp_scalar(vol: ScalarVolume, field: DisplacementField) -> ScalarVolume:
    """I o phi: trilinear resampling of ``vol`` at p + u(p)."""
    geom = check_geometry(vol, field)
    return ScalarVolume(geom, warp_array(vol.values, field.vectors))


def warp_mask(mask: LabelMask, field: DisplacementField, mode: str = "nearest"):
    """Warp a mask; ``soft`` gives trilinear reals, ``nearest`` a LabelMask."""
    geom = check_geometry(mask, field)
    if mode == "soft":
        return ScalarVolume(geom, warp_array(mask.values.astype(np.float64), field.vectors))
    if mode != "nearest":
        raise ValueError(f"unknown warp mode {mode!r}")
    coords = identity_grid(geom.dims) + field.vectors
    idx = []
    for ax in range(3):
        # round half up so that x.5 maps deterministically
        i = np.floor(coords[ax] + 0.5).astype(np.intp)
        idx.append(np.clip(i, 0, geom.dims[ax] - 1))
    return LabelMask(geom, mask.values[idx[0], idx[1], idx[2]])


def compose_arrays(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    coords = identity_grid(inner.shape[1:]) + inner
    tri = Trilinear(coords, inner.shape[1:])
    return inner + np.stack([tri.sample(outer[k]) for k in range(3)])


def compose(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Field of phi_outer o phi_inner."""
    geom = check_geometry(outer, inner)
    return DisplacementField(geom, compose_arrays(outer.vectors, inner.vectors))


def invert_array(u: np.ndarray, max_iters: int = 50, tol: float = 1e-3,
                 step: float = 1.0):
    """Fixed-point inverse of a displacement array; returns (inverse, residual)."""
    dims = u.shape[1:]
    grid = identity_grid(dims)
    inv = np.zeros_like(u)
    best, best_res = inv, np.inf
    for _ in range(max_iters):
        tri = Trilinear(grid + inv, dims)
        target = -np.stack([tri.sample(u[k]) for k in range(3)])
        update = target - inv
        # |update| is the composition residual of the current iterate
        res = float(np.sqrt((update ** 2).sum(axis=0)).max()) if update.size else 0.0
        if res < best_res:
            best, best_res = inv, res
        if res < tol:
            break
        inv = inv + step * update
    return best, best_res


def invert_field(field: DisplacementField, max_iters: int = 50, tol: float = 1e-3,
                 step: float = 1.0):
    """Approximate phi^-1 by fixed-point iteration.

    Returns ``(inverse, residual)`` where ``residual`` is the max voxel norm of
    ``compose(field, inverse)`` for the returned iterate.
    """
    inv, res = invert_array(field.vectors, max_iters, tol, step)
    return DisplacementField(field.geometry, inv), res


def jacobian_array(u: np.ndarray) -> np.ndarray:
    dims = u.shape[1:]
    if min(dims) < 2:
        raise ValueError("jacobian needs at least 2 voxels per axis")
    # J[i][j] = d phi_i / d x_j
    J = [[None] * 3 for _ in range(3)]
    for i in range(3):
        grads = np.gradient(u[i], axis=(0, 1, 2), edge_order=1)
        for j in range(3):
            J[i][j] = grads[j] + (1.0 if i == j else 0.0)
    return (J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1])
            - J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0])
            + J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]))


def jacobian_determinant(field: DisplacementField) -> ScalarVolume:
    """Per-voxel det(I + grad u), central differences inside, one-sided on faces."""
    return ScalarVolume(field.geometry, jacobian_array(field.vectors))
