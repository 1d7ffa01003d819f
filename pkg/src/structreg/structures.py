"""Organ surfaces, distance maps and centerline weights."""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .volume import GridGeometry, LabelMask, ScalarVolume


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class VoxelSet:
    """A set of integer voxel coordinates on a grid, stored as sorted (N, 3) rows."""

    geometry: GridGeometry
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.intp).reshape(-1, 3)
        if idx.size:
            if np.any(idx < 0) or np.any(idx >= np.array(self.geometry.dims)):
                raise ValueError("voxel index outside grid")
            idx = np.unique(idx, axis=0)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)

    @classmethod
    def from_mask(cls, mask: LabelMask) -> "VoxelSet":
        return cls(mask.geometry, np.argwhere(mask.values))

    def to_mask(self) -> LabelMask:
        out = np.zeros(self.geometry.dims, bool)
        if len(self):
            out[tuple(self.indices.T)] = True
        return LabelMask(self.geometry, out)


@dataclass(frozen=True, eq=False)
class WeightedCenterline:
    points: VoxelSet
    weights: np.ndarray


DistanceMap = ScalarVolume


def _require_nonempty(mask: LabelMask):
    if not mask.values.any():
        raise EmptyMaskError("mask has no foreground voxels")


def surface_array(m: np.ndarray) -> np.ndarray:
    """Inner boundary: foreground voxels with a 6-neighbour in the background.

    Voxels beyond the grid count as background.
    """
    p = np.pad(m.astype(bool), 1)
    core = p[1:-1, 1:-1, 1:-1]
    interior = core.copy()
    for ax in range(3):
        for shift in (-1, 1):
            interior &= np.roll(p, shift, axis=ax)[1:-1, 1:-1, 1:-1]
    return core & ~interior


def extract_surface(mask: LabelMask) -> VoxelSet:
    _require_nonempty(mask)
    return VoxelSet(mask.geometry, np.argwhere(surface_array(mask.values)))


@numba.njit(cache=True)
def _envelope_1d(f, s, out, v, z):
    # lower envelope of parabolas f[q] + ((p - q) * s)^2 (Felzenszwalb-Huttenlocher);
    # f must be finite
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        xq = q * s
        while True:
            xr = v[k] * s
            inter = ((f[q] + xq * xq) - (f[v[k]] + xr * xr)) / (2.0 * (xq - xr))
            if inter <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = inter
        z[k + 1] = np.inf
    k = 0
    for p in range(n):
        while z[k + 1] < p * s:
            k += 1
        d = (p - v[k]) * s
        out[p] = f[v[k]] + d * d


@numba.njit(cache=True)
def _first_pass(m, s):
    # squared distance along x to the nearest background voxel on the same line
    nx, ny, nz = m.shape
    out = np.empty(m.shape)
    big = nx + 1
    for j in range(ny):
        for k in range(nz):
            run = big
            for i in range(nx):
                run = 0 if not m[i, j, k] else min(run + 1, big)
                out[i, j, k] = run
            run = big
            for i in range(nx - 1, -1, -1):
                run = 0 if not m[i, j, k] else min(run + 1, big)
                d = min(out[i, j, k], run) * s
                out[i, j, k] = d * d
    return out


@numba.njit(cache=True)
def _edt_pass(vol, s, axis):
    nx, ny, nz = vol.shape
    n = vol.shape[axis]
    out = np.empty_like(vol)
    f = np.empty(n)
    g = np.empty(n)
    v = np.empty(n, np.int64)
    z = np.empty(n + 1)
    if axis == 1:
        for i in range(nx):
            for k in range(nz):
                for j in range(ny):
                    f[j] = vol[i, j, k]
                _envelope_1d(f, s, g, v, z)
                for j in range(ny):
                    out[i, j, k] = g[j]
    else:
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    f[k] = vol[i, j, k]
                _envelope_1d(f, s, g, v, z)
                for k in range(nz):
                    out[i, j, k] = g[k]
    return out


def distance_array(m: np.ndarray, spacing) -> np.ndarray:
    """Exact Euclidean distance (mm) from each voxel centre to the nearest
    background centre; the exterior of the grid is background."""
    p = np.pad(np.asarray(m, bool), 1)
    if not p.any():
        return np.zeros(np.shape(m))
    # padded lines have background at both ends, so pass 1 is finite
    d = _first_pass(p, float(spacing[0]))
    for ax in (1, 2):
        d = _edt_pass(d, float(spacing[ax]), ax)
    return np.sqrt(d[1:-1, 1:-1, 1:-1])


def distance_map(mask: LabelMask) -> DistanceMap:
    return ScalarVolume(mask.geometry, distance_array(mask.values, mask.geometry.spacing))


def centerline_weights(centerline: VoxelSet, dm: DistanceMap) -> WeightedCenterline:
    """w(p) = exp(-dm(p)) at every centerline voxel."""
    if centerline.geometry.dims != dm.geometry.dims:
        raise ValueError("centerline and distance map grids differ")
    if len(centerline):
        d = dm.values[tuple(centerline.indices.T)]
    else:
        d = np.zeros(0)
    w = np.exp(-d)
    w.setflags(write=False)
    return WeightedCenterline(centerline, w)
