"""Topology-preserving 3D thinning for vessel centerlines.

Directional sub-iteration thinning in the style of Lee, Kashyap and Chu:
six border directions are processed in a fixed order. A directional pass
first collects the simple border points that are not curve end points, then
re-checks simplicity and deletes them one parity subfield of the grid at a
time. Splitting by parity keeps two-voxel-wide ribbons from being eaten from
one end, which plain raster-order deletion does. Foreground
uses 26-connectivity and background 6-connectivity. A point is simple when
removing it changes neither the 26-components of the foreground nor the
6-components of the background in its neighbourhood, which is tested with
the local topological numbers T26 and T6.
"""
from __future__ import annotations

import numba
import numpy as np

from .structures import EmptyMaskError, VoxelSet
from .volume import LabelMask


def _neighbour_tables():
    offs = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)]
    idx = {o: i for i, o in enumerate(offs)}
    adj26 = np.full((27, 26), -1, np.int64)
    adj6 = np.full((27, 6), -1, np.int64)
    for i, o in enumerate(offs):
        n26 = n6 = 0
        for j, q in enumerate(offs):
            if i == j:
                continue
            d = [abs(q[t] - o[t]) for t in range(3)]
            if max(d) == 1:
                adj26[i, n26] = j
                n26 += 1
                if sum(d) == 1:
                    adj6[i, n6] = j
                    n6 += 1
    n18 = np.array([sum(abs(t) for t in o) <= 2 and o != (0, 0, 0) for o in offs])
    face = np.array([idx[o] for o in offs if sum(abs(t) for t in o) == 1], np.int64)
    return adj26, adj6, n18, face


_ADJ26, _ADJ6, _N18, _FACE = _neighbour_tables()
_CENTER = 13
# border directions in processing order: -y, +y, +x, -x, +z, -z
_DIRECTIONS = np.array([(0, -1, 0), (0, 1, 0), (1, 0, 0), (-1, 0, 0), (0, 0, 1), (0, 0, -1)],
                       np.int64)


@numba.njit(cache=True)
def _load(img, x, y, z, nb):
    t = 0
    for a in range(-1, 2):
        for b in range(-1, 2):
            for c in range(-1, 2):
                nb[t] = img[x + a, y + b, z + c]
                t += 1


@numba.njit(cache=True)
def _is_simple(nb, adj26, adj6, n18, face, label, stack):
    # T26: 26-components of foreground in N26 minus the centre
    for i in range(27):
        label[i] = 0
    ncomp = 0
    for s in range(27):
        if s == 13 or nb[s] == 0 or label[s] != 0:
            continue
        ncomp += 1
        if ncomp > 1:
            return False
        top = 0
        stack[top] = s
        label[s] = 1
        while top >= 0:
            cur = stack[top]
            top -= 1
            for t in range(26):
                j = adj26[cur, t]
                if j < 0:
                    break
                if j != 13 and nb[j] != 0 and label[j] == 0:
                    label[j] = 1
                    top += 1
                    stack[top] = j
    if ncomp != 1:
        return False
    # T6: 6-components of background in N18 minus the centre that touch a face neighbour
    for i in range(27):
        label[i] = 0
    ncomp = 0
    for f in range(6):
        s = face[f]
        if nb[s] != 0 or label[s] != 0:
            continue
        ncomp += 1
        if ncomp > 1:
            return False
        top = 0
        stack[top] = s
        label[s] = 1
        while top >= 0:
            cur = stack[top]
            top -= 1
            for t in range(6):
                j = adj6[cur, t]
                if j < 0:
                    break
                if j != 13 and n18[j] and nb[j] == 0 and label[j] == 0:
                    label[j] = 1
                    top += 1
                    stack[top] = j
    return ncomp == 1


@numba.njit(cache=True)
def _end_point(nb):
    count = 0
    for t in range(27):
        count += nb[t]
    return count == 2


@numba.njit(cache=True)
def _thin(img, directions, adj26, adj6, n18, face):
    nb = np.zeros(27, np.uint8)
    label = np.zeros(27, np.int64)
    stack = np.zeros(64, np.int64)
    pts = np.argwhere(img[1:-1, 1:-1, 1:-1] != 0) + 1
    cand = np.empty((pts.shape[0], 3), np.int64)
    dele = np.empty((pts.shape[0], 3), np.int64)
    changed = True
    while changed:
        changed = False
        for d in range(6):
            dx, dy, dz = directions[d, 0], directions[d, 1], directions[d, 2]
            # border, non-end candidates are fixed at the start of the pass
            nc = 0
            for n in range(pts.shape[0]):
                x, y, z = pts[n, 0], pts[n, 1], pts[n, 2]
                if img[x, y, z] == 0 or img[x + dx, y + dy, z + dz] != 0:
                    continue
                _load(img, x, y, z, nb)
                if _end_point(nb):
                    continue
                if _is_simple(nb, adj26, adj6, n18, face, label, stack):
                    cand[nc, 0] = x
                    cand[nc, 1] = y
                    cand[nc, 2] = z
                    nc += 1
            for sub in range(8):
                px, py, pz = sub & 1, (sub >> 1) & 1, (sub >> 2) & 1
                nd = 0
                for n in range(nc):
                    x, y, z = cand[n, 0], cand[n, 1], cand[n, 2]
                    if (x & 1) != px or (y & 1) != py or (z & 1) != pz:
                        continue
                    _load(img, x, y, z, nb)
                    if _is_simple(nb, adj26, adj6, n18, face, label, stack):
                        dele[nd, 0] = x
                        dele[nd, 1] = y
                        dele[nd, 2] = z
                        nd += 1
                # same-parity voxels are never 26-adjacent: deleting them one by one
                # or all at once gives the same result
                for n in range(nd):
                    img[dele[n, 0], dele[n, 1], dele[n, 2]] = 0
                    changed = True
        if changed:
            keep = np.zeros(pts.shape[0], np.bool_)
            for n in range(pts.shape[0]):
                keep[n] = img[pts[n, 0], pts[n, 1], pts[n, 2]] != 0
            pts = pts[keep]
    return img


def skeletonize_array(m: np.ndarray) -> np.ndarray:
    img = np.pad(np.asarray(m, bool), 1).astype(np.uint8)
    _thin(img, _DIRECTIONS, _ADJ26, _ADJ6, _N18, _FACE)
    return img[1:-1, 1:-1, 1:-1].astype(bool)


def skeletonize(mask: LabelMask) -> VoxelSet:
    """Thin a binary mask to its curve skeleton (exterior treated as background)."""
    if not mask.values.any():
        raise EmptyMaskError("cannot skeletonize an empty mask")
    return VoxelSet(mask.geometry, np.argwhere(skeletonize_array(mask.values)))
