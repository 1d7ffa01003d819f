"""Multiscale Hessian vesselness for bright tubular structures (Frangi-style)."""
from __future__ import annotations

import numpy as np
from scipy import ndimage as ndi

from .volume import ScalarVolume

DEFAULT_SCALES = (1.0, 2.0, 3.0)


def hessian_eigenvalues(values: np.ndarray, sigma_mm: float, spacing) -> np.ndarray:
    """Eigenvalues of the sigma^2-normalised Hessian, sorted by magnitude.

    Derivatives are physical (per mm); the Gaussian width is ``sigma_mm`` in
    millimetres on every axis. Returns an array of shape ``dims + (3,)``.
    """
    sig = [sigma_mm / s for s in spacing]
    H = np.empty(values.shape + (3, 3))
    for i in range(3):
        for j in range(i, 3):
            order = [0, 0, 0]
            order[i] += 1
            order[j] += 1
            d = ndi.gaussian_filter(values, sig, order=order, mode="nearest")
            d *= sigma_mm ** 2 / (spacing[i] * spacing[j])
            H[..., i, j] = d
            H[..., j, i] = d
    ev = np.linalg.eigvalsh(H)
    order = np.argsort(np.abs(ev), axis=-1, kind="stable")
    return np.take_along_axis(ev, order, axis=-1)


def frangi_array(values, spacing, scales=DEFAULT_SCALES, alpha=0.5, beta=0.5, c=None):
    scales = list(scales)
    if not scales:
        raise ValueError("at least one scale is required")
    if any(not s > 0 for s in scales):
        raise ValueError(f"scales must be positive, got {scales}")
    values = np.asarray(values, dtype=np.float64)
    ptp = float(values.max() - values.min()) if values.size else 0.0
    out = np.zeros(values.shape)
    if ptp == 0.0:
        return out
    # remove the offset so that rounding in the derivative kernels cannot fake structure
    values = values - values.flat[0]
    for sigma in scales:
        ev = hessian_eigenvalues(values, sigma, spacing)
        l1, l2, l3 = ev[..., 0], ev[..., 1], ev[..., 2]
        S2 = (ev ** 2).sum(axis=-1)
        cc = 0.5 * np.sqrt(S2.max()) if c is None else float(c)
        # floor far below any real structure contrast; suppresses round-off ridges
        cc = max(cc, 1e-6 * ptp)
        a2 = np.abs(l2)
        a3 = np.abs(l3)
        with np.errstate(divide="ignore", invalid="ignore"):
            Ra2 = np.where(a3 > 0, (a2 / a3) ** 2, 0.0)
            Rb2 = np.where(a2 * a3 > 0, l1 ** 2 / (a2 * a3), np.inf)
        v = ((1.0 - np.exp(-Ra2 / (2 * alpha ** 2)))
             * np.exp(-Rb2 / (2 * beta ** 2))
             * (1.0 - np.exp(-S2 / (2 * cc ** 2))))
        v[(l2 >= 0) | (l3 >= 0)] = 0.0
        np.maximum(out, v, out=out)
    return out


def frangi_vesselness(vol: ScalarVolume, scales=DEFAULT_SCALES, alpha: float = 0.5,
                      beta: float = 0.5, c=None) -> ScalarVolume:
    """Maximum over scales (sigma in mm) of the bright-tube Frangi response.

    ``c`` defaults to half the largest Hessian Frobenius norm at each scale.
    """
    return ScalarVolume(vol.geometry,
                        frangi_array(vol.values, vol.geometry.spacing, scales, alpha, beta, c))
