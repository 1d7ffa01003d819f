"""Intensity preparation: masking, [0, 1] normalisation, median filtering and
vesselness superimposition, applied in that fixed order."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage as ndi

from .vesselness import DEFAULT_SCALES, frangi_array
from .volume import LabelMask, ScalarVolume, check_geometry


@dataclass(frozen=True)
class PreprocessConfig:
    median_window: int = 3
    scales: Sequence[float] = DEFAULT_SCALES
    alpha: float = 0.5
    beta: float = 0.5
    c: Optional[float] = None
    gain: float = 1.0
    # lower/upper percentile clip applied before normalisation (None: plain min/max)
    clip_percentile: Optional[float] = None

    def __post_init__(self):
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ValueError(f"median window must be odd and >= 1, got {self.median_window}")
        if self.gain < 0:
            raise ValueError("gain must be >= 0")
        if self.clip_percentile is not None and not 0 <= self.clip_percentile < 50:
            raise ValueError("clip_percentile must lie in [0, 50)")


def apply_body_mask(vol: ScalarVolume, keep: LabelMask) -> ScalarVolume:
    """Zero every voxel outside ``keep``."""
    geom = check_geometry(vol, keep)
    return ScalarVolume(geom, np.where(keep.values, vol.values, 0.0))


def normalize_array(values, clip_percentile=None):
    v = np.asarray(values, dtype=np.float64)
    if clip_percentile:
        lo, hi = np.percentile(v, [clip_percentile, 100.0 - clip_percentile])
        v = np.clip(v, lo, hi)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    out = (v - lo) / (hi - lo)
    # guard the endpoints against rounding
    out[v == lo] = 0.0
    out[v == hi] = 1.0
    return out


def normalize_unit(vol: ScalarVolume, clip_percentile: Optional[float] = None) -> ScalarVolume:
    """Linear map of ``[min, max]`` onto ``[0, 1]``; a constant volume maps to zeros."""
    return ScalarVolume(vol.geometry, normalize_array(vol.values, clip_percentile))


def median_filter(vol: ScalarVolume, window: int = 3) -> ScalarVolume:
    """Median of the ``window``^3 neighbourhood with edge replication."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"median window must be odd and >= 1, got {window}")
    out = ndi.median_filter(vol.values, size=window, mode="nearest")
    return ScalarVolume(vol.geometry, out)


def enhance_vessels(vol: ScalarVolume, cfg: PreprocessConfig = PreprocessConfig()) -> ScalarVolume:
    """``clip(vol + gain * normalize(vesselness(vol)), 0, 1)``."""
    if cfg.gain == 0:
        return vol
    v = frangi_array(vol.values, vol.geometry.spacing, cfg.scales, cfg.alpha, cfg.beta, cfg.c)
    out = np.clip(vol.values + cfg.gain * normalize_array(v), 0.0, 1.0)
    return ScalarVolume(vol.geometry, out)


def preprocess(vol: ScalarVolume, keep: Optional[LabelMask] = None,
               cfg: PreprocessConfig = PreprocessConfig()) -> ScalarVolume:
    """Mask, normalise, median-filter, then superimpose vesselness."""
    if keep is not None:
        vol = apply_body_mask(vol, keep)
    vol = normalize_unit(vol, cfg.clip_percentile)
    vol = median_filter(vol, cfg.median_window)
    return enhance_vessels(vol, cfg)
