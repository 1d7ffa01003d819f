"""Evaluation metrics over hard masks and deformation fields."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np
from scipy import ndimage as ndi
from scipy.spatial import cKDTree

from .structures import EmptyMaskError, surface_array
from .volume import DisplacementField, LabelMask, check_geometry, jacobian_array, warp_mask


def _vals(m):
    return m.values if isinstance(m, LabelMask) else np.asarray(m, bool)


def dsc_hard(a: LabelMask, b: LabelMask) -> float:
    """Dice overlap in percent; 100 when both masks are empty."""
    A, B = _vals(a), _vals(b)
    if A.shape != B.shape:
        raise ValueError("mask shapes differ")
    total = int(A.sum()) + int(B.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int((A & B).sum()) / total


def ravd(a: LabelMask, b: LabelMask) -> float:
    """Relative absolute volume difference of ``a`` against reference ``b``, percent."""
    A, B = _vals(a), _vals(b)
    nb = int(B.sum())
    if nb == 0:
        raise EmptyMaskError("reference mask is empty")
    return 100.0 * abs(int(A.sum()) - nb) / nb


def surface_points(m: np.ndarray, spacing) -> np.ndarray:
    return np.argwhere(surface_array(m)) * np.asarray(spacing, dtype=np.float64)


def surface_distances(a: LabelMask, b: LabelMask):
    """(ASSD, MSSD) in mm between the boundary voxels of two masks."""
    geom = check_geometry(a, b)
    if not a.values.any() or not b.values.any():
        raise EmptyMaskError("surface distances need two non-empty masks")
    pa = surface_points(a.values, geom.spacing)
    pb = surface_points(b.values, geom.spacing)
    dab, _ = cKDTree(pb).query(pa)
    dba, _ = cKDTree(pa).query(pb)
    assd = (dab.sum() + dba.sum()) / (len(dab) + len(dba))
    mssd = max(dab.max(), dba.max())
    return float(assd), float(mssd)


def connected_regions(mask: LabelMask) -> int:
    """Number of 26-connected foreground components."""
    _, n = ndi.label(_vals(mask), structure=np.ones((3, 3, 3), bool))
    return int(n)


def rfp(field: DisplacementField) -> float:
    """Percentage of voxels whose Jacobian determinant is <= 0."""
    det = jacobian_array(field.vectors)
    return 100.0 * float((det <= 0).sum()) / det.size


@dataclass
class MetricsReport:
    liver_dsc: Optional[float] = None
    liver_ravd: Optional[float] = None
    liver_assd: Optional[float] = None
    liver_mssd: Optional[float] = None
    vessel_dsc: Optional[float] = None
    vessel_regions: Optional[int] = None
    field_rfp: Optional[float] = None
    truth_mean: Optional[float] = None
    truth_median: Optional[float] = None
    truth_max: Optional[float] = None

    _KEYS = {
        "liver_dsc": "liver.dsc", "liver_ravd": "liver.ravd", "liver_assd": "liver.assd",
        "liver_mssd": "liver.mssd", "vessel_dsc": "vessel.dsc",
        "vessel_regions": "vessel.connected_regions", "field_rfp": "field.rfp",
        "truth_mean": "truth.mean_error", "truth_median": "truth.median_error",
        "truth_max": "truth.max_error",
    }

    def as_flat(self) -> dict:
        """Dotted keys for the metrics that were computed, in a fixed order."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                out[self._KEYS[f.name]] = v
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "MetricsReport":
        back = {v: k for k, v in cls._KEYS.items()}
        kw = {}
        for key, value in flat.items():
            name = back[key]
            kw[name] = int(value) if name == "vessel_regions" else float(value)
        return cls(**kw)


def evaluate(field: DisplacementField, liver_fixed=None, liver_moving=None,
             vessel_fixed=None, vessel_moving=None) -> MetricsReport:
    """Warp moving masks with nearest-neighbour lookup and score them.

    Vessel DSC compares unpaired classes, so lower is better; the region count is
    taken on the warped moving vessel mask.
    """
    report = MetricsReport(field_rfp=rfp(field))
    if liver_fixed is not None and liver_moving is not None:
        warped = warp_mask(liver_moving, field, "nearest")
        report.liver_dsc = dsc_hard(warped, liver_fixed)
        report.liver_ravd = ravd(warped, liver_fixed)
        if warped.values.any():
            report.liver_assd, report.liver_mssd = surface_distances(warped, liver_fixed)
    if vessel_moving is not None:
        warped = warp_mask(vessel_moving, field, "nearest")
        report.vessel_regions = connected_regions(warped)
        if vessel_fixed is not None:
            report.vessel_dsc = dsc_hard(warped, vessel_fixed)
    return report
