"""Coarse-to-fine minimisation of the total energy over forward and backward fields."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .energy import EnergyBreakdown, EnergyWeights, ImagePair, StructureSet, total_energy_arrays
from .metrics import MetricsReport, evaluate
from .volume import (DisplacementField, GridGeometry, LabelMask, ScalarVolume, Trilinear,
                     invert_array)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RegistrationConfig:
    weights: EnergyWeights = EnergyWeights()
    levels: int = 3
    iterations: int = 200
    # Adam step in voxels of the current level; decays geometrically to
    # step_size * step_decay over a level's iteration budget
    step_size: float = 0.05
    step_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    # gradients are scaled to unit max norm per level, so eps sets the
    # gradient level below which steps shrink instead of saturating
    adam_eps: float = 1e-8
    tol: float = 1e-6
    tol_window: int = 10
    ncc_window: int = 9
    inversion_iters: int = 50
    inversion_tol: float = 1e-3
    # "joint": both fields are free variables; "derived": backward field is the
    # fixed-point inverse of the forward field, without gradient flow
    mode: str = "joint"
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.step_size > 0:
            raise ConfigError("step_size must be > 0")
        if not 0 < self.step_decay <= 1:
            raise ConfigError("step_decay must be in (0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("moment decays must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ConfigError("adam_eps must be > 0")
        if self.ncc_window < 0 or (self.ncc_window and self.ncc_window % 2 == 0):
            raise ConfigError("ncc_window must be odd (or 0 for global NCC)")
        if self.mode not in ("joint", "derived"):
            raise ConfigError(f"unknown mode {self.mode!r}")


@dataclass
class TraceEntry:
    level: int
    iteration: int
    energy: EnergyBreakdown


@dataclass(eq=False)
class RegistrationResult:
    forward: DisplacementField
    backward: DisplacementField
    trace: List[TraceEntry] = field(default_factory=list)
    report: Optional[MetricsReport] = None
    converged: bool = False


@dataclass(eq=False)
class LevelProblem:
    pair: ImagePair
    structures: StructureSet
    factor: int


# --- pyramid ------------------------------------------------------------------

def _pad_even(a):
    pad = [(0, n % 2) for n in a.shape]
    return np.pad(a, pad, mode="edge") if any(p[1] for p in pad) else a


def downsample_scalar(a: np.ndarray) -> np.ndarray:
    """2x box-filter reduction (odd axes are edge-padded first)."""
    a = _pad_even(np.asarray(a, dtype=np.float64))
    nx, ny, nz = a.shape
    return a.reshape(nx // 2, 2, ny // 2, 2, nz // 2, 2).mean(axis=(1, 3, 5))


def downsample_mask(m: np.ndarray) -> np.ndarray:
    """2x majority vote; ties (4 of 8) count as foreground."""
    return downsample_scalar(np.asarray(m, dtype=np.float64)) >= 0.5


def _down_geom(geom: GridGeometry) -> GridGeometry:
    return GridGeometry(tuple((n + 1) // 2 for n in geom.dims),
                        tuple(2 * s for s in geom.spacing))


def build_pyramid(pair: ImagePair, levels: int,
                  structures: Optional[StructureSet] = None) -> List[LevelProblem]:
    """Problems from coarsest to finest; structures are re-extracted on every level.

    ``structures`` (if given) is used for the finest level instead of extracting.
    """
    if levels < 1:
        raise ConfigError("levels must be >= 1")
    dims = np.array(pair.geometry.dims)
    coarsest = -(-dims // 2 ** (levels - 1))
    if np.any(coarsest < 4):
        raise ConfigError(f"grid {tuple(dims)} too small for {levels} levels")
    out = [LevelProblem(pair, structures or StructureSet.extract(pair), 1)]
    cur = pair
    for k in range(1, levels):
        geom = _down_geom(cur.geometry)

        def vol(v):
            return ScalarVolume(geom, downsample_scalar(v.values))

        def msk(m):
            return None if m is None else LabelMask(geom, downsample_mask(m.values))

        cur = ImagePair(vol(cur.fixed), vol(cur.moving), msk(cur.liver_fixed),
                        msk(cur.liver_moving), msk(cur.vessel_fixed), msk(cur.vessel_moving))
        out.append(LevelProblem(cur, StructureSet.extract(cur), 2 ** k))
    return out[::-1]


def upsample_field(u: np.ndarray, dims) -> np.ndarray:
    """Trilinear upsampling of a coarse field onto a 2x finer grid, magnitudes x2.

    Fine voxel ``i`` sits at coarse coordinate ``(i - 0.5) / 2`` because each
    coarse voxel averages fine voxels ``2j`` and ``2j + 1``.
    """
    coords = np.stack(np.meshgrid(*((np.arange(n) - 0.5) / 2.0 for n in dims), indexing="ij"))
    tri = Trilinear(coords, u.shape[1:])
    return 2.0 * np.stack([tri.sample(u[k]) for k in range(3)])


# --- optimisation -------------------------------------------------------------

class Adam:
    """First-order adaptive-moment descent on a single array."""

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - lr * mhat / (np.sqrt(vhat) + self.eps)


def _optimise_level(prob: LevelProblem, uf, ub, cfg: RegistrationConfig, level: int,
                    trace: List[TraceEntry]):
    w = cfg.weights
    derived = cfg.mode == "derived"

    def energy(uf, ub):
        return total_energy_arrays(prob.pair, uf, ub, prob.structures, w, cfg.ncc_window)

    params = np.stack([uf, ub])
    opt = Adam(params.shape, cfg.beta1, cfg.beta2, cfg.adam_eps)
    scale = None
    history = []
    best = None
    converged = False
    for it in range(cfg.iterations):
        if derived:
            params[1], _ = invert_array(params[0], cfg.inversion_iters, cfg.inversion_tol)
        br, gf, gb = energy(params[0], params[1])
        trace.append(TraceEntry(level, it, br))
        if not np.isfinite(br.total):
            raise FloatingPointError(f"energy diverged at level {level}, iteration {it}")
        if best is None or br.total < best[0]:
            best = (br.total, params.copy())
        history.append(best[0])
        # stop once the best energy improved by less than tol (relative) over
        # the last window; the first window is warm-up for the moment estimates
        if it >= 2 * cfg.tol_window:
            old = history[-1 - cfg.tol_window]
            if old - best[0] <= cfg.tol * max(abs(old), 1e-12):
                converged = True
                break
        grad = np.stack([gf, gb])
        if derived:
            grad[1] = 0.0
        if scale is None:
            # gradients are normalised by their initial infinity-norm per level
            gmax = float(np.abs(grad).max())
            scale = 1.0 / gmax if gmax > 0 else 1.0
        lr = cfg.step_size * cfg.step_decay ** (it / max(cfg.iterations - 1, 1))
        params = opt.step(params, grad * scale, lr)
    return best[1][0], best[1][1], converged


def register(fixed: ScalarVolume, moving: ScalarVolume, liver_fixed: LabelMask = None,
             liver_moving: LabelMask = None, vessel_fixed: LabelMask = None,
             vessel_moving: LabelMask = None, config: RegistrationConfig = RegistrationConfig(),
             structures: Optional[StructureSet] = None) -> RegistrationResult:
    """Register ``moving`` onto ``fixed``; returns forward and backward fields."""
    pair = ImagePair(fixed, moving, liver_fixed, liver_moving, vessel_fixed, vessel_moving)
    return register_pair(pair, config, structures)


def register_pair(pair: ImagePair, config: RegistrationConfig = RegistrationConfig(),
                  structures: Optional[StructureSet] = None) -> RegistrationResult:
    pyramid = build_pyramid(pair, config.levels, structures)
    trace: List[TraceEntry] = []
    uf = ub = None
    converged = False
    for level, prob in enumerate(pyramid):
        dims = prob.pair.geometry.dims
        if uf is None:
            uf = np.zeros((3,) + dims)
            ub = np.zeros((3,) + dims)
        else:
            uf = upsample_field(uf, dims)
            ub = upsample_field(ub, dims)
        uf, ub, converged = _optimise_level(prob, uf, ub, config, level, trace)
        log.debug("level %d done (%s), energy %.6g", level, dims, trace[-1].energy.total)
    geom = pair.geometry
    if config.mode == "derived":
        ub, _ = invert_array(uf, config.inversion_iters, config.inversion_tol)
    fwd = DisplacementField(geom, uf)
    bwd = DisplacementField(geom, ub)
    if not converged:
        converged = _stalled(trace)
    report = evaluate(fwd, pair.liver_fixed, pair.liver_moving, pair.vessel_fixed,
                      pair.vessel_moving)
    return RegistrationResult(fwd, bwd, trace, report, converged)


def _stalled(trace, window=10, tol=1e-3):
    # iteration budget exhausted: accept when the finest level has flattened out
    last = [t.energy.total for t in trace if t.level == trace[-1].level]
    if len(last) <= window:
        return False
    old, new = last[-1 - window], last[-1]
    return old - new <= tol * max(abs(old), 1e-12)


def derive_inverse(fwd: DisplacementField, config: RegistrationConfig = RegistrationConfig()):
    """Fixed-point inverse of a forward field (no optimisation)."""
    inv, _ = invert_array(fwd.vectors, config.inversion_iters, config.inversion_tol)
    return DisplacementField(fwd.geometry, inv)
