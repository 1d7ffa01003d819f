"""Command-line entry point: ``structreg <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 registration did not
converge (outputs are still written).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields as dc_fields

import numpy as np

from . import __version__
from .energy import EnergyWeights
from .metrics import connected_regions, evaluate
from .nifti import NiftiError, read_nifti, write_nifti
from .optimizer import ConfigError, RegistrationConfig, register
from .phantom import PhantomError, PhantomSpec, generate, ground_truth_error
from .preprocess import PreprocessConfig, preprocess
from .reports import write_report
from .structures import EmptyMaskError, distance_map, extract_surface
from .skeleton import skeletonize
from .vesselness import DEFAULT_SCALES
from .volume import (DisplacementField, GeometryError, LabelMask, ScalarVolume,
                     check_geometry, warp_mask)

THREADS_ENV = "STRUCTREG_THREADS"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NOT_CONVERGED = 0, 1, 2, 3

log = logging.getLogger("structreg")


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load(path, kind=None, what="input"):
    if path is None:
        return None
    if not os.path.exists(path):
        raise DataError(f"{what} not found: {path}")
    obj = read_nifti(path)
    if kind is LabelMask and isinstance(obj, ScalarVolume):
        vals = obj.values
        if not np.all((vals == 0) | (vals == 1)):
            raise DataError(f"{what} is not a binary mask: {path}")
        obj = LabelMask(obj.geometry, vals.astype(bool))
    if kind is not None and not isinstance(obj, kind):
        raise DataError(f"{what} has the wrong kind ({type(obj).__name__}): {path}")
    return obj


def _set_threads(n):
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is None:
        return
    if n < 1:
        raise DataError("thread count must be >= 1")
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# --- commands -----------------------------------------------------------------

def cmd_preprocess(args):
    vol = _load(args.input, ScalarVolume, "--in")
    keep = _load(args.mask, LabelMask, "--mask")
    if keep is not None:
        check_geometry(vol, keep)
    cfg = PreprocessConfig(median_window=args.median_window, scales=tuple(args.scales),
                           alpha=args.alpha, beta=args.beta, c=args.c, gain=args.gain,
                           clip_percentile=args.clip_percentile)
    out = preprocess(vol, keep, cfg)
    write_nifti(out, args.out)
    print(f"preprocess: wrote {args.out} range [{out.values.min():.6g}, {out.values.max():.6g}]")
    return EXIT_OK


def cmd_extract(args):
    mask = _load(args.mask, LabelMask, "--mask")
    if not mask.values.any():
        raise EmptyMaskError("mask is empty")
    if args.kind == "surface":
        out = extract_surface(mask).to_mask()
    elif args.kind == "skeleton":
        out = skeletonize(mask).to_mask()
    else:
        out = distance_map(mask)
    write_nifti(out, args.out)
    if isinstance(out, LabelMask):
        summary = f"{out.count} voxels, {connected_regions(out)} components"
    else:
        summary = f"max distance {out.values.max():.6g} mm"
    print(f"extract {args.kind}: wrote {args.out} ({summary})")
    return EXIT_OK


def _weights(args) -> EnergyWeights:
    return EnergyWeights(overlap=args.w_overlap, nonoverlap=args.w_nonoverlap,
                         smoothness=args.w_smooth, surface=args.w_surface,
                         centerline=args.w_centerline, inverse_consistency=args.w_ic)


def cmd_register(args):
    fixed = _load(args.fixed, ScalarVolume, "--fixed")
    moving = _load(args.moving, ScalarVolume, "--moving")
    masks = [_load(getattr(args, k), LabelMask, "--" + k.replace("_", "-"))
             for k in ("liver_fixed", "liver_moving", "vessel_fixed", "vessel_moving")]
    check_geometry(fixed, moving, *masks)
    cfg = RegistrationConfig(weights=_weights(args), levels=args.levels,
                             iterations=args.iterations, step_size=args.step_size,
                             step_decay=args.step_decay, tol=args.tol,
                             ncc_window=args.ncc_window, inversion_iters=args.inversion_iters,
                             inversion_tol=args.inversion_tol, mode=args.mode, seed=args.seed)
    res = register(fixed, moving, *masks, config=cfg)
    write_nifti(res.forward, args.out_fwd)
    if args.out_bwd:
        write_nifti(res.backward, args.out_bwd)
    if args.out_fwd_mm:
        sp = np.asarray(res.forward.geometry.spacing).reshape(3, 1, 1, 1)
        write_nifti(DisplacementField(res.forward.geometry, res.forward.vectors * sp),
                    args.out_fwd_mm)
    if args.trace:
        write_report(args.trace, res.report, res.trace, args.trace_format)
    final = res.trace[-1].energy.total
    umax = float(np.sqrt((res.forward.vectors ** 2).sum(axis=0)).max())
    state = "converged" if res.converged else "not converged"
    print(f"register: {state}, {len(res.trace)} iterations, energy {final:.6g}, "
          f"max |u| {umax:.4g} voxels")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def _overlay(fixed_mask, warped_mask):
    f = fixed_mask.values
    w = warped_mask.values
    codes = np.zeros(f.shape)
    codes[f & ~w] = 1
    codes[~f & w] = 2
    codes[f & w] = 3
    return ScalarVolume(fixed_mask.geometry, codes)


def cmd_evaluate(args):
    field = _load(args.field, DisplacementField, "--field")
    lf = _load(args.liver_fixed, LabelMask, "--liver-fixed")
    lm = _load(args.liver_moving, LabelMask, "--liver-moving")
    vf = _load(args.vessel_fixed, LabelMask, "--vessel-fixed")
    vm = _load(args.vessel_moving, LabelMask, "--vessel-moving")
    truth = _load(args.truth, DisplacementField, "--truth")
    check_geometry(field, lf, lm, vf, vm, truth)
    if (lf is None) != (lm is None):
        raise DataError("--liver-fixed and --liver-moving must be given together")
    if lf is not None and not lf.values.any():
        raise EmptyMaskError("reference liver mask is empty")
    report = evaluate(field, lf, lm, vf, vm)
    if truth is not None:
        roi = lf if lf is not None else LabelMask(field.geometry,
                                                   np.ones(field.geometry.dims, bool))
        report.truth_mean, report.truth_median, report.truth_max = \
            ground_truth_error(field, truth, roi)
    write_report(args.report, report, (), args.format)
    if args.overlay:
        if lf is not None:
            ov = _overlay(lf, warp_mask(lm, field, "nearest"))
        elif vf is not None and vm is not None:
            ov = _overlay(vf, warp_mask(vm, field, "nearest"))
        else:
            raise DataError("--overlay needs a fixed/moving mask pair")
        write_nifti(ov, args.overlay)
    flat = report.as_flat()
    head = ", ".join(f"{k}={v:.4g}" for k, v in list(flat.items())[:3])
    print(f"evaluate: wrote {args.report} ({head})")
    return EXIT_OK


PHANTOM_FILES = {
    "fixed": "fixed.nii.gz", "moving": "moving.nii.gz",
    "liver_fixed": "liver_fixed.nii.gz", "liver_moving": "liver_moving.nii.gz",
    "vein_fixed": "vessel_fixed.nii.gz", "artery_moving": "vessel_moving.nii.gz",
    "truth": "truth.nii.gz", "artery_fixed": "artery_fixed.nii.gz",
    "vein_moving": "vein_moving.nii.gz",
}


def _phantom_spec(args) -> PhantomSpec:
    kw = {}
    if args.spec:
        if not os.path.exists(args.spec):
            raise DataError(f"--spec not found: {args.spec}")
        with open(args.spec) as f:
            kw = json.load(f)
        known = {f.name for f in dc_fields(PhantomSpec)}
        unknown = set(kw) - known
        if unknown:
            raise DataError(f"unknown phantom spec keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in kw.items()}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.max_displacement is not None:
        kw["max_displacement"] = args.max_displacement
    return PhantomSpec(**kw)


def cmd_phantom(args):
    spec = _phantom_spec(args)
    pair = generate(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    for attr, name in PHANTOM_FILES.items():
        write_nifti(getattr(pair, attr), os.path.join(args.out_dir, name))
    print(f"phantom: seed {spec.seed}, {len(PHANTOM_FILES)} files in {args.out_dir}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="structreg", description="Structure-aware deformable registration.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker thread cap (default: ${THREADS_ENV} or all cores)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    pp = sub.add_parser("preprocess", help="mask, normalise, median-filter and enhance vessels",
                        formatter_class=fmt)
    pp.add_argument("--in", dest="input", required=True, help="input volume (.nii/.nii.gz)")
    pp.add_argument("--mask", default=None, help="keep-mask; voxels outside become 0")
    pp.add_argument("--out", required=True, help="output volume")
    pp.add_argument("--median-window", type=int, default=3, help="odd median window")
    pp.add_argument("--scales", type=float, nargs="+", default=list(DEFAULT_SCALES),
                    help="vesselness scales in mm")
    pp.add_argument("--alpha", type=float, default=0.5, help="vesselness plate sensitivity")
    pp.add_argument("--beta", type=float, default=0.5, help="vesselness blob sensitivity")
    pp.add_argument("--c", type=float, default=None,
                    help="vesselness structure constant (default: half max Hessian norm)")
    pp.add_argument("--gain", type=float, default=1.0, help="superimposition gain")
    pp.add_argument("--clip-percentile", type=float, default=None,
                    help="percentile clip before normalisation")
    pp.set_defaults(func=cmd_preprocess)

    pe = sub.add_parser("extract", help="surface, skeleton or distance map of a mask",
                        formatter_class=fmt)
    pe.add_argument("--mask", required=True, help="binary mask")
    pe.add_argument("--kind", choices=("surface", "skeleton", "distance"), required=True,
                    help="structure to extract")
    pe.add_argument("--out", required=True, help="output mask or distance volume")
    pe.set_defaults(func=cmd_extract)

    d = EnergyWeights()
    c = RegistrationConfig()
    pr = sub.add_parser("register", help="register moving onto fixed", formatter_class=fmt)
    pr.add_argument("--fixed", required=True, help="fixed image")
    pr.add_argument("--moving", required=True, help="moving image")
    pr.add_argument("--liver-fixed", default=None, help="paired organ mask, fixed")
    pr.add_argument("--liver-moving", default=None, help="paired organ mask, moving")
    pr.add_argument("--vessel-fixed", default=None, help="unpaired vessel mask, fixed")
    pr.add_argument("--vessel-moving", default=None, help="unpaired vessel mask, moving")
    pr.add_argument("--w-overlap", type=float, default=d.overlap, help="organ overlap weight")
    pr.add_argument("--w-nonoverlap", type=float, default=d.nonoverlap,
                    help="vessel non-overlap weight")
    pr.add_argument("--w-smooth", type=float, default=d.smoothness, help="smoothness weight")
    pr.add_argument("--w-surface", type=float, default=d.surface, help="surface weight")
    pr.add_argument("--w-centerline", type=float, default=d.centerline,
                    help="centerline weight")
    pr.add_argument("--w-ic", type=float, default=d.inverse_consistency,
                    help="inverse-consistency weight")
    pr.add_argument("--levels", type=int, default=c.levels, help="pyramid levels")
    pr.add_argument("--iterations", type=int, default=c.iterations,
                    help="iterations per level")
    pr.add_argument("--step-size", type=float, default=c.step_size,
                    help="initial step in voxels of the current level")
    pr.add_argument("--step-decay", type=float, default=c.step_decay,
                    help="final/initial step ratio within a level")
    pr.add_argument("--tol", type=float, default=c.tol,
                    help="relative energy decrease that counts as converged")
    pr.add_argument("--ncc-window", type=int, default=c.ncc_window,
                    help="local NCC window (odd; 0 selects global NCC)")
    pr.add_argument("--inversion-iters", type=int, default=c.inversion_iters,
                    help="fixed-point iterations for field inversion")
    pr.add_argument("--inversion-tol", type=float, default=c.inversion_tol,
                    help="inversion tolerance in voxels")
    pr.add_argument("--mode", choices=("joint", "derived"), default=c.mode,
                    help="optimise both fields, or derive the backward one")
    pr.add_argument("--seed", type=int, default=c.seed, help="random seed")
    pr.add_argument("--out-fwd", required=True, help="forward field output")
    pr.add_argument("--out-bwd", default=None, help="backward field output")
    pr.add_argument("--out-fwd-mm", default=None,
                    help="forward field converted to millimetres")
    pr.add_argument("--trace", default=None, help="report with metrics and energy trace")
    pr.add_argument("--trace-format", choices=("text", "json"), default="text",
                    help="trace document format")
    pr.set_defaults(func=cmd_register)

    pv = sub.add_parser("evaluate", help="score a field against masks", formatter_class=fmt)
    pv.add_argument("--field", required=True, help="forward displacement field")
    pv.add_argument("--liver-fixed", default=None, help="fixed organ mask (reference)")
    pv.add_argument("--liver-moving", default=None, help="moving organ mask")
    pv.add_argument("--vessel-fixed", default=None, help="fixed vessel mask")
    pv.add_argument("--vessel-moving", default=None, help="moving vessel mask")
    pv.add_argument("--truth", default=None, help="ground-truth field")
    pv.add_argument("--report", required=True, help="report output")
    pv.add_argument("--format", choices=("text", "json"), default="text", help="report format")
    pv.add_argument("--overlay", default=None,
                    help="overlap codes volume (0 bg, 1 fixed only, 2 warped only, 3 both)")
    pv.set_defaults(func=cmd_evaluate)

    ph = sub.add_parser("phantom", help="write a synthetic phantom pair", formatter_class=fmt)
    ph.add_argument("--seed", type=int, default=None, help="phantom seed (overrides --spec)")
    ph.add_argument("--spec", default=None, help="JSON file with phantom parameters")
    ph.add_argument("--max-displacement", type=float, default=None,
                    help="ground-truth peak displacement in voxels (overrides --spec)")
    ph.add_argument("--out-dir", required=True, help="output directory")
    ph.set_defaults(func=cmd_phantom)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        return args.func(args)
    except (DataError, NiftiError, GeometryError, EmptyMaskError, ConfigError,
            PhantomError, OSError, ValueError) as exc:
        print(f"structreg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
