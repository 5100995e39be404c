"""
Main module for the registration engine. Command-line front end wiring the
pipeline: synthesize test pairs, register, warp and evaluate stored artifacts.

Usage:
    python main.py synth --dims 32 32 32 --strength 0.2 --seed 0 --out-dir case
    python main.py register --reference case/reference.raw --moving case/phantom.raw --out-dir run
    python main.py eval --grid run/grid --mask-ref case/reference_mask.raw --mask-mov case/phantom_mask.raw
    python main.py warp --input case/phantom.raw --grid run/grid --output warped.raw
    python main.py preprocess --input scan.raw --output scan_small.raw

Every failure prints {"error": {"code": ..., "message": ...}} on stdout and
exits 2 (usage), 3 (data) or 4 (divergence).
"""

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

from pydantic import ValidationError

import config
import evaluate
import file_io
import synth
import warp
from errors import InvalidInputError, RegistrationError, StorageError, UsageError
from optimizer import register
from volume import identity_grid, require_same_dims, residual_deformation

logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of printing usage and exiting."""

    def error(self, message):
        raise UsageError(message)


# - - - Output staging - - -

@contextlib.contextmanager
def staged_outputs(out_dir):
    """
    Yield a temporary directory next to ``out_dir``; its files are moved into
    ``out_dir`` only if the block finishes without raising.
    """
    out_dir = Path(out_dir)
    parent = out_dir.parent
    parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(dir=parent, prefix=f".{out_dir.name}.staging-"))
    try:
        yield staging
        out_dir.mkdir(parents=True, exist_ok=True)
        for item in sorted(staging.iterdir()):
            os.replace(item, out_dir / item.name)
    finally:
        shutil.rmtree(staging, ignore_errors=True)


def emit(args, report: dict, summary: str) -> None:
    if args.quiet:
        print(json.dumps(report))
    else:
        print(summary)


# - - - Commands - - -

def cmd_synth(args) -> int:
    dims = tuple(args.dims)
    phantom = synth.make_phantom(dims, args.seed)
    gt = synth.make_ground_truth(dims, args.strength, args.seed, mode=args.mode)
    pair = synth.make_pair(phantom, gt)
    dice_before = evaluate.dice(pair.reference_mask, pair.moving_mask)

    report = {
        "command": "synth",
        "dims": list(dims),
        "strength": args.strength,
        "seed": args.seed,
        "mode": args.mode,
        "landmarks": len(pair.reference_landmarks),
        "dice_unregistered": dice_before,
        "affine": pair.affine.to_list(),
    }
    with staged_outputs(args.out_dir) as tmp:
        file_io.write_volume(tmp / "phantom.raw", pair.moving)
        file_io.write_volume(tmp / "phantom_mask.raw", pair.moving_mask)
        file_io.write_volume(tmp / "reference.raw", pair.reference)
        file_io.write_volume(tmp / "reference_mask.raw", pair.reference_mask)
        file_io.write_landmarks(tmp / "landmarks_ref.csv", pair.reference_landmarks)
        file_io.write_landmarks(tmp / "landmarks_mov.csv", pair.moving_landmarks)
        file_io.write_channels(tmp / "gt_phi", pair.phi.data)
        file_io.write_affine(tmp / "gt_affine.json", pair.affine)
        file_io.write_grid(tmp / "gt_grid", pair.grid)
        file_io.write_report(tmp / "synth.json", report)

    emit(args, report, (
        f"Synthetic pair {dims} (strength {args.strength}, seed {args.seed}, mode {args.mode}) "
        f"written to {args.out_dir}; unregistered Dice {dice_before:.4f}"
    ))
    return 0


def _load_masks(args, dims):
    if (args.mask_moving is None) != (args.mask_reference is None):
        raise UsageError("--mask-moving and --mask-reference must be given together")
    if args.mask_moving is None:
        return None
    mov, ref = file_io.read_mask(args.mask_moving), file_io.read_mask(args.mask_reference)
    require_same_dims(identity_grid(dims), mov, ref, what="volumes and masks")
    return mov, ref


def _load_landmarks(args, dims):
    if (args.landmarks_ref is None) != (args.landmarks_mov is None):
        raise UsageError("--landmarks-ref and --landmarks-mov must be given together")
    if args.landmarks_ref is None:
        return None
    return file_io.read_landmarks(args.landmarks_ref, dims), file_io.read_landmarks(args.landmarks_mov, dims)


def cmd_register(args) -> int:
    started = time.perf_counter()
    reference = file_io.read_volume(args.reference)
    moving = file_io.read_volume(args.moving)
    dims = require_same_dims(reference, moving, what="reference and moving volumes")
    masks = _load_masks(args, dims)
    landmarks = _load_landmarks(args, dims)
    cfg = file_io.read_config(args.config)

    result = register(reference, moving, cfg)
    elapsed = time.perf_counter() - started

    report = {
        "command": "register",
        "config": cfg.model_dump(),
        "seed": cfg.seed,
        "dims": list(dims),
        "loss": {
            "initial": result.loss_trace[0].model_dump(),
            "best": result.best_loss.model_dump(),
            "trace": [b.total for b in result.loss_trace],
        },
        "iterations": result.iterations_run,
        "converged": result.converged,
        "final_lr": result.final_lr,
        "affine": result.a.to_list(),
        "folds": evaluate.fold_check(result.grid).model_dump(),
    }
    if masks is not None:
        mov_mask, ref_mask = masks
        report["dice"] = {
            "before": evaluate.dice(ref_mask, mov_mask),
            "after": evaluate.dice(ref_mask, warp.warp_mask(mov_mask, result.grid)),
        }
    if landmarks is not None:
        ref_pts, mov_pts = landmarks
        report["landmarks"] = {
            "before": evaluate.landmark_error(identity_grid(dims), ref_pts, mov_pts).model_dump(),
            "after": evaluate.landmark_error(result.grid, ref_pts, mov_pts).model_dump(),
        }
    report["timing"] = {"seconds": elapsed}

    with staged_outputs(args.out_dir) as tmp:
        file_io.write_volume(tmp / "warped.raw", result.warped)
        file_io.write_grid(tmp / "grid", result.grid, moving.spacing)
        file_io.write_grid(tmp / "residual", residual_deformation(result.grid), moving.spacing)
        file_io.write_grid(tmp / "residual_deformable", residual_deformation(result.grid_deformable), moving.spacing)
        file_io.write_json(tmp / "params.json", {
            "affine": result.a.to_list(),
            "config": cfg.model_dump(),
        })
        file_io.write_channels(tmp / "theta", result.theta.data)
        file_io.write_report(tmp / "report.json", report)

    summary = [
        f"Registered {args.moving} onto {args.reference} {dims}",
        f"  loss {result.loss_trace[0].total:.6e} -> {result.best_loss.total:.6e} "
        f"in {result.iterations_run} iterations ({'converged' if result.converged else 'iteration cap'})",
    ]
    if "dice" in report:
        summary.append(f"  Dice {report['dice']['before']:.4f} -> {report['dice']['after']:.4f}")
    if "landmarks" in report:
        summary.append(f"  landmark ds {report['landmarks']['before']['ds']:.3f} -> {report['landmarks']['after']['ds']:.3f}")
    summary.append(f"  fold violations {report['folds']['total_violations']}, {elapsed:.1f}s, outputs in {args.out_dir}")
    emit(args, report, "\n".join(summary))
    return 0


def cmd_eval(args) -> int:
    grid = file_io.read_grid(args.grid)
    report = {"command": "eval", "folds": evaluate.fold_check(grid).model_dump()}

    if (args.mask_ref is None) != (args.mask_mov is None):
        raise UsageError("--mask-ref and --mask-mov must be given together")
    if (args.landmarks_ref is None) != (args.landmarks_mov is None):
        raise UsageError("--landmarks-ref and --landmarks-mov must be given together")
    if args.mask_ref is None and args.landmarks_ref is None:
        raise UsageError("eval needs masks (--mask-ref/--mask-mov) or landmarks (--landmarks-ref/--landmarks-mov)")

    if args.mask_ref is not None:
        ref_mask, mov_mask = file_io.read_mask(args.mask_ref), file_io.read_mask(args.mask_mov)
        require_same_dims(grid, ref_mask, mov_mask, what="grid and masks")
        report["dice"] = evaluate.dice(ref_mask, warp.warp_mask(mov_mask, grid))
    if args.landmarks_ref is not None:
        ref_pts = file_io.read_landmarks(args.landmarks_ref, grid.dims)
        mov_pts = file_io.read_landmarks(args.landmarks_mov, grid.dims)
        report["landmarks"] = evaluate.landmark_error(grid, ref_pts, mov_pts).model_dump()

    print(json.dumps(report))
    return 0


def cmd_warp(args) -> int:
    grid = file_io.read_grid(args.grid)
    output = Path(args.output)
    if args.mask:
        warped = warp.warp_mask(file_io.read_mask(args.input), grid)
    else:
        warped = warp.warp(file_io.read_volume(args.input), grid)

    with staged_outputs(output.parent) as tmp:
        file_io.write_volume(tmp / output.name, warped)

    report = {"command": "warp", "input": str(args.input), "output": str(output), "dims": list(warped.dims)}
    emit(args, report, f"Warped {args.input} -> {output} {warped.dims}")
    return 0


def cmd_preprocess(args) -> int:
    v = file_io.read_volume(args.input)
    out = file_io.preprocess(v, args.window_lo, args.window_hi, args.scale)
    output = Path(args.output)
    with staged_outputs(output.parent) as tmp:
        file_io.write_volume(tmp / output.name, out)

    report = {"command": "preprocess", "dims_in": list(v.dims), "dims_out": list(out.dims), "spacing": list(out.spacing)}
    emit(args, report, f"Preprocessed {args.input} {v.dims} -> {output} {out.dims}")
    return 0


# - - - Parser - - -

def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="main.py", description="Coupled affine and deformable 3D image registration.")
    parser.add_argument("--quiet", action="store_true", help="JSON-only output on stdout")
    parser.add_argument("--threads", type=int, default=None, help="Sampling worker threads (default: all cores)")
    parser.add_argument("--log-level", default=None, help="Logging level (default from .env or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate a synthetic pair with known ground truth")
    p.add_argument("--dims", type=int, nargs=3, required=True, metavar=("NZ", "NY", "NX"))
    p.add_argument("--strength", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["both", "affine", "deformable"], default="both")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("register", help="Register a moving volume onto a reference")
    p.add_argument("--reference", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--config", default=None, help="OptimConfig JSON (defaults otherwise)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mask-moving", default=None)
    p.add_argument("--mask-reference", default=None)
    p.add_argument("--landmarks-ref", default=None)
    p.add_argument("--landmarks-mov", default=None)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="Score a stored grid with masks and/or landmarks")
    p.add_argument("--grid", required=True, help="Grid prefix (<prefix>_z.raw ...)")
    p.add_argument("--mask-ref", default=None)
    p.add_argument("--mask-mov", default=None)
    p.add_argument("--landmarks-ref", default=None)
    p.add_argument("--landmarks-mov", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("warp", help="Warp a stored volume or mask with a stored grid")
    p.add_argument("--input", required=True)
    p.add_argument("--grid", required=True, help="Grid prefix (<prefix>_z.raw ...)")
    p.add_argument("--output", required=True)
    p.add_argument("--mask", action="store_true", help="Treat the input as a binary mask")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("preprocess", help="Window intensities to [0, 1] and downscale")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--window-lo", type=float, default=config.WINDOW_LO)
    p.add_argument("--window-hi", type=float, default=config.WINDOW_HI)
    p.add_argument("--scale", type=float, default=config.SCALE_FACTOR, help="Per-axis scale factor in (0, 1]")
    p.set_defaults(func=cmd_preprocess)

    return parser


def _fail(err: RegistrationError) -> int:
    print(json.dumps(err.to_dict()))
    return err.exit_code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except RegistrationError as e:
        return _fail(e)

    level = (args.log_level or config.LOG_LEVEL).upper()
    if not isinstance(logging.getLevelName(level), int):
        return _fail(UsageError(f"unknown log level '{level}'"))
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
    if args.threads is not None:
        if args.threads < 1:
            return _fail(UsageError("--threads must be >= 1"))
        warp.set_num_threads(args.threads)

    try:
        return args.func(args)
    except RegistrationError as e:
        logger.error(f"{e.code}: {e}")
        return _fail(e)
    except ValidationError as e:
        logger.error(f"invalid input: {e}")
        return _fail(InvalidInputError(str(e)))
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        return _fail(StorageError(str(e)))
    except Exception as e:
        logger.exception("unexpected failure")
        return _fail(RegistrationError(f"{type(e).__name__}: {e}"))


if __name__ == "__main__":
    sys.exit(main())
