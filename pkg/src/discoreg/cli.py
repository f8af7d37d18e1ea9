"""Command-line front end.

    discoreg synth SPEC.json OUT_DIR
    discoreg register --moving M --fixed F --moving-mask MM --fixed-mask FM --out DIR
    discoreg warp --field PHI --image IMG --out OUT.nii [--labels]
    discoreg evaluate --pred-seg P --gt-seg G [--spacing-from REF]
    discoreg gradcheck [--seed S] [--size N]

Exit codes: 0 success, 2 usage or validation error, 3 numerical divergence.
Progress goes to stderr; machine-readable results go to files or stdout.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .coattention import AttentionBudgetError
from .data.nifti import NiftiError, read_grid, read_nifti, write_nifti
from .data.phantom import PhantomSpec, PhantomSpecError, generate_phantom
from .engine import RegistrationDiverged, RegistrationProblem, register, save_report
from .grid import GridMismatchError, LabelMap, VectorField, Volume
from .losses import LossWeights
from .metrics import evaluate

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("discoreg")

# flag defaults for `register`; a --config JSON may override them and
# explicit flags override the config
REGISTER_DEFAULTS = {
    "mode": "disc",
    "iters": 500,
    "lr": 1e-3,
    "lambda0": 0.1,
    "lambda1": 1.0,
    "lambda2": 0.1,
    "lambda3": 0.01,
    "steps": 7,
    "seed": 0,
    "svf_grid_factor": 2,
    "log_every": 50,
}
REGISTER_PATHS = ("moving", "fixed", "moving_mask", "fixed_mask", "out")


class UsageError(Exception):
    pass


def _load(path, kind: str):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {path}")
    return read_nifti(p, kind)


def cmd_synth(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        raise UsageError(f"file not found: {spec_path}")
    spec = PhantomSpec.from_json(spec_path.read_text())
    if args.seed is not None:
        spec.seed = args.seed
    pair = generate_phantom(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "moving": "moving.nii",
        "fixed": "fixed.nii",
        "moving_mask": "moving_mask.nii",
        "fixed_mask": "fixed_mask.nii",
        "gt_deformation": "gt_deformation.nii",
    }
    for key, name in files.items():
        write_nifti(getattr(pair, key), out / name)
    manifest = {"spec": spec.to_dict(), "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("wrote phantom pair to %s", out)
    return EXIT_OK


def _register_settings(args) -> dict:
    cfg: dict = {}
    if args.config is not None:
        cpath = Path(args.config)
        if not cpath.is_file():
            raise UsageError(f"file not found: {cpath}")
        try:
            cfg = json.loads(cpath.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = set(cfg) - set(REGISTER_DEFAULTS) - set(REGISTER_PATHS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    settings = {}
    for key in (*REGISTER_PATHS, *REGISTER_DEFAULTS):
        flag = getattr(args, key)
        if flag is not None:
            settings[key] = flag
        elif key in cfg:
            settings[key] = cfg[key]
        elif key in REGISTER_DEFAULTS:
            settings[key] = REGISTER_DEFAULTS[key]
        else:
            raise UsageError(f"--{key.replace('_', '-')} is required (flag or config key)")
    return settings


def cmd_register(args) -> int:
    s = _register_settings(args)
    moving = _load(s["moving"], "volume")
    fixed = _load(s["fixed"], "volume")
    moving_mask = _load(s["moving_mask"], "labels")
    fixed_mask = _load(s["fixed_mask"], "labels")
    weights = LossWeights(float(s["lambda0"]), float(s["lambda1"]), float(s["lambda2"]), float(s["lambda3"]))
    problem = RegistrationProblem(
        moving, fixed, moving_mask, fixed_mask,
        weights=weights,
        steps=int(s["steps"]),
        iters=int(s["iters"]),
        lr=float(s["lr"]),
        svf_grid_factor=int(s["svf_grid_factor"]),
        mode=s["mode"],
        seed=int(s["seed"]),
        log_every=int(s["log_every"]),
    )
    report = register(problem)
    out = save_report(report, s["out"])
    log.info("dice_avg %.4f; report written to %s", report.metrics.dice_avg, out)
    return EXIT_OK


def cmd_warp(args) -> int:
    phi = _load(args.field, "field")
    if not isinstance(phi, VectorField) or phi.role != "deformation":
        raise UsageError(f"{args.field} is not a deformation field")
    img = _load(args.image, "labels" if args.labels else "volume")
    from .warp import warp_labels, warp_volume

    if isinstance(img, LabelMap):
        out = warp_labels(img, phi)
    else:
        out = Volume(img.grid, warp_volume(img, phi).array.copy())
    write_nifti(out, args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred = _load(args.pred_seg, "labels")
    gt = _load(args.gt_seg, "labels")
    spacing = None
    if args.spacing_from is not None:
        if not Path(args.spacing_from).is_file():
            raise UsageError(f"file not found: {args.spacing_from}")
        spacing = read_grid(args.spacing_from).spacing
    report = evaluate(pred, gt, spacing)
    sys.stdout.write(report.to_json() + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_checks

    results = run_checks(args.seed, args.size, corrupt=args.corrupt)
    sys.stdout.write(format_table(results) + "\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        sys.stderr.write(f"gradient check failed for: {', '.join(failed)}\n")
        return 1
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="discoreg", description="Discontinuity-preserving registration toolkit")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom pair from a JSON spec")
    p.add_argument("spec", help="phantom spec JSON file")
    p.add_argument("out_dir", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the phantom file's noise seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("register", help="register a moving image to a fixed image")
    p.add_argument("--moving")
    p.add_argument("--fixed")
    p.add_argument("--moving-mask")
    p.add_argument("--fixed-mask")
    p.add_argument("--out", help="report directory")
    p.add_argument("--config", help="JSON file with any of the flags below; flags win")
    p.add_argument("--mode", choices=("disc", "smooth"), default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    for i, name in enumerate(("segmentation", "image similarity", "label consistency", "regularisation")):
        p.add_argument(f"--lambda{i}", type=float, default=None,
                       help=f"{name} weight (default {REGISTER_DEFAULTS[f'lambda{i}']})")
    p.add_argument("--steps", type=int, default=None, help="scaling-and-squaring steps (default 7)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--svf-grid-factor", type=int, default=None, choices=(1, 2, 4))
    p.add_argument("--log-every", type=int, default=None, help="progress interval in iterations (0 = silent)")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("warp", help="apply a deformation field to an image or label map")
    p.add_argument("--field", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", action="store_true", help="treat the image as a label map")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("evaluate", help="segmentation metrics as JSON on stdout")
    p.add_argument("--pred-seg", required=True)
    p.add_argument("--gt-seg", required=True)
    p.add_argument("--spacing-from", default=None, help="take voxel spacing from this NIfTI header")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=4, help="spatial edge length of the test volumes")
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses exit code 2 for usage errors already
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except RegistrationDiverged as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DIVERGED
    except (UsageError, PhantomSpecError, NiftiError, GridMismatchError, AttentionBudgetError,
            FileNotFoundError, ValueError) as exc:
        msg = str(exc)
        if isinstance(exc, FileNotFoundError):
            msg = f"file not found: {exc.filename}"
        sys.stderr.write(f"error: {msg}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
