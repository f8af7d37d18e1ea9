"""Per-pair registration by direct optimisation of per-region velocity fields.

Each region (LVBP, LVM, RV, background) owns a stationary velocity field on a
coarse grid. Every iteration exponentiates the fields, upsamples the
displacements to the image grid, stitches them through the moving label map,
warps the moving image and labels, and takes an Adam step on the weighted
objective. ``mode="smooth"`` instead optimises one global field with one
global smoothness penalty, as a continuous-deformation baseline.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .fields import (
    DEFAULT_STEPS,
    compose_displacements,
    exp_displacement,
    svf_extents,
    displacement_energy,
    smooth_gaussian,
    upsample_displacement,
)
from .grid import NUM_LABELS, REGION_ORDER, Grid, LabelMap, VectorField, Volume, check_grids
from .losses import LossWeights, combine, cross_entropy_seg, dice_loss
from .metrics import MetricsReport, evaluate
from .warp import hard_labels, sample, trilinear_sample

log = logging.getLogger(__name__)

MODES = ("discontinuous", "smooth")
_MODE_ALIASES = {"disc": "discontinuous", "discontinuous": "discontinuous", "smooth": "smooth"}
# the divergence threshold is relative to the initial loss, but never below
# this, so a pair that starts at (near) zero loss is not aborted for noise
DIVERGENCE_FLOOR = 1e-2


class RegistrationDiverged(RuntimeError):
    pass


@dataclass
class RegistrationProblem:
    moving: Volume
    fixed: Volume
    moving_mask: LabelMap
    fixed_mask: LabelMap
    weights: LossWeights = field(default_factory=LossWeights)
    steps: int = DEFAULT_STEPS
    iters: int = 500
    lr: float = 1e-3
    svf_grid_factor: int = 2
    mode: str = "discontinuous"
    seed: int = 0
    # full-resolution voxels per unit of the optimised parameters, per axis;
    # None means normalised coordinates, i.e. (extent - 1) / 2
    velocity_scale: tuple[float, float, float] | None = None
    # the velocity is a Gaussian-smoothed copy of the parameters (sigma in
    # coarse voxels). Uniform-intensity regions only constrain motion at their
    # boundaries, and without this the optimiser settles in rough non-rigid
    # fields. 0 optimises the velocity voxels directly.
    velocity_smoothing: float = 2.0
    # optional soft segmentations (4, W, H, D); when given they drive the
    # composition and the consistency term, and the seg term is active
    moving_probs: np.ndarray | None = None
    fixed_probs: np.ndarray | None = None
    divergence_factor: float = 10.0
    log_every: int = 50

    def __post_init__(self):
        self.mode = _MODE_ALIASES.get(self.mode, self.mode)
        self.validate()

    @property
    def grid(self) -> Grid:
        return self.fixed.grid

    def validate(self) -> None:
        check_grids(self.moving.grid, self.fixed.grid, self.moving_mask.grid, self.fixed_mask.grid)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.svf_grid_factor not in (1, 2, 4):
            raise ValueError(f"svf_grid_factor must be 1, 2 or 4, got {self.svf_grid_factor}")
        if not (self.velocity_smoothing >= 0):
            raise ValueError("velocity_smoothing must be >= 0")
        if not (self.lr > 0):
            raise ValueError("lr must be positive")
        if (self.moving_probs is None) != (self.fixed_probs is None):
            raise ValueError("moving_probs and fixed_probs must be given together")
        for name in ("moving_probs", "fixed_probs"):
            arr = getattr(self, name)
            if arr is not None and np.shape(arr) != (NUM_LABELS, *self.grid.extents):
                raise ValueError(f"{name} must have shape (4, {self.grid.extents}), got {np.shape(arr)}")

    def config(self) -> dict:
        return {
            "mode": self.mode,
            "iters": self.iters,
            "lr": self.lr,
            "steps": self.steps,
            "svf_grid_factor": self.svf_grid_factor,
            "seed": self.seed,
            "lambda0": self.weights.seg,
            "lambda1": self.weights.mse,
            "lambda2": self.weights.dice,
            "lambda3": self.weights.reg,
            "velocity_scale": list(self.velocity_scale) if self.velocity_scale is not None else None,
            "velocity_smoothing": self.velocity_smoothing,
            "predicted_masks": self.moving_probs is not None,
            "extents": list(self.grid.extents),
            "spacing": list(self.grid.spacing),
        }


@dataclass
class RegistrationReport:
    config: dict
    svfs: list[VectorField]  # velocity fields on the coarse grid, coarse voxel units
    sub_deformations: list[VectorField]
    deformation: VectorField
    trace: list[dict]
    warped_moving: Volume
    warped_onehot: np.ndarray
    warped_mask: LabelMap
    metrics: MetricsReport

    @property
    def grid(self) -> Grid:
        return self.deformation.grid


class _Objective:
    """Forward model from velocity parameters to the weighted loss."""

    def __init__(self, p: RegistrationProblem):
        self.p = p
        grid = p.grid
        self.extents = grid.extents
        self.coarse = svf_extents(grid.extents, p.svf_grid_factor)
        ratio = (np.array(self.extents) - 1) / (np.array(self.coarse) - 1)
        if p.velocity_scale is None:
            full_scale = (np.array(self.extents) - 1) / 2.0
        else:
            full_scale = np.asarray(p.velocity_scale, dtype=np.float64)
        self.coarse_scale = (full_scale / ratio).reshape(1, 3, 1, 1, 1)
        self.n_fields = NUM_LABELS if p.mode == "discontinuous" else 1
        self.identity = Tensor(grid.identity()[None])

        predicted = p.moving_probs is not None
        if predicted:
            moving_soft = np.asarray(p.moving_probs, dtype=np.float64)
            self.fixed_soft = Tensor(np.asarray(p.fixed_probs, dtype=np.float64))
            self.regions = LabelMap(grid, np.argmax(moving_soft, axis=0))
            self.seg_loss = (
                cross_entropy_seg(Tensor(moving_soft), p.moving_mask)
                + cross_entropy_seg(self.fixed_soft, p.fixed_mask)
            ).item()
        else:
            moving_soft = p.moving_mask.one_hot()
            self.fixed_soft = Tensor(p.fixed_mask.one_hot())
            self.regions = p.moving_mask
            self.seg_loss = 0.0
        # image and soft labels share one resampling pass
        self.moving_stack = Tensor(np.concatenate([p.moving.array[None], moving_soft])[None])
        self.fixed_img = p.fixed.data

    def init_params(self) -> Tensor:
        return Tensor(np.zeros((self.n_fields, 3, *self.coarse)), requires_grad=True)

    def velocity(self, theta: Tensor) -> Tensor:
        """Coarse-grid velocities (K, 3, w, h, d) in coarse voxel units."""
        if self.p.velocity_smoothing > 0:
            theta = smooth_gaussian(theta, self.p.velocity_smoothing)
        return theta * Tensor(self.coarse_scale)

    def displacements(self, theta: Tensor) -> Tensor:
        """Full-resolution sub-displacements (K, 3, W, H, D)."""
        v = self.velocity(theta)
        u = exp_displacement(v, self.p.steps)
        return upsample_displacement(u, self.extents)

    def compose(self, subs: Tensor) -> Tensor:
        if self.n_fields == 1:
            return subs[0]
        return compose_displacements(subs, self.regions)

    def __call__(self, theta: Tensor):
        subs = self.displacements(theta)
        u = self.compose(subs)
        phi = self.identity + ad.reshape(u, (1, 3, *self.extents))
        warped = trilinear_sample(self.moving_stack, phi)
        warped = ad.reshape(warped, warped.shape[1:])
        warped_img, warped_soft = warped[0], warped[1:]
        parts = {
            "seg": Tensor(self.seg_loss),
            "mse": ad.mean(ad.square(warped_img - self.fixed_img)),
            "dice": dice_loss(warped_soft, self.fixed_soft),
            "reg": displacement_energy(subs),
        }
        w = self.p.weights
        total = w.seg * parts["seg"] + w.mse * parts["mse"] + w.dice * parts["dice"] + w.reg * parts["reg"]
        return total, parts, subs, u


def objective(problem: RegistrationProblem) -> tuple[Callable[[Tensor], Tensor], Tensor]:
    """The scalar objective as a function of the velocity parameters, plus a zero start point."""
    obj = _Objective(problem)
    return (lambda theta: obj(theta)[0]), obj.init_params()


def register(p: RegistrationProblem, callback: Callable[[int, dict], None] | None = None) -> RegistrationReport:
    obj = _Objective(p)
    theta = obj.init_params()
    state = AdamState()
    trace: list[dict] = []
    initial = None
    for it in range(p.iters):
        theta.grad = None
        total, parts, _, _ = obj(theta)
        row = {k: float(v.item()) for k, v in parts.items()}
        row["total"] = float(total.item())
        row["iter"] = it
        if initial is None:
            initial = row["total"]
        if not math.isfinite(row["total"]) or row["total"] > p.divergence_factor * max(initial, DIVERGENCE_FLOOR):
            raise RegistrationDiverged(
                f"total loss {row['total']:.6g} at iteration {it} exceeds "
                f"{p.divergence_factor:g}x the initial value {initial:.6g}; try a smaller lr"
            )
        trace.append(row)
        if callback is not None:
            callback(it, row)
        if p.log_every and (it % p.log_every == 0 or it == p.iters - 1):
            log.info(
                "iter %4d  total %.6f  mse %.6f  dice %.6f  reg %.6f",
                it, row["total"], row["mse"], row["dice"], row["reg"],
            )
        total.backward()
        ad.adam_step([theta], state, p.lr)

    return _finish(p, obj, theta, trace)


def _finish(p: RegistrationProblem, obj: _Objective, theta: Tensor, trace: list[dict]) -> RegistrationReport:
    grid = p.grid
    frozen = Tensor(theta.data)
    subs = obj.displacements(frozen)
    u = obj.compose(subs)
    ident = grid.identity()
    deformation = VectorField(grid, ident + u.data, "deformation")
    sub_defs = [VectorField(grid, ident + subs.data[k], "deformation") for k in range(subs.shape[0])]
    coarse_grid = Grid(obj.coarse, tuple(np.array(grid.spacing) * (np.array(grid.extents) - 1) / (np.array(obj.coarse) - 1)))
    velocity = obj.velocity(frozen).data
    svfs = [VectorField(coarse_grid, velocity[k], "velocity") for k in range(theta.shape[0])]
    warped_moving = Volume(grid, sample(p.moving.array[None], deformation.data).data[0])
    warped_onehot = sample(p.moving_mask.one_hot(), deformation.data).data
    warped_mask = hard_labels(warped_onehot, grid)
    metrics = evaluate(warped_mask, p.fixed_mask)
    return RegistrationReport(
        config=p.config(),
        svfs=svfs,
        sub_deformations=sub_defs,
        deformation=deformation,
        trace=trace,
        warped_moving=warped_moving,
        warped_onehot=warped_onehot,
        warped_mask=warped_mask,
        metrics=metrics,
    )


def split_by_masks(img: Volume, mask: LabelMap) -> list[Volume]:
    """Four masked copies of ``img`` in (LVBP, LVM, RV, background) order."""
    check_grids(img.grid, mask.grid)
    arr = img.array
    return [Volume(img.grid, np.where(mask.labels == k, arr, 0.0)) for k in REGION_ORDER]


def warp_with(report: RegistrationReport, extra):
    """Apply the report's composed deformation to another volume or label map."""
    from .warp import warp_labels, warp_volume

    if isinstance(extra, LabelMap):
        return warp_labels(extra, report.deformation)
    if isinstance(extra, Volume):
        return Volume(extra.grid, warp_volume(extra, report.deformation).array.copy())
    raise TypeError(f"warp_with expects a Volume or LabelMap, got {type(extra).__name__}")


def check_bookkeeping(report: RegistrationReport, weights: LossWeights, tol: float = 1e-9) -> float:
    """Largest deviation between a traced total and the weighted sum of its parts."""
    worst = 0.0
    for row in report.trace:
        worst = max(worst, abs(row["total"] - combine(row, weights)))
    if worst > tol:
        raise AssertionError(f"trace totals deviate from the weighted parts by {worst:.3g}")
    return worst


def save_report(report: RegistrationReport, out_dir) -> Path:
    """Write fields, warped outputs, trace CSV, metrics JSON and a manifest."""
    from .data.nifti import write_nifti

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "deformation": "deformation.nii",
        "warped_moving": "warped_moving.nii",
        "warped_mask": "warped_mask.nii",
    }
    write_nifti(report.deformation, out / files["deformation"])
    write_nifti(report.warped_moving, out / files["warped_moving"])
    write_nifti(report.warped_mask, out / files["warped_mask"])
    names = ["svf_lvbp", "svf_lvm", "svf_rv", "svf_background"] if len(report.svfs) == NUM_LABELS else ["svf"]
    for name, svf in zip(names, report.svfs):
        files[name] = f"{name}.nii"
        write_nifti(svf, out / files[name])

    with open(out / "loss_trace.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iter", "seg", "mse", "dice", "reg", "total"], lineterminator="\n")
        writer.writeheader()
        for row in report.trace:
            writer.writerow({k: (row[k] if k == "iter" else repr(row[k])) for k in writer.fieldnames})
    (out / "metrics.json").write_text(report.metrics.to_json() + "\n")
    manifest = {
        "config": report.config,
        "seed": report.config.get("seed"),
        "files": files,
        "final_loss": report.trace[-1] if report.trace else None,
        "metrics": report.metrics.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out
