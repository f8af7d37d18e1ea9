"""Central finite-difference checks for every differentiable operation.

Each check builds a scalar function of one input array, takes the reverse-mode
gradient and compares it with central differences. The relative error is
``max|analytic - numeric| / max(max|numeric|, 1e-12)``.

Tolerances: 1e-6 for autodiff primitives, 1e-4 for composite graphs, 1e-3 for
anything that goes through trilinear interpolation (kinks at voxel faces).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .coattention import DEFAULT_MAX_POSITIONS, AttentionBudgetError, CoAttentionParams, coattend
from .fields import displacement_energy, exp_displacement, resize_linear, smooth_gaussian
from .grid import Grid, LabelMap, Volume
from .losses import LossWeights, cross_entropy_seg, dice_loss, mse_loss, total_loss
from .warp import trilinear_sample

TOL_PRIMITIVE = 1e-6
TOL_COMPOSITE = 1e-4
TOL_INTERP = 1e-3


@dataclass
class CheckResult:
    name: str
    rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_err) and self.rel_err < self.tol)


def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def analytic_grad(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    t = Tensor(x.copy(), requires_grad=True)
    out = fn(t)
    out.backward()
    return t.grad if t.grad is not None else np.zeros_like(x)


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-12))


def check(name: str, fn: Callable[[Tensor], Tensor], x: np.ndarray, tol: float, h: float = 1e-5,
          corrupt: bool = False) -> CheckResult:
    a = analytic_grad(fn, x)
    if corrupt:
        a = a * 1.5 + 1e-3
    n = numeric_grad(lambda arr: float(fn(Tensor(arr)).item()), x.copy(), h)
    return CheckResult(name, rel_error(a, n), tol)


def _generic(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _interior_coords(rng, size, n):
    # keep samples off voxel faces so the interpolant is differentiable there
    base = rng.integers(0, size - 1, size=(1, 3, n)).astype(float)
    return base + rng.uniform(0.2, 0.8, size=(1, 3, n))


def build_checks(seed: int = 0, size: int = 4) -> list[tuple[str, Callable, np.ndarray, float]]:
    """(name, fn, x, tol) for every differentiable operation."""
    if size < 2:
        raise ValueError("--size must be at least 2")
    if size**3 > DEFAULT_MAX_POSITIONS:
        raise AttentionBudgetError(
            f"--size {size} gives N={size**3} co-attention positions; the N x N budget allows N <= "
            f"{DEFAULT_MAX_POSITIONS} (size <= {round(DEFAULT_MAX_POSITIONS ** (1 / 3))})"
        )
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, Callable, np.ndarray, float]] = []
    P = TOL_PRIMITIVE

    b = Tensor(_generic(rng, (3, 4)))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    w = Tensor(_generic(rng, (3, 4)))
    checks += [
        ("add", lambda t: ad.sum((t + b) * w), _generic(rng, (3, 4)), P),
        ("sub", lambda t: ad.sum((b - t) * w), _generic(rng, (3, 4)), P),
        ("mul", lambda t: ad.sum(t * b), _generic(rng, (3, 4)), P),
        ("div", lambda t: ad.sum(b / t), pos.copy(), P),
        ("neg", lambda t: ad.sum(-t * w), _generic(rng, (3, 4)), P),
        ("matmul", lambda t: ad.sum((t @ Tensor(_generic(np.random.default_rng(1), (5, 3)))) * Tensor(np.arange(12.0).reshape(4, 3))),
         _generic(rng, (4, 5)), P),
        ("exp", lambda t: ad.sum(ad.exp(t) * w), _generic(rng, (3, 4)), P),
        ("log", lambda t: ad.sum(ad.log(t) * w), pos.copy(), P),
        ("square", lambda t: ad.sum(ad.square(t) * w), _generic(rng, (3, 4)), P),
        ("sigmoid", lambda t: ad.sum(ad.sigmoid(t) * w), _generic(rng, (3, 4)), P),
        # keep relu inputs away from the kink
        ("relu", lambda t: ad.sum(ad.relu(t) * w), np.sign(_generic(rng, (3, 4))) * rng.uniform(0.1, 2, (3, 4)), P),
        ("softmax", lambda t: ad.sum(ad.softmax(t) * Tensor(np.arange(6.0))), _generic(rng, (6,)), P),
        ("sum", lambda t: ad.sum(ad.sum(t, axis=0) * Tensor(np.arange(4.0))), _generic(rng, (3, 4)), P),
        ("mean", lambda t: ad.sum(ad.mean(t, axis=1) * Tensor(np.arange(3.0))), _generic(rng, (3, 4)), P),
        ("concat", lambda t: ad.sum(ad.concat([t, b], axis=0) * Tensor(np.arange(24.0).reshape(6, 4))), _generic(rng, (3, 4)), P),
        ("stack", lambda t: ad.sum(ad.stack([t, b], axis=1) * Tensor(np.arange(24.0).reshape(3, 2, 4))), _generic(rng, (3, 4)), P),
        ("reshape", lambda t: ad.sum(ad.reshape(t, (2, 6)) * Tensor(np.arange(12.0).reshape(2, 6))), _generic(rng, (3, 4)), P),
        ("transpose", lambda t: ad.sum(ad.transpose(t) * Tensor(np.arange(12.0).reshape(4, 3))), _generic(rng, (3, 4)), P),
        ("getitem", lambda t: ad.sum(t[1:, ::2] * Tensor(np.arange(4.0).reshape(2, 2))), _generic(rng, (3, 4)), P),
    ]

    n = size
    grid = Grid((n, n, n))
    img = rng.uniform(0, 1, size=(1, 2, n, n, n))
    coords = _interior_coords(rng, n, 10)
    proj = Tensor(rng.standard_normal((1, 2, 10)))
    checks += [
        ("warp_image", lambda t: ad.sum(trilinear_sample(t, Tensor(coords)) * proj), img.copy(), TOL_INTERP),
        ("warp_coords", lambda t: ad.sum(trilinear_sample(Tensor(img), t) * proj), coords.copy(), TOL_INTERP),
    ]

    v = rng.standard_normal((1, 3, n, n, n)) * 0.3
    wv = Tensor(rng.standard_normal((1, 3, n, n, n)))
    checks += [
        ("integrate_svf", lambda t: ad.sum(exp_displacement(t, 7) * wv), v.copy(), TOL_INTERP),
        ("resize_linear", lambda t: ad.sum(resize_linear(t, (n + 3,) * 3) * Tensor(np.cos(np.arange(3 * (n + 3) ** 3)).reshape(1, 3, n + 3, n + 3, n + 3))),
         v.copy(), P),
        ("smooth_gaussian", lambda t: ad.sum(smooth_gaussian(t, 1.0) * wv), v.copy(), P),
        ("diffusion_energy", lambda t: displacement_energy(t), rng.standard_normal((2, 3, n, n, n)), TOL_COMPOSITE),
    ]

    labels = rng.integers(0, 4, size=(n, n, n))
    seg = LabelMap(grid, labels)
    fixed_img = Volume(grid, rng.uniform(0, 1, size=(n, n, n)))
    soft_ref = Tensor(seg.one_hot())
    probs = ad.softmax(Tensor(rng.standard_normal((n, n, n, 4))), axis=-1).data
    probs = np.moveaxis(probs, -1, 0)
    checks += [
        ("mse_loss", lambda t: mse_loss(Volume(grid, t), fixed_img), rng.uniform(0, 1, size=(n, n, n)), TOL_COMPOSITE),
        ("dice_loss", lambda t: dice_loss(t, soft_ref), rng.uniform(0.05, 1, size=(4, n, n, n)), TOL_COMPOSITE),
        ("cross_entropy", lambda t: cross_entropy_seg(t, seg), probs.copy(), TOL_COMPOSITE),
        ("total_loss", lambda t: total_loss(
            {"seg": ad.sum(t[0]), "mse": ad.sum(ad.square(t[1])), "dice": ad.sum(t[2] * t[3]), "reg": ad.sum(ad.exp(t[3]))},
            LossWeights()), _generic(rng, (4, 2)), TOL_COMPOSITE),
    ]

    c = 3
    spatial = (2, 2, 2)
    params = CoAttentionParams.init(c, seed)
    for p in params.parameters():
        p.data = p.data + 0.2 * rng.standard_normal(p.shape)  # move gates and affines off their init values
    f_mov = rng.standard_normal((c, *spatial))
    f_fix = rng.standard_normal((c, *spatial))
    probe = Tensor(rng.standard_normal((c, *spatial)))
    probe2 = Tensor(rng.standard_normal((c, *spatial)))

    def att_loss(m, f, prm):
        om, of = coattend(m, f, prm)
        return ad.sum(om * probe) + ad.sum(of * probe2)

    checks.append(("coattend_mov", lambda t: att_loss(t, Tensor(f_fix), params), f_mov.copy(), TOL_COMPOSITE))
    checks.append(("coattend_fix", lambda t: att_loss(Tensor(f_mov), t, params), f_fix.copy(), TOL_COMPOSITE))
    for pname in ("w_f", "w_g", "w_h1", "w_h2", "gate_mov", "out_fix", "scale_mov", "shift_fix"):
        def fn(t, pname=pname):
            prm = CoAttentionParams(**{k: Tensor(getattr(params, k).data) for k in params.__dataclass_fields__})
            setattr(prm, pname, t)
            return att_loss(Tensor(f_mov), Tensor(f_fix), prm)
        checks.append((f"coattend_{pname}", fn, getattr(params, pname).data.copy(), TOL_COMPOSITE))

    checks.append(("engine_objective", *_engine_check(rng, max(size, 4)), TOL_INTERP))
    return checks


def _engine_check(rng, n):
    from .data.phantom import Geometry, Motion, PhantomSpec, generate_phantom
    from .engine import RegistrationProblem, _Objective

    grid = Grid((n, n, n))
    c = (n - 1) / 2
    geo = Geometry((c, c, c), lvbp_radius=0.6, lvm_thickness=0.6, rv_offset=(0.0, 0.9, 0.0), rv_radius=0.6)
    pair = generate_phantom(PhantomSpec(grid, geo, Motion("rigid_shift", shift=(0.3, 0.0, 0.0)), 0.02, 0))
    prob = RegistrationProblem(pair.moving, pair.fixed, pair.moving_mask, pair.fixed_mask, iters=1, log_every=0)
    obj = _Objective(prob)
    theta = obj.init_params().data + 0.01 * rng.standard_normal(obj.init_params().shape)
    return (lambda t: obj(t)[0]), theta


def run_checks(seed: int = 0, size: int = 4, corrupt: str | None = None) -> list[CheckResult]:
    checks = build_checks(seed, size)
    names = [c[0] for c in checks]
    if corrupt is not None and corrupt not in names:
        raise ValueError(f"unknown op {corrupt!r} for corruption; choose from {', '.join(names)}")
    return [check(name, fn, x, tol, corrupt=(name == corrupt)) for name, fn, x, tol in checks]


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'rel_err':>10}  {'tol':>7}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.rel_err:10.2e}  {r.tol:7.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
