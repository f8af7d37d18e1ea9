"""Velocity, displacement and deformation fields.

Stationary velocity fields are exponentiated by scaling and squaring; per-region
deformations are stitched together through a label partition so the result is
smooth inside each region and free to jump across region boundaries.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import (
    NUM_LABELS,
    REGION_ORDER,
    Grid,
    GridMismatchError,
    LabelMap,
    VectorField,
    Volume,
    check_grids,
)
from .warp import trilinear_sample

__all__ = [
    "DEFAULT_STEPS",
    "exp_displacement",
    "integrate_svf",
    "compose_fields",
    "compose_displacements",
    "upsample_displacement",
    "jacobian_determinant",
    "regional_jacobian_determinant",
    "diffusion_energy",
    "displacement_energy",
]

DEFAULT_STEPS = 7


def exp_displacement(v: Tensor, steps: int = DEFAULT_STEPS) -> Tensor:
    """Displacement of exp(v) for a batch of velocity fields.

    ``v`` has shape (B, 3, W, H, D) in voxel units. Each squaring step is
    ``u <- u + u(x + u)`` with clamp-to-edge trilinear lookup.
    """
    if steps < 1:
        raise ValueError(f"integration needs steps >= 1, got {steps}")
    v = ad.as_tensor(v)
    ident = Tensor(_identity(v.shape[2:]))
    u = v * (1.0 / 2**steps)
    for _ in range(steps):
        u = u + trilinear_sample(u, ident + u)
    return u


def integrate_svf(v: VectorField, steps: int = DEFAULT_STEPS) -> VectorField:
    """phi = exp(v) by scaling and squaring."""
    if v.role != "velocity":
        raise ValueError(f"integrate_svf needs a velocity field, got {v.role!r}")
    u = exp_displacement(v.data.reshape((1, *v.data.shape)), steps)
    u = u.reshape(v.data.shape)
    return VectorField(v.grid, Tensor(v.grid.identity()) + u, "deformation")


def compose_fields(phis: Sequence[VectorField], masks: LabelMap) -> VectorField:
    """phi(x) = sum_k phi_k(x) * S_k(x) over (LVBP, LVM, RV, background).

    The masks form a hard partition, so each voxel copies exactly one
    sub-field's vector.
    """
    if len(phis) != NUM_LABELS:
        raise ValueError(f"compose_fields needs {NUM_LABELS} sub-fields, got {len(phis)}")
    for p in phis:
        if p.role != "deformation":
            raise ValueError(f"compose_fields needs deformation fields, got {p.role!r}")
    grid = check_grids(masks.grid, *(p.grid for p in phis))
    onehot = masks.one_hot()
    out = None
    for phi, label in zip(phis, REGION_ORDER):
        term = phi.data * Tensor(onehot[label][None])
        out = term if out is None else out + term
    return VectorField(grid, out, "deformation")


def compose_displacements(u: Tensor, masks: LabelMap) -> Tensor:
    """Batched selection: ``u`` is (4, 3, W, H, D) in REGION_ORDER.

    Same selection as :func:`compose_fields`, applied to displacements;
    adding the identity afterwards gives the composed deformation.
    """
    if u.shape[0] != NUM_LABELS or u.shape[2:] != masks.grid.extents:
        raise GridMismatchError(f"sub-displacements {u.shape} do not match masks {masks.grid.extents}")
    onehot = masks.one_hot()[list(REGION_ORDER)]  # (4, W, H, D) in sub-field order
    return ad.sum(u * Tensor(onehot[:, None]), axis=0)


def _identity(extents) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in extents], indexing="ij"))


def svf_extents(extents, factor: int) -> tuple[int, int, int]:
    """Extents of the coarse grid used for velocity parameters."""
    return tuple(max(2, -(-int(n) // factor)) for n in extents)


def interpolation_matrix(n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in) corner-aligned 1-D linear interpolation weights."""
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    A = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    A[rows, i0] += 1.0 - frac
    A[rows, i1] += frac
    return A


def gaussian_matrix(n: int, sigma: float) -> np.ndarray:
    """(n, n) row-normalised 1-D Gaussian smoothing; rows sum to one so constants pass unchanged."""
    if sigma <= 0:
        return np.eye(n)
    i = np.arange(n)
    K = np.exp(-0.5 * ((i[:, None] - i[None, :]) / sigma) ** 2)
    return K / K.sum(axis=1, keepdims=True)


def separable_apply(u, mats, op: str = "separable") -> Tensor:
    """Apply one matrix per spatial axis to the last three axes of ``u``."""
    u = ad.as_tensor(u)
    ax, ay, az = mats
    out = np.einsum("Xx,...xyz->...Xyz", ax, u.data, optimize=True)
    out = np.einsum("Yy,...Xyz->...XYz", ay, out, optimize=True)
    out = np.einsum("Zz,...XYz->...XYZ", az, out, optimize=True)

    def _bw(g):
        g = np.einsum("Zz,...XYZ->...XYz", az, g, optimize=True)
        g = np.einsum("Yy,...XYz->...Xyz", ay, g, optimize=True)
        return (np.einsum("Xx,...Xyz->...xyz", ax, g, optimize=True),)

    return ad.make_node(out, (u,), _bw, op)


def resize_linear(u, target_extents) -> Tensor:
    """Separable trilinear resize of the last three axes (corner-aligned)."""
    u = ad.as_tensor(u)
    mats = [interpolation_matrix(int(t), int(n)) for t, n in zip(target_extents, u.shape[-3:])]
    return separable_apply(u, mats, "resize_linear")


def smooth_gaussian(u, sigma: float) -> Tensor:
    """Separable Gaussian smoothing of the last three axes (sigma in voxels)."""
    u = ad.as_tensor(u)
    return separable_apply(u, [gaussian_matrix(n, sigma) for n in u.shape[-3:]], "smooth_gaussian")


def upsample_displacement(u: Tensor, target_extents) -> Tensor:
    """Trilinearly resample batched displacements (B, 3, w, h, d) to a finer grid.

    Grids are corner-aligned, so vectors are rescaled per axis by
    (N - 1) / (n - 1) to stay in voxel units of the target grid.
    """
    coarse = np.array(u.shape[2:])
    target = np.array(target_extents)
    if np.array_equal(coarse, target):
        return u
    ratio = (target - 1) / (coarse - 1)
    return resize_linear(u, target) * Tensor(ratio.reshape(1, 3, 1, 1, 1))


def jacobian_determinant(phi: VectorField) -> Volume:
    """det(d phi / dx): central differences inside, one-sided at the borders."""
    if phi.role != "deformation":
        raise ValueError(f"jacobian_determinant needs a deformation, got {phi.role!r}")
    arr = phi.array
    # J[i, j] = d phi_i / d x_j
    J = np.empty((3, 3, *phi.grid.extents))
    for i in range(3):
        grads = np.gradient(arr[i], axis=(0, 1, 2))
        for j in range(3):
            J[i, j] = grads[j]
    det = np.linalg.det(np.moveaxis(J, (0, 1), (-2, -1)))
    return Volume(phi.grid, det)


def regional_jacobian_determinant(phi: VectorField, regions: LabelMap) -> np.ndarray:
    """Jacobian determinant using only differences inside each voxel's region.

    Central differences when both neighbours share the voxel's label,
    one-sided differences when only one does. Voxels with no same-label
    neighbour along some axis get NaN.
    """
    check_grids(phi.grid, regions.grid)
    arr = phi.array
    lab = regions.labels
    J = np.full((3, 3, *phi.grid.extents), np.nan)
    for ax in range(3):
        n = arr.shape[1 + ax]
        fwd = np.zeros(lab.shape, dtype=bool)
        bwd = np.zeros(lab.shape, dtype=bool)
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[ax] = slice(0, n - 1)
        sl_hi[ax] = slice(1, n)
        same = lab[tuple(sl_lo)] == lab[tuple(sl_hi)]
        fwd[tuple(sl_lo)] = same
        bwd[tuple(sl_hi)] = same
        for i in range(3):
            d_fwd = np.zeros(lab.shape)
            d_bwd = np.zeros(lab.shape)
            diff = arr[i][tuple(sl_hi)] - arr[i][tuple(sl_lo)]
            d_fwd[tuple(sl_lo)] = diff
            d_bwd[tuple(sl_hi)] = diff
            both = fwd & bwd
            J[i, ax] = np.where(both, 0.5 * (d_fwd + d_bwd), np.where(fwd, d_fwd, np.where(bwd, d_bwd, np.nan)))
    J = np.moveaxis(J, (0, 1), (-2, -1))
    ok = np.isfinite(J).all(axis=(-2, -1))
    det = np.full(lab.shape, np.nan)
    det[ok] = np.linalg.det(J[ok])
    return det


def displacement_energy(u) -> Tensor:
    """Diffusion energy of a (..., 3, W, H, D) displacement tensor.

    Sum over axes of the mean squared forward difference (summed over
    components). Leading batch axes are averaged.
    """
    u = ad.as_tensor(u)
    diffs = []
    total = 0.0
    for ax in (-3, -2, -1):
        d = np.diff(u.data, axis=ax)
        positions = d.size // 3  # difference positions, batch included
        diffs.append((ax, d, positions))
        total += float(np.sum(d * d)) / positions

    def _bw(g):
        grad = np.zeros(u.shape)
        for ax, d, positions in diffs:
            w = (2.0 * float(g) / positions) * d
            n = u.shape[ax]
            hi = [slice(None)] * u.ndim
            lo = [slice(None)] * u.ndim
            hi[ax] = slice(1, n)
            lo[ax] = slice(0, n - 1)
            grad[tuple(hi)] += w
            grad[tuple(lo)] -= w
        return (grad,)

    return ad.make_node(np.array(total), (u,), _bw, "displacement_energy")


def diffusion_energy(u: VectorField) -> Tensor:
    """R = ||grad u||^2 averaged over voxels, forward differences in voxel units."""
    if u.role != "displacement":
        raise ValueError(f"diffusion_energy needs a displacement field, got {u.role!r}")
    return displacement_energy(u.data)

