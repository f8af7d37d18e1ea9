"""Differentiable trilinear resampling (spatial transformer).

Convention: ``out(x) = img(phi(x))``, coordinates in voxel units, samples
outside the domain are clamped to the nearest edge voxel.

The interpolant has kinks at voxel faces. A coordinate sitting exactly on a
face (every coordinate of the identity map) gets the one-sided slope that
descends, or zero when both sides ascend, so an exact minimum at the identity
is a fixed point of gradient descent.
"""
from __future__ import annotations

import numba
import numpy as np

from .autodiff import Tensor, as_tensor, make_node
from .grid import NUM_LABELS, LabelMap, VectorField, Volume, check_grids


@numba.njit(cache=True)
def _sample_fwd(img, x, out):
    B, C, W, H, D = img.shape
    n = x.shape[2]
    for b in range(B):
        for p in range(n):
            px = min(max(x[b, 0, p], 0.0), W - 1.0)
            py = min(max(x[b, 1, p], 0.0), H - 1.0)
            pz = min(max(x[b, 2, p], 0.0), D - 1.0)
            x0 = int(np.floor(px))
            y0 = int(np.floor(py))
            z0 = int(np.floor(pz))
            fx = px - x0
            fy = py - y0
            fz = pz - z0
            x1 = min(x0 + 1, W - 1)
            y1 = min(y0 + 1, H - 1)
            z1 = min(z0 + 1, D - 1)
            gx = 1.0 - fx
            gy = 1.0 - fy
            gz = 1.0 - fz
            for c in range(C):
                out[b, c, p] = (
                    img[b, c, x0, y0, z0] * gx * gy * gz
                    + img[b, c, x0, y0, z1] * gx * gy * fz
                    + img[b, c, x0, y1, z0] * gx * fy * gz
                    + img[b, c, x0, y1, z1] * gx * fy * fz
                    + img[b, c, x1, y0, z0] * fx * gy * gz
                    + img[b, c, x1, y0, z1] * fx * gy * fz
                    + img[b, c, x1, y1, z0] * fx * fy * gz
                    + img[b, c, x1, y1, z1] * fx * fy * fz
                )


@numba.njit(cache=True)
def _value(img, b, c, px, py, pz):
    W, H, D = img.shape[2], img.shape[3], img.shape[4]
    x0 = min(int(np.floor(px)), W - 1)
    y0 = min(int(np.floor(py)), H - 1)
    z0 = min(int(np.floor(pz)), D - 1)
    fx = px - x0
    fy = py - y0
    fz = pz - z0
    x1 = min(x0 + 1, W - 1)
    y1 = min(y0 + 1, H - 1)
    z1 = min(z0 + 1, D - 1)
    return (
        img[b, c, x0, y0, z0] * (1 - fx) * (1 - fy) * (1 - fz)
        + img[b, c, x0, y0, z1] * (1 - fx) * (1 - fy) * fz
        + img[b, c, x0, y1, z0] * (1 - fx) * fy * (1 - fz)
        + img[b, c, x0, y1, z1] * (1 - fx) * fy * fz
        + img[b, c, x1, y0, z0] * fx * (1 - fy) * (1 - fz)
        + img[b, c, x1, y0, z1] * fx * (1 - fy) * fz
        + img[b, c, x1, y1, z0] * fx * fy * (1 - fz)
        + img[b, c, x1, y1, z1] * fx * fy * fz
    )


@numba.njit(cache=True)
def _face_slope(img, g, b, p, pos, axis, right):
    """Upstream-weighted one-sided slope of the interpolant along ``axis``."""
    n = img.shape[2 + axis]
    step = 1.0 if right else -1.0
    q = pos[axis] + step
    if q < 0.0 or q > n - 1.0:
        return 0.0
    s = 0.0
    for c in range(img.shape[1]):
        a = _value(img, b, c, pos[0], pos[1], pos[2])
        if axis == 0:
            o = _value(img, b, c, q, pos[1], pos[2])
        elif axis == 1:
            o = _value(img, b, c, pos[0], q, pos[2])
        else:
            o = _value(img, b, c, pos[0], pos[1], q)
        s += g[b, c, p] * (o - a) * step
    return s


@numba.njit(cache=True)
def _descent_slope(left, right):
    if left <= 0.0 <= right:
        return 0.0
    if right < 0.0 and left > 0.0:
        return right if -right >= left else left
    if right < 0.0:
        return right
    return left


@numba.njit(cache=True)
def _sample_bwd(img, x, g, g_img, g_x, want_img, want_x):
    B, C, W, H, D = img.shape
    n = x.shape[2]
    for b in range(B):
        for p in range(n):
            rx = x[b, 0, p]
            ry = x[b, 1, p]
            rz = x[b, 2, p]
            px = min(max(rx, 0.0), W - 1.0)
            py = min(max(ry, 0.0), H - 1.0)
            pz = min(max(rz, 0.0), D - 1.0)
            x0 = int(np.floor(px))
            y0 = int(np.floor(py))
            z0 = int(np.floor(pz))
            fx = px - x0
            fy = py - y0
            fz = pz - z0
            x1 = min(x0 + 1, W - 1)
            y1 = min(y0 + 1, H - 1)
            z1 = min(z0 + 1, D - 1)
            gx = 1.0 - fx
            gy = 1.0 - fy
            gz = 1.0 - fz
            dx = 0.0
            dy = 0.0
            dz = 0.0
            for c in range(C):
                gc = g[b, c, p]
                if want_img:
                    g_img[b, c, x0, y0, z0] += gc * gx * gy * gz
                    g_img[b, c, x0, y0, z1] += gc * gx * gy * fz
                    g_img[b, c, x0, y1, z0] += gc * gx * fy * gz
                    g_img[b, c, x0, y1, z1] += gc * gx * fy * fz
                    g_img[b, c, x1, y0, z0] += gc * fx * gy * gz
                    g_img[b, c, x1, y0, z1] += gc * fx * gy * fz
                    g_img[b, c, x1, y1, z0] += gc * fx * fy * gz
                    g_img[b, c, x1, y1, z1] += gc * fx * fy * fz
                if want_x:
                    v000 = img[b, c, x0, y0, z0]
                    v001 = img[b, c, x0, y0, z1]
                    v010 = img[b, c, x0, y1, z0]
                    v011 = img[b, c, x0, y1, z1]
                    v100 = img[b, c, x1, y0, z0]
                    v101 = img[b, c, x1, y0, z1]
                    v110 = img[b, c, x1, y1, z0]
                    v111 = img[b, c, x1, y1, z1]
                    dx += gc * (
                        (v100 - v000) * gy * gz + (v101 - v001) * gy * fz
                        + (v110 - v010) * fy * gz + (v111 - v011) * fy * fz
                    )
                    dy += gc * (
                        (v010 - v000) * gx * gz + (v011 - v001) * gx * fz
                        + (v110 - v100) * fx * gz + (v111 - v101) * fx * fz
                    )
                    dz += gc * (
                        (v001 - v000) * gx * gy + (v011 - v010) * gx * fy
                        + (v101 - v100) * fx * gy + (v111 - v110) * fx * fy
                    )
            if want_x and (fx == 0.0 or fy == 0.0 or fz == 0.0):
                pos = np.array([px, py, pz])
                if fx == 0.0:
                    dx = _descent_slope(_face_slope(img, g, b, p, pos, 0, False), _face_slope(img, g, b, p, pos, 0, True))
                if fy == 0.0:
                    dy = _descent_slope(_face_slope(img, g, b, p, pos, 1, False), _face_slope(img, g, b, p, pos, 1, True))
                if fz == 0.0:
                    dz = _descent_slope(_face_slope(img, g, b, p, pos, 2, False), _face_slope(img, g, b, p, pos, 2, True))
            if want_x:
                # clamped coordinates do not move the sample
                g_x[b, 0, p] = dx if 0.0 <= rx <= W - 1.0 else 0.0
                g_x[b, 1, p] = dy if 0.0 <= ry <= H - 1.0 else 0.0
                g_x[b, 2, p] = dz if 0.0 <= rz <= D - 1.0 else 0.0


def trilinear_sample(img, coords) -> Tensor:
    """Sample a batched multi-channel volume at batched voxel coordinates.

    img: (B, C, W, H, D); coords: (B, 3, *P). Returns (B, C, *P).
    Differentiable w.r.t. both arguments. The coordinate gradient is zero
    where a coordinate was clamped.
    """
    img, coords = as_tensor(img), as_tensor(coords)
    if img.ndim != 5 or coords.ndim < 2 or coords.shape[1] != 3 or coords.shape[0] != img.shape[0]:
        raise ValueError(f"trilinear_sample: bad shapes img={img.shape} coords={coords.shape}")
    B, C = img.shape[:2]
    out_spatial = coords.shape[2:]
    vol = np.ascontiguousarray(img.data)
    x = np.ascontiguousarray(coords.data.reshape(B, 3, -1))
    out = np.empty((B, C, x.shape[2]))
    _sample_fwd(vol, x, out)

    def _bw(g):
        want_img, want_x = img.requires_grad, coords.requires_grad
        g_img = np.zeros(vol.shape) if want_img else np.zeros((1, 1, 1, 1, 1))
        g_x = np.zeros(x.shape) if want_x else np.zeros((1, 1, 1))
        _sample_bwd(vol, x, np.ascontiguousarray(g.reshape(B, C, -1)), g_img, g_x, want_img, want_x)
        return (g_img if want_img else None, g_x.reshape(coords.shape) if want_x else None)

    return make_node(out.reshape(B, C, *out_spatial), (img, coords), _bw, "trilinear_sample")


def sample(img, coords) -> Tensor:
    """Unbatched form: img (C, W, H, D), coords (3, *P) -> (C, *P)."""
    img, coords = as_tensor(img), as_tensor(coords)
    out = trilinear_sample(img.reshape((1, *img.shape)), coords.reshape((1, *coords.shape)))
    return out.reshape(out.shape[1:])


def warp_volume(img: Volume, phi: VectorField) -> Volume:
    """out(x) = img(phi(x)) with trilinear interpolation."""
    _check_deformation(phi)
    check_grids(img.grid, phi.grid)
    out = sample(img.data.reshape((1, *img.grid.extents)), phi.data)
    return Volume(img.grid, out.reshape(img.grid.extents))


def warp_onehot(seg: LabelMap, phi: VectorField) -> Tensor:
    """Trilinearly warp the one-hot encoding of ``seg``; returns (4, W, H, D)."""
    _check_deformation(phi)
    check_grids(seg.grid, phi.grid)
    return sample(Tensor(seg.one_hot()), phi.data)


def warp_probs(probs, phi: VectorField) -> Tensor:
    """Warp a (4, W, H, D) soft segmentation."""
    _check_deformation(phi)
    probs = as_tensor(probs)
    if probs.shape != (NUM_LABELS, *phi.grid.extents):
        raise ValueError(f"probability map {probs.shape} does not match grid {phi.grid.extents}")
    return sample(probs, phi.data)


def hard_labels(onehot, grid) -> LabelMap:
    """Per-voxel argmax of a soft one-hot map; ties go to the lowest label."""
    arr = onehot.data if isinstance(onehot, Tensor) else np.asarray(onehot)
    return LabelMap(grid, np.argmax(arr, axis=0))


def warp_labels(seg: LabelMap, phi: VectorField) -> LabelMap:
    return hard_labels(warp_onehot(seg, phi), seg.grid)


def _check_deformation(phi: VectorField) -> None:
    if phi.role != "deformation":
        raise ValueError(f"warping needs a deformation field, got role {phi.role!r}")
