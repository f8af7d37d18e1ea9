"""Intensity and extent normalisation applied before registration."""
from __future__ import annotations

import numpy as np

from ..grid import Grid, LabelMap, Volume


def histogram_match(src: Volume, ref: Volume, levels: int = 256) -> Volume:
    """Monotone remapping of ``src`` intensities onto the distribution of ``ref``.

    Both images are summarised by ``levels`` evenly spaced quantiles; src
    intensities are mapped piecewise-linearly from src quantiles to ref
    quantiles.
    """
    if levels < 2:
        raise ValueError(f"histogram matching needs levels >= 2, got {levels}")
    q = np.linspace(0.0, 1.0, levels)
    s = src.array.ravel()
    src_q = np.quantile(s, q)
    ref_q = np.quantile(ref.array.ravel(), q)
    # np.interp needs strictly increasing knots; merge tied src quantiles
    knots, first = np.unique(src_q, return_index=True)
    last = np.r_[first[1:] - 1, len(src_q) - 1]
    values = 0.5 * (ref_q[first] + ref_q[last])
    if len(knots) == 1:
        out = np.full_like(s, values[0])
    else:
        out = np.interp(s, knots, values)
    return Volume(src.grid, out.reshape(src.grid.extents))


def _crop_pad_axis(arr: np.ndarray, axis: int, target: int) -> np.ndarray:
    n = arr.shape[axis]
    diff = n - target
    if diff > 0:
        start = (diff + 1) // 2
        idx = [slice(None)] * arr.ndim
        idx[axis] = slice(start, start + target)
        return arr[tuple(idx)]
    if diff < 0:
        pad = -diff
        widths = [(0, 0)] * arr.ndim
        widths[axis] = ((pad + 1) // 2, pad // 2)
        return np.pad(arr, widths, constant_values=0)
    return arr


def crop_pad(img, target_extents):
    """Centre-crop and zero-pad to ``target_extents``; odd differences put the extra voxel on the low side."""
    target = tuple(int(t) for t in target_extents)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target extents must be three positive integers, got {target_extents}")
    if isinstance(img, LabelMap):
        arr = img.labels
    elif isinstance(img, Volume):
        arr = img.array
    else:
        arr = np.asarray(img)
        for ax, t in enumerate(target):
            arr = _crop_pad_axis(arr, ax, t)
        return arr
    for ax, t in enumerate(target):
        arr = _crop_pad_axis(arr, ax, t)
    grid = Grid(target, img.grid.spacing)
    return LabelMap(grid, arr) if isinstance(img, LabelMap) else Volume(grid, arr)
