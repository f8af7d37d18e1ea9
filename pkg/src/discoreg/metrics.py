"""Evaluation metrics: Dice, HD95, LV end-diastolic volume and myocardial mass."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .grid import LVBP, LVM, RV, LabelMap, check_grids

MYOCARDIAL_DENSITY = 1.05  # g/mL
FOREGROUND = (LVBP, LVM, RV)


class UndefinedHD95Error(ValueError):
    pass


@dataclass
class MetricsReport:
    dice_lvbp: float
    dice_lvm: float
    dice_rv: float
    dice_avg: float
    hd95_mm: float
    lvedv_ml: float
    lvmm_g: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        rows = self.to_dict()
        width = max(len(k) for k in rows)
        return "\n".join(f"{k:<{width}}  {v:>12.6f}" for k, v in rows.items())


def dice_score(a: LabelMap, b: LabelMap, label: int) -> float:
    check_grids(a.grid, b.grid)
    ma = a.labels == label
    mb = b.labels == label
    na, nb = int(ma.sum()), int(mb.sum())
    if na == 0 and nb == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(ma & mb)) / (na + nb)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-neighbour outside it (grid edge counts as outside)."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for ax in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=ax)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def _directed_percentile(src: np.ndarray, dst: np.ndarray, q: float) -> float:
    dist, _ = cKDTree(dst).query(src)
    return float(np.percentile(dist, q))


def hd95(a: LabelMap, b: LabelMap, label: int, spacing=None, q: float = 95.0) -> float:
    """Symmetric 95th-percentile surface distance in mm."""
    grid = check_grids(a.grid, b.grid)
    spacing = np.asarray(grid.spacing if spacing is None else spacing, dtype=np.float64)
    ma, mb = a.labels == label, b.labels == label
    if not ma.any() or not mb.any():
        raise UndefinedHD95Error(f"undefined HD95: label {label} is empty in at least one map")
    pa = np.argwhere(surface_voxels(ma)) * spacing
    pb = np.argwhere(surface_voxels(mb)) * spacing
    return max(_directed_percentile(pa, pb, q), _directed_percentile(pb, pa, q))


def clinical_indices(seg: LabelMap, spacing=None) -> tuple[float, float]:
    """(LVEDV in mL, LVMM in g) from label counts."""
    spacing = seg.grid.spacing if spacing is None else spacing
    voxel_ml = float(np.prod(spacing)) / 1000.0
    lvedv = seg.count(LVBP) * voxel_ml
    lvmm = seg.count(LVM) * voxel_ml * MYOCARDIAL_DENSITY
    return lvedv, lvmm


def evaluate(pred: LabelMap, ref: LabelMap, spacing=None) -> MetricsReport:
    """Metrics of ``pred`` (e.g. warped moving labels) against ``ref``.

    hd95_mm is the mean over structures that are present in both maps;
    NaN when no structure qualifies. Clinical indices describe ``pred``.
    """
    grid = check_grids(pred.grid, ref.grid)
    spacing = grid.spacing if spacing is None else spacing
    dices = [dice_score(pred, ref, k) for k in FOREGROUND]
    dists = []
    for k in FOREGROUND:
        try:
            dists.append(hd95(pred, ref, k, spacing))
        except UndefinedHD95Error:
            continue
    lvedv, lvmm = clinical_indices(pred, spacing)
    return MetricsReport(
        dice_lvbp=dices[0],
        dice_lvm=dices[1],
        dice_rv=dices[2],
        dice_avg=float(np.mean(dices)),
        hd95_mm=float(np.mean(dists)) if dists else math.nan,
        lvedv_ml=lvedv,
        lvmm_g=lvmm,
    )
