import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_hd95, brute_surface, cube

from discoreg.grid import LVBP, LVM, RV, Grid, LabelMap
from discoreg.metrics import (
    UndefinedHD95Error,
    clinical_indices,
    dice_score,
    evaluate,
    hd95,
    surface_voxels,
)


def test_dice_fixtures():
    a = cube((16, 10, 10), (0, 1, 1), 8)
    assert dice_score(a, a, LVBP) == 1.0
    assert dice_score(a, cube((16, 10, 10), (8, 1, 1), 8), LVBP) == 0.0
    assert dice_score(a, cube((16, 10, 10), (4, 1, 1), 8), LVBP) == 0.5
    empty = LabelMap(Grid((4, 4, 4)), np.zeros((4, 4, 4), int))
    assert dice_score(empty, empty, LVM) == 1.0
    assert dice_score(empty, cube((4, 4, 4), (0, 0, 0), 2, LVM), LVM) == 0.0


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_dice_symmetric_and_relabel_invariant(seed):
    rng = np.random.default_rng(seed)
    g = Grid((5, 4, 3))
    a = LabelMap(g, rng.integers(0, 4, size=g.extents))
    b = LabelMap(g, rng.integers(0, 4, size=g.extents))
    perm = np.array([0, 3, 1, 2])
    for k in (LVBP, LVM, RV):
        assert dice_score(a, b, k) == dice_score(b, a, k)
        pa, pb = LabelMap(g, perm[a.labels]), LabelMap(g, perm[b.labels])
        assert dice_score(pa, pb, perm[k]) == dice_score(a, b, k)


def test_hd95_fixtures():
    a = cube((8, 8, 8), (2, 2, 2), 4)
    assert hd95(a, a, LVBP) == 0.0
    g = Grid((8, 4, 4), (1.8, 1.8, 10.0))
    la = np.zeros(g.extents, int)
    lb = np.zeros(g.extents, int)
    la[1, 1, 1] = LVBP
    lb[4, 1, 1] = LVBP
    assert abs(hd95(LabelMap(g, la), LabelMap(g, lb), LVBP) - 5.4) < 1e-12


def test_hd95_shifted_cube_matches_brute_force():
    a = cube((14, 12, 12), (2, 2, 2), 8)
    b = cube((14, 12, 12), (4, 2, 2), 8)
    want = brute_hd95(a.labels == LVBP, b.labels == LVBP, np.ones(3))
    assert abs(hd95(a, b, LVBP) - want) < 1e-12


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=15, deadline=None)
def test_hd95_random_sets_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    spacing = rng.uniform(0.5, 3.0, size=3)
    g = Grid((6, 5, 4), tuple(spacing))
    a = rng.random(g.extents) < 0.3
    b = rng.random(g.extents) < 0.3
    a[0, 0, 0] = b[5, 4, 3] = True
    la, lb = LabelMap(g, a.astype(int) * RV), LabelMap(g, b.astype(int) * RV)
    assert abs(hd95(la, lb, RV) - brute_hd95(a, b, spacing)) < 1e-9
    assert hd95(la, lb, RV) == hd95(lb, la, RV)


def test_hd95_scales_linearly_with_spacing():
    a = cube((14, 12, 12), (2, 2, 2), 8)
    b = cube((14, 12, 12), (5, 3, 2), 7)
    d1 = hd95(a, b, LVBP, spacing=(1.0, 1.0, 1.0))
    d3 = hd95(a, b, LVBP, spacing=(3.0, 3.0, 3.0))
    assert abs(d3 - 3 * d1) < 1e-12


def test_hd95_empty_structure_is_an_error():
    a = cube((6, 6, 6), (1, 1, 1), 3)
    empty = LabelMap(a.grid, np.zeros(a.grid.extents, int))
    with pytest.raises(UndefinedHD95Error, match="undefined HD95"):
        hd95(a, empty, LVBP)


def test_surface_matches_brute_force():
    rng = np.random.default_rng(0)
    m = rng.random((6, 7, 5)) < 0.6
    assert np.array_equal(surface_voxels(m), brute_surface(m))


def test_clinical_index_fixtures():
    g = Grid((20, 10, 10), (1.8, 1.8, 10.0))
    assert clinical_indices(LabelMap(g, np.zeros(g.extents, int)))[0] == 0.0
    lab = np.zeros(g.extents, int)
    lab[:10] = LVBP  # 1000 voxels
    lvedv, _ = clinical_indices(LabelMap(g, lab))
    assert abs(lvedv - 32.4) < 1e-9
    g1 = Grid((20, 10, 10))
    lab = np.full(g1.extents, LVM)  # 2000 voxels
    _, lvmm = clinical_indices(LabelMap(g1, lab))
    assert abs(lvmm - 2.1) < 1e-12


def test_clinical_indices_depend_only_on_counts():
    rng = np.random.default_rng(1)
    g = Grid((6, 6, 6), (1.5, 1.5, 8.0))
    lab = rng.integers(0, 4, size=g.extents)
    shuffled = rng.permutation(lab.ravel()).reshape(g.extents)
    assert clinical_indices(LabelMap(g, lab)) == clinical_indices(LabelMap(g, shuffled))


def test_evaluate_report():
    rng = np.random.default_rng(2)
    g = Grid((8, 8, 8), (1.8, 1.8, 10.0))
    a = LabelMap(g, rng.integers(0, 4, size=g.extents))
    rep = evaluate(a, a)
    assert rep.dice_avg == 1.0 and rep.hd95_mm == 0.0
    b = LabelMap(g, rng.integers(0, 4, size=g.extents))
    rep = evaluate(a, b)
    d = rep.to_dict()
    assert abs(d["dice_avg"] - np.mean([d["dice_lvbp"], d["dice_lvm"], d["dice_rv"]])) < 1e-12
    assert all(np.isfinite(v) for v in d.values())
    assert json.loads(rep.to_json()) == d
    assert len(rep.to_table().splitlines()) == 7
