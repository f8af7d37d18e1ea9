import hashlib
import json

import numpy as np
import pytest

from discoreg import cli
from discoreg.data.nifti import read_nifti, write_nifti
from discoreg.grid import LVBP, Grid, LabelMap, Volume

SHIFT_SPEC = {"extents": [32, 32, 32], "motion": {"kind": "rigid_shift", "shift": [2.0, 0.0, 0.0]}, "seed": 0}
SLIDE_SPEC = {
    "extents": [32, 32, 32],
    "geometry": {"rv_offset": [0.0, 2.0, 0.0], "rv_radius": 6.0},
    "motion": {"kind": "sliding", "axis": 1, "translation_a": [3.0, 0.0, 0.0], "translation_b": [-3.0, 0.0, 0.0]},
    "seed": 0,
}
NIFTI_NAMES = ("moving", "fixed", "moving_mask", "fixed_mask", "gt_deformation")


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def synth(tmp_path, spec, name="pair", seed=None):
    spec_path = tmp_path / f"{name}.json"
    spec_path.write_text(json.dumps(spec))
    out = tmp_path / name
    argv = ["-q", "synth", str(spec_path), str(out)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    assert cli.main(argv) == 0
    return out


def register_args(pair, out, *extra):
    return [
        "-q", "register",
        "--moving", str(pair / "moving.nii"),
        "--fixed", str(pair / "fixed.nii"),
        "--moving-mask", str(pair / "moving_mask.nii"),
        "--fixed-mask", str(pair / "fixed_mask.nii"),
        "--out", str(out),
        *extra,
    ]


def test_synth_writes_pair_and_manifest(tmp_path):
    out = synth(tmp_path, SHIFT_SPEC)
    for name in NIFTI_NAMES:
        assert (out / f"{name}.nii").is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["spec"]["motion"]["kind"] == "rigid_shift"
    assert set(manifest["files"]) == set(NIFTI_NAMES)
    assert read_nifti(out / "gt_deformation.nii").role == "deformation"


def test_synth_is_byte_deterministic(tmp_path):
    a = synth(tmp_path, SHIFT_SPEC, "a")
    b = synth(tmp_path, SHIFT_SPEC, "b")
    c = synth(tmp_path, SHIFT_SPEC, "c", seed=1)
    for name in NIFTI_NAMES:
        assert digest(a / f"{name}.nii") == digest(b / f"{name}.nii")
    assert digest(a / "moving.nii") != digest(c / "moving.nii")


def test_synth_invalid_spec_exits_2_naming_invariant(tmp_path, capsys):
    spec = dict(SHIFT_SPEC, geometry={"lvbp_radius": 6.0, "lvm_outer_radius": 4.0})
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(spec))
    assert cli.main(["synth", str(path), str(tmp_path / "o")]) == 2
    assert "LVM must strictly enclose LVBP" in capsys.readouterr().err
    assert cli.main(["synth", str(tmp_path / "missing.json"), str(tmp_path / "o")]) == 2


def test_register_missing_mask_exits_2(tmp_path, capsys):
    pair = synth(tmp_path, SHIFT_SPEC)
    (pair / "fixed_mask.nii").unlink()
    assert cli.main(register_args(pair, tmp_path / "r", "--iters", "2")) == 2
    assert "file not found" in capsys.readouterr().err


def test_register_usage_errors(tmp_path, capsys):
    pair = synth(tmp_path, SHIFT_SPEC)
    assert cli.main(register_args(pair, tmp_path / "r", "--mode", "wavy")) == 2
    assert cli.main(register_args(pair, tmp_path / "r", "--iters", "0")) == 2
    assert cli.main(["-q", "register", "--moving", str(pair / "moving.nii")]) == 2
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"itres": 5}))
    assert cli.main(register_args(pair, tmp_path / "r", "--config", str(cfg))) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_register_config_file_with_flags_winning(tmp_path):
    pair = synth(tmp_path, SHIFT_SPEC)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iters": 3, "lambda3": 0.5, "mode": "smooth", "log-every": 0}))
    out = tmp_path / "r"
    assert cli.main(register_args(pair, out, "--config", str(cfg), "--iters", "4")) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["iters"] == 4
    assert manifest["config"]["lambda3"] == 0.5
    assert manifest["config"]["mode"] == "smooth"
    assert (out / "svf.nii").is_file()


def test_register_divergence_exits_3(tmp_path, monkeypatch, capsys):
    from discoreg.engine import RegistrationDiverged

    def boom(problem):
        raise RegistrationDiverged("total loss exceeds 10x the initial value")

    monkeypatch.setattr(cli, "register", boom)
    pair = synth(tmp_path, SHIFT_SPEC)
    assert cli.main(register_args(pair, tmp_path / "r", "--iters", "2")) == 3
    assert "exceeds" in capsys.readouterr().err


def test_register_defaults_on_shift_phantom(tmp_path):
    pair = synth(tmp_path, SHIFT_SPEC)
    out = tmp_path / "r"
    assert cli.main(register_args(pair, out)) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["dice_avg"] >= 0.9
    manifest = json.loads((out / "manifest.json").read_text())
    cfg = manifest["config"]
    assert (cfg["lambda0"], cfg["lambda1"], cfg["lambda2"], cfg["lambda3"]) == (0.1, 1.0, 0.1, 0.01)
    assert (cfg["iters"], cfg["lr"], cfg["steps"]) == (500, 1e-3, 7)
    lines = (out / "loss_trace.csv").read_text().splitlines()
    assert lines[0] == "iter,seg,mse,dice,reg,total" and len(lines) == 501


def test_smooth_mode_below_disc_on_sliding_phantom(tmp_path):
    pair = synth(tmp_path, SLIDE_SPEC)
    scores = {}
    for mode in ("disc", "smooth"):
        out = tmp_path / mode
        assert cli.main(register_args(pair, out, "--mode", mode)) == 0
        scores[mode] = json.loads((out / "metrics.json").read_text())["dice_avg"]
    assert scores["smooth"] < scores["disc"]


def test_warp_command_roundtrip(tmp_path):
    pair = synth(tmp_path, SHIFT_SPEC)
    out = tmp_path / "w.nii"
    assert cli.main(["-q", "warp", "--field", str(pair / "gt_deformation.nii"),
                     "--image", str(pair / "moving_mask.nii"), "--out", str(out), "--labels"]) == 0
    warped = read_nifti(out)
    fixed = read_nifti(pair / "fixed_mask.nii")
    assert (warped.labels == fixed.labels).mean() > 0.97
    assert cli.main(["-q", "warp", "--field", str(pair / "moving.nii"),
                     "--image", str(pair / "moving.nii"), "--out", str(out)]) == 2


def test_evaluate_identical_and_fixture(tmp_path, capsys):
    g = Grid((16, 10, 10), (1.8, 1.8, 10.0))
    lab = np.zeros(g.extents, int)
    lab[0:8, 1:9, 1:9] = LVBP
    write_nifti(LabelMap(g, lab), tmp_path / "a.nii")
    assert cli.main(["evaluate", "--pred-seg", str(tmp_path / "a.nii"), "--gt-seg", str(tmp_path / "a.nii")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["dice_avg"] == 1.0 and rep["hd95_mm"] == 0.0
    shifted = np.zeros(g.extents, int)
    shifted[4:12, 1:9, 1:9] = LVBP
    write_nifti(LabelMap(g, shifted), tmp_path / "b.nii")
    assert cli.main(["evaluate", "--pred-seg", str(tmp_path / "a.nii"), "--gt-seg", str(tmp_path / "b.nii"),
                     "--spacing-from", str(tmp_path / "a.nii")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["dice_lvbp"] == 0.5
    assert abs(rep["lvedv_ml"] - 512 * 1.8 * 1.8 * 10 / 1000) < 1e-6


def test_evaluate_rejects_out_of_range_labels(tmp_path, capsys):
    g = Grid((4, 4, 4))
    arr = np.zeros(g.extents)
    arr[0, 0, 0] = 7
    write_nifti(Volume(g, arr), tmp_path / "bad.nii")
    write_nifti(LabelMap(g, np.zeros(g.extents, int)), tmp_path / "ok.nii")
    assert cli.main(["evaluate", "--pred-seg", str(tmp_path / "bad.nii"), "--gt-seg", str(tmp_path / "ok.nii")]) == 2
    assert "label values" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck"]) == 0
    table = capsys.readouterr().out
    assert "FAIL" not in table and "engine_objective" in table


def test_gradcheck_corrupted_op_is_named(capsys):
    assert cli.main(["gradcheck", "--corrupt", "softmax"]) != 0
    err = capsys.readouterr().err
    assert "gradient check failed for: softmax" in err


def test_gradcheck_budget_error(capsys):
    assert cli.main(["gradcheck", "--size", "17"]) == 2
    assert "budget" in capsys.readouterr().err


def test_no_command_is_a_usage_error():
    assert cli.main([]) == 2
