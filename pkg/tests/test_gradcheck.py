import numpy as np
import pytest

from discoreg.coattention import AttentionBudgetError
from discoreg.gradcheck import (
    TOL_COMPOSITE,
    TOL_INTERP,
    TOL_PRIMITIVE,
    CheckResult,
    format_table,
    numeric_grad,
    rel_error,
    run_checks,
)


@pytest.fixture(scope="module")
def results():
    return run_checks(seed=0, size=4)


def test_every_check_passes(results):
    failed = [(r.name, r.rel_err, r.tol) for r in results if not r.passed]
    assert not failed


def test_tolerance_classes(results):
    tol = {r.name: r.tol for r in results}
    assert tol["matmul"] == TOL_PRIMITIVE == 1e-6
    assert tol["dice_loss"] == TOL_COMPOSITE == 1e-4
    assert tol["warp_image"] == TOL_INTERP == 1e-3
    assert tol["integrate_svf"] == TOL_INTERP


def test_suite_covers_every_differentiable_operation(results):
    names = {r.name for r in results}
    required = {
        "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "square", "sigmoid", "relu", "softmax",
        "sum", "mean", "concat", "stack", "reshape", "transpose", "getitem",
        "warp_image", "warp_coords", "integrate_svf", "diffusion_energy",
        "mse_loss", "dice_loss", "cross_entropy", "total_loss",
        "coattend_mov", "coattend_fix", "engine_objective",
    }
    assert required <= names


def test_corruption_is_detected():
    res = run_checks(seed=0, size=4, corrupt="mse_loss")
    bad = [r.name for r in res if not r.passed]
    assert bad == ["mse_loss"]
    with pytest.raises(ValueError):
        run_checks(corrupt="no_such_op")


def test_budget():
    with pytest.raises(AttentionBudgetError):
        run_checks(size=17)


def test_helpers():
    x = np.array([1.0, -2.0, 0.5])
    n = numeric_grad(lambda a: float(np.sum(a**3)), x.copy())
    np.testing.assert_allclose(n, 3 * x**2, rtol=1e-8)
    assert rel_error(np.ones(3), np.ones(3)) == 0.0
    assert not CheckResult("x", float("nan"), 1.0).passed
    table = format_table([CheckResult("a", 1e-9, 1e-6), CheckResult("bb", 1.0, 1e-6)])
    assert "PASS" in table and "FAIL" in table
