import numpy as np
import pytest

from xseg import tensor as T
from xseg.gradcheck import OPS, GradCheckReport, corrupted, grad_check, run_suite


def test_report_pass_flag_follows_tolerance():
    assert GradCheckReport("x", 1e-5, 1e-4).passed
    assert not GradCheckReport("x", 2e-4, 1e-4).passed
    assert GradCheckReport("x", 1e-4, 1e-4).passed


def test_conv2d_on_1x2x6x6():
    rng = np.random.default_rng(3)
    inputs = [rng.uniform(-1, 1, (1, 2, 6, 6)), rng.uniform(-1, 1, (2, 2, 3, 3)), rng.uniform(-1, 1, 2)]
    rep = grad_check(T.conv2d, inputs, 1e-4, "conv2d")
    assert rep.passed and rep.max_rel_error < 1e-4


def test_relu_off_kink_tight():
    rng = np.random.default_rng(4)
    x = rng.uniform(-1, 1, (3, 5))
    x = np.where(np.abs(x) < 1e-2, 0.5, x)
    assert grad_check(T.relu, [x], 1e-6).max_rel_error < 1e-6


@pytest.mark.parametrize("name", ["dice_paper", "dice_standard"])
def test_dice_gradient_within_1e_6(name):
    (rep,) = run_suite([name], seed=2, trials=3, tolerance=1e-6)
    assert rep.passed, rep


def test_corrupted_backward_fails():
    rng = np.random.default_rng(0)
    rep = grad_check(corrupted(T.sigmoid), [rng.uniform(-1, 1, (2, 3))], 1e-4)
    assert not rep.passed


def test_inject_bug_fails_every_op():
    reports = run_suite(["conv2d", "maxpool2d", "sigmoid"], trials=1, inject_bug=True)
    assert not any(r.passed for r in reports)


def test_single_op_single_row():
    assert [r.op for r in run_suite(["conv2d"], trials=1)] == ["conv2d"]


def test_unknown_op():
    with pytest.raises(KeyError):
        run_suite(["nope"])


def test_registry_covers_required_ops():
    required = {"conv2d", "conv_transpose2d", "maxpool2d", "batchnorm2d", "relu", "sigmoid", "concat",
                "dice_paper", "dice_standard"}
    assert required <= set(OPS)


def test_suite_deterministic():
    a = run_suite(["batchnorm2d"], seed=9, trials=2)
    b = run_suite(["batchnorm2d"], seed=9, trials=2)
    assert a == b
