import math

import numpy as np
import pytest

from scopenet.autograd import Tensor, corrupt_backward
from scopenet.gradcheck import gradcheck
from scopenet.losses import bin_loss, focal_loss


def test_constant_function_has_exact_zero_grads():
    p = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    report = gradcheck(lambda: Tensor(4.0) + 0.0 * 0.0, {"p": p})
    assert np.all(p.grad == 0.0)
    assert report.passed and report.params["p"].max_rel_error == 0.0


def test_focal_loss_on_fixed_logits():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.normal(0, 2, size=(12, 3)), requires_grad=True)
    targets = rng.integers(0, 4, size=12)
    report = gradcheck(lambda: focal_loss(logits, targets), {"logits": logits}, step=1e-5, rel_tol=1e-4)
    assert report.passed, report.lines()


def test_tempered_bin_cross_entropy_including_temperature():
    rng = np.random.default_rng(4)
    raw = Tensor(rng.normal(0, 1, size=(6, 4, 6)), requires_grad=True)
    targets = rng.integers(0, 5, size=(6, 4))
    report = gradcheck(lambda: bin_loss(raw, targets, uncertainty=True), {"raw": raw}, step=1e-5, rel_tol=1e-4)
    assert report.passed, report.lines()
    # the temperature entries really carry gradient
    assert np.abs(raw.grad[..., -1]).max() > 1e-3


def test_nonfinite_is_reported_by_name():
    p = Tensor(np.array([1.0]), requires_grad=True)

    def f():
        return (p * math.inf).sum() if p.data[0] > 1.0 else (p * 1.0).sum()

    report = gradcheck(f, {"weights": p})
    assert not report.passed
    assert report.failures == ["weights"] and report.params["weights"].nonfinite


def test_corrupted_derivative_fails():
    p = Tensor(np.array([0.2, 0.7]), requires_grad=True)
    with corrupt_backward("exp", 1.01):
        report = gradcheck(lambda: p.exp().sum(), {"p": p})
    assert not report.passed


def test_subsampled_entries():
    p = Tensor(np.linspace(-1, 1, 50), requires_grad=True)
    report = gradcheck(lambda: (p * p).sum(), {"p": p}, max_entries=7)
    assert report.params["p"].checked == 7 and report.passed


@pytest.mark.parametrize("rel_tol", [1e-4])
def test_report_lines_name_parameters(rel_tol):
    p = Tensor(np.ones(3), requires_grad=True)
    report = gradcheck(lambda: (p * 2.0).sum(), {"alpha": p}, rel_tol=rel_tol)
    assert "alpha" in report.lines()[0]


def test_full_model_every_loss_term():
    from scopenet.diagnostics import COMPONENTS, check_model_gradients, tiny_config

    result = check_model_gradients(tiny_config(), step=1e-5, rel_tol=1e-4)
    assert set(result.reports) == set(COMPONENTS)
    for comp, rep in result.reports.items():
        assert rep.passed, (comp, rep.lines())
        assert any(n == "anchors" for n in rep.params)
    assert result.group_errors()["L_total"]["loc_head"] < 1e-4
