import numpy as np
import pytest

from tcs3d import gradcheck
from tcs3d.tensor import Tensor5, sigmoid, sum_all


def test_every_suite_passes_one_seed():
    results = gradcheck.run_suite(seeds=(0,))
    worst = gradcheck.summarize(results)
    assert len(worst) == sum(len(s) for s in gradcheck.SUITES.values())
    assert all(r.passed for r in results), worst


def test_corrupted_case_fails_only_itself():
    results = gradcheck.run_suite(["loss"], seeds=(0,), corrupt="fbce")
    by_name = {r.name: r.passed for r in results}
    assert by_name == {"loss.bce": True, "loss.fbce": False}


def test_report_is_deterministic():
    a = gradcheck.summarize(gradcheck.run_suite(["attention"], seeds=(3, 4)))
    b = gradcheck.summarize(gradcheck.run_suite(["attention"], seeds=(3, 4)))
    assert a == b


def test_unknown_module():
    with pytest.raises(KeyError):
        gradcheck.run_suite(["optimizer"])


def test_numeric_grad_of_sigmoid():
    x = Tensor5(np.linspace(-2, 2, 5).reshape(1, 5, 1, 1, 1))
    num = gradcheck.numeric_grad(lambda: sum_all(sigmoid(x)), x)
    s = 1 / (1 + np.exp(-x.values))
    assert np.allclose(num, s * (1 - s), atol=1e-9)


def test_rel_error_scale():
    assert gradcheck.rel_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert gradcheck.rel_error(np.array([2.0]), np.array([1.0])) == 0.5
    assert gradcheck.rel_error(np.zeros(3), np.zeros(3)) == 0.0
