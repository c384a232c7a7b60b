import math

import pytest
import numpy as np

from autograd import gradcheck
from natten1d import kernel as na_kernel
from verification import (LEVELS, hand_confusion_f1, inject_fault, loss_identity_suite, metric_suite,
                          oracle_suite, primitive_cases, run_verification, supcon_bruteforce)
from utils.error_handling import ConfigurationError


def test_supcon_bruteforce_hand_case():
    hand = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert supcon_bruteforce(hand, [0, 0, 1], 1.0) == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-12)
    assert supcon_bruteforce(hand, [0, 1, 2], 1.0) == 0.0


def test_hand_confusion_f1():
    assert hand_confusion_f1([0, 0, 1, 1], [0, 1, 0, 1], 2) == 0.5
    assert hand_confusion_f1([0, 1, 2], [0, 1, 2], 3) == 1.0


@pytest.mark.parametrize("suite", [oracle_suite, loss_identity_suite, metric_suite])
def test_quick_suites_pass(suite, float64):
    result = suite(LEVELS["quick"], np.random.default_rng(0))
    assert result.failed == 0, result.failures
    assert result.passed > 0


def test_oracle_suite_counts_quick_cases(float64):
    result = oracle_suite(LEVELS["quick"], np.random.default_rng(3))
    settings = LEVELS["quick"]
    assert result.passed == settings["oracle_cases"] + settings["grad_oracle_cases"]


def test_injected_fault_fails_only_gradient_cases():
    report = run_verification("quick", seed=0, suites=["oracle"], fault="na-backward")
    assert not report.ok
    oracle = report.suites[0]
    assert oracle.failed > 0
    assert all(f.startswith("gradient case") for f in oracle.failures)
    assert "FAILED" in report.format()


def test_fault_is_removed_afterwards():
    original = na_kernel.na_backward
    with inject_fault("na-backward"):
        assert na_kernel.na_backward is not original
    assert na_kernel.na_backward is original
    with inject_fault(None):
        assert na_kernel.na_backward is original


def test_report_frame_and_format():
    report = run_verification("quick", seed=1, suites=["losses", "metrics"])
    assert report.ok
    frame = report.to_frame()
    assert list(frame["suite"]) == ["losses", "metrics"]
    assert frame["failed"].sum() == 0
    assert report.format().splitlines()[-1] == "PASSED"


@pytest.mark.parametrize("kwargs", [{"level": "medium"}, {"suites": ["oracle", "speed"]},
                                    {"fault": "tokenizer"}])
def test_invalid_requests(kwargs):
    with pytest.raises(ConfigurationError):
        run_verification(**{"level": "quick", **kwargs})


def test_primitive_gradchecks_over_random_draws(float64):
    rng = np.random.default_rng(7)
    trials = LEVELS["full"]["primitive_trials"]
    assert trials >= 20
    matmul_shapes = set()
    for _ in range(trials):
        cases = primitive_cases(rng)
        for name, fn, inputs in cases:
            result = gradcheck(fn, inputs, rtol=1e-5, rng=rng)
            assert result.passed, (name, result.errors)
        inputs_by_name = {name: inputs for name, _, inputs in cases}
        matmul_shapes.add(tuple(t.shape for t in inputs_by_name["matmul"]))
    assert len(matmul_shapes) > 1
