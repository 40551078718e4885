"""Tests for the oracle checks behind the validate command"""
import os

import pytest
import numpy as np

import autodiff
from autodiff import Tensor
from exceptions import ValidationError
from maps import DESK_MAPS, builtin_map_names
from validation import (GRADIENT_CASES, CheckResult, check_env_conservation, check_gradients, check_grouped_argmax,
                        check_kl_monte_carlo, check_monotonicity, check_parameter_isolation, ensure_passed)

full_acceptance = pytest.mark.skipif(not os.getenv("GHQ_FULL_ACCEPTANCE"),
                                     reason="set GHQ_FULL_ACCEPTANCE=1 for full-size acceptance runs")


def broken_sigmoid(self):
    out = np.exp(-np.logaddexp(0.0, -self.data))
    return Tensor._record(out, (self,), lambda g: (-g * out * (1 - out),), "sigmoid")


class TestGradientChecks:
    """Test finite-difference gradient checks"""

    def test_all_cases_pass(self):
        results = check_gradients(instances=3)
        assert [r.name for r in results] == [f"gradient/{name}" for name in GRADIENT_CASES]
        assert all(r.passed for r in results)

    def test_broken_backward_detected(self, monkeypatch):
        monkeypatch.setattr(autodiff.Tensor, "sigmoid", broken_sigmoid)
        results = {r.name: r for r in check_gradients(instances=2)}
        assert not results["gradient/gru_cell"].passed
        assert results["gradient/linear"].passed


class TestStructuralChecks:
    """Test monotonicity, grouped argmax and parameter isolation"""

    def test_monotonicity_covers_every_preset(self):
        results = check_monotonicity(draws=5)
        assert [r.name for r in results] == [f"monotonicity/{name}" for name in builtin_map_names()]
        assert all(r.passed for r in results)

    def test_monotonicity_on_chosen_maps(self):
        results = check_monotonicity(draws=5, map_names=["3m"])
        assert [r.name for r in results] == ["monotonicity/3m"]

    def test_grouped_argmax(self):
        assert check_grouped_argmax(instances=20).passed

    def test_parameter_isolation(self):
        result = check_parameter_isolation()
        assert result.passed, result.detail

    def test_single_group_map_fails_isolation(self):
        result = check_parameter_isolation("3m")
        assert not result.passed
        assert "single group" in result.detail


class TestStatisticalChecks:
    """Test the KL oracle and environment conservation"""

    def test_kl_monte_carlo(self):
        result = check_kl_monte_carlo(pairs=3, samples=50_000)
        assert result.passed, result.detail

    def test_kl_small_divergences_covered(self):
        result = check_kl_monte_carlo(pairs=3, samples=100_000, mean_range=0.05, log_std_range=0.05)
        assert result.passed, result.detail

    def test_env_conservation_desk_maps(self):
        results = check_env_conservation(episodes=3, map_names=list(DESK_MAPS))
        assert len(results) == len(DESK_MAPS)
        assert all(r.passed for r in results), [r.detail for r in results if not r.passed]

    @pytest.mark.slow
    def test_env_conservation_every_preset(self):
        results = check_env_conservation(episodes=2)
        assert [r.name for r in results] == [f"env/conservation/{name}" for name in builtin_map_names()]
        assert all(r.passed for r in results), [r.detail for r in results if not r.passed]


@pytest.mark.slow
@pytest.mark.acceptance
@full_acceptance
class TestFullSizeChecks:
    """Full-size oracle runs over every preset map"""

    def test_env_conservation_thousand_episodes(self):
        results = check_env_conservation()
        assert len(results) == len(builtin_map_names())
        assert all(r.passed for r in results), [r.detail for r in results if not r.passed]
        assert all(r.detail.startswith("1000 episodes") for r in results)

    def test_monotonicity_hundred_draws(self):
        assert all(r.passed for r in check_monotonicity())


class TestEnsurePassed:
    """Test the aggregate verdict"""

    def test_all_passed(self):
        ensure_passed([CheckResult("a", True, "exact", "")])

    def test_failures_named(self):
        results = [CheckResult("a", True, "exact", ""), CheckResult("b", False, "exact", "")]
        with pytest.raises(ValidationError, match="1 of 2 checks failed: b"):
            ensure_passed(results)
