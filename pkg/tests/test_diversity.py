"""
Tests for identify.diversity verdicts and the Monte-Carlo cone check.
"""

import numpy as np
import pytest

from identify.diversity import (
    VERDICTS,
    DiversityOptions,
    check_rank,
    check_separability,
    cone_boundary_points,
    diversity_report,
    mc_scattered_check,
)
from identify.env_core import separable_policy
from identify.stochastic import random_stochastic
from utils.errors import DIMENSION_MISMATCH, INVALID_PARAMS, LatentActError
from utils.rng import stream

FAST = DiversityOptions(mc_samples=300)


@pytest.mark.unit
class TestChecks:

    def test_rank_of_identity(self):
        assert check_rank(np.eye(3), 3) == (3, True)

    def test_rank_deficient(self):
        assert check_rank(np.ones((3, 4)) / 3, 2) == (1, False)

    def test_empty_matrix(self):
        with pytest.raises(LatentActError) as exc:
            check_rank(np.zeros((0, 0)), 1)
        assert exc.value.code == INVALID_PARAMS

    def test_separability_of_identity_block(self, rng):
        assert check_separability(separable_policy(rng, 3, 5))

    def test_uniform_is_not_separable(self):
        assert not check_separability(np.full((3, 5), 1 / 3))

    def test_near_pure_within_tolerance(self):
        Pi = np.array([[1 - 1e-8, 0.0], [1e-8, 1.0]])
        assert check_separability(Pi, tol=1e-6)
        assert not check_separability(Pi, tol=1e-9)

    @pytest.mark.parametrize("tol", [0.0, -1e-6, 0.5, 2.0])
    def test_separability_tol_range(self, tol):
        with pytest.raises(LatentActError) as exc:
            check_separability(np.eye(3), tol=tol)
        assert exc.value.code == INVALID_PARAMS

    def test_boundary_points_lie_on_cone(self):
        X = cone_boundary_points(4, 50, seed=1)
        sums = X.sum(axis=0)
        norms = np.linalg.norm(X, axis=0)
        np.testing.assert_allclose(sums, np.sqrt(3) * norms, atol=1e-12)

    def test_identity_contains_the_cone(self):
        assert mc_scattered_check(np.eye(3), 200, seed=2) == 1.0

    def test_single_column_fails(self):
        assert mc_scattered_check(np.full((3, 1), 1 / 3), 200, seed=2) == 0.0

    def test_k_one_is_trivial(self):
        assert mc_scattered_check(np.ones((1, 3)), 10, seed=0) == 1.0

    @pytest.mark.property
    def test_appending_a_column_never_lowers_the_pass_rate(self):
        for trial in range(40):
            rng = stream(0, "monotone", trial)
            Pi = random_stochastic(rng, 3, 3, concentration=0.5)
            wider = np.hstack([Pi, random_stochastic(rng, 3, 1)])
            before = mc_scattered_check(Pi, 100, seed=trial)
            after = mc_scattered_check(wider, 100, seed=trial)
            assert after >= before


@pytest.mark.unit
class TestReport:

    def test_separable_is_certified(self, rng):
        T = random_stochastic(rng, 6, 3)
        Pi = separable_policy(rng, 3, 5)
        report = diversity_report(T @ Pi, Pi, 3, FAST)
        assert report.verdict == "certified-sufficient"
        assert report.separable

    def test_single_demonstrator_is_violated(self, rng):
        T = random_stochastic(rng, 6, 3)
        Pi = random_stochastic(rng, 3, 1)
        assert diversity_report(T @ Pi, Pi, 3, FAST).verdict == "violated"

    def test_uniform_is_never_certified(self, rng):
        T = random_stochastic(rng, 6, 3)
        Pi = np.full((3, 5), 1 / 3)
        assert diversity_report(T @ Pi, Pi, 3, FAST).verdict in ("violated", "inconclusive")

    def test_verdict_is_known(self, rng):
        T = random_stochastic(rng, 6, 3)
        Pi = random_stochastic(rng, 3, 6)
        assert diversity_report(T @ Pi, Pi, 3, FAST).verdict in VERDICTS

    def test_column_mismatch(self, rng):
        with pytest.raises(LatentActError) as exc:
            diversity_report(random_stochastic(rng, 6, 4), np.eye(3), 3, FAST)
        assert exc.value.code == DIMENSION_MISMATCH

    def test_report_records_tolerances(self, rng):
        Pi = separable_policy(rng, 3, 4)
        doc = diversity_report(Pi, Pi, 3, FAST).to_dict()
        assert doc["tolerances"]["separability_tol"] == FAST.separability_tol

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"rank_tol": 0.0},
            {"separability_tol": 0.5},
            {"estimated_cone_tol": 0.0},
            {"mc_samples": 0},
        ],
    )
    def test_invalid_options(self, kwargs):
        with pytest.raises(LatentActError):
            DiversityOptions(**kwargs)


def _estimate_like(rng, delta: float) -> np.ndarray:
    """Separable policy pulled towards uniform by delta, the way a fitted
    policy sits just inside the simplex instead of on its vertices."""
    Pi = separable_policy(rng, 3, 5)
    return (1.0 - delta) * Pi + delta / 3.0


@pytest.mark.unit
class TestEstimatedPolicy:

    def test_estimate_passes_loose_tolerance_only(self, rng):
        Pi_hat = _estimate_like(rng, 1e-4)
        opts = DiversityOptions(mc_samples=2000, seed=3)
        T = random_stochastic(rng, 6, 3)
        exact = diversity_report(T @ Pi_hat, Pi_hat, 3, opts)
        loose = diversity_report(T @ Pi_hat, Pi_hat, 3, opts, estimated=True)
        assert not loose.separable
        assert loose.mc_pass_rate == 1.0
        assert loose.verdict == "plausible"
        assert exact.mc_pass_rate < 1.0
        assert exact.verdict == "inconclusive"

    def test_report_says_which_tolerance_ran(self, rng):
        Pi_hat = _estimate_like(rng, 1e-4)
        doc = diversity_report(Pi_hat, Pi_hat, 3, FAST, estimated=True).to_dict()
        assert doc["tolerances"]["cone_tol"] == FAST.estimated_cone_tol == 1e-3
        assert doc["tolerances"]["estimated"] is True
