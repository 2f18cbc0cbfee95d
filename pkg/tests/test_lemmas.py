"""
Determinant bound and diagonal no-scaling checks.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from identify.env_core import separable_policy
from identify.nmf_minvol import (
    check_det_bound,
    check_no_scaling,
    permutation_distance,
    sample_feasible_mixing,
    sample_scaling_instance,
)
from identify.stochastic import random_stochastic
from utils.errors import DIMENSION_MISMATCH, LatentActError
from utils.rng import stream


@pytest.mark.unit
class TestDetBound:

    def test_permutation_matrix_is_on_the_bound(self, rng):
        Pi = separable_policy(rng, 3, 5)
        report = check_det_bound(np.eye(3)[:, [1, 2, 0]], Pi)
        assert report.feasible
        assert report.abs_det == pytest.approx(1.0)
        assert report.permutation_distance == pytest.approx(0.0)

    def test_infeasible_when_mixing_goes_negative(self, rng):
        Pi = separable_policy(rng, 2, 3)
        A = np.array([[1.5, 0.0], [-0.5, 1.0]])
        report = check_det_bound(A, Pi)
        assert not report.feasible
        assert report.reason == "A Pi* has negative entries"

    def test_shape_checked(self, rng):
        with pytest.raises(LatentActError) as exc:
            check_det_bound(np.eye(2), separable_policy(rng, 3, 4))
        assert exc.value.code == DIMENSION_MISMATCH

    @pytest.mark.property
    def test_sampled_feasible_matrices_respect_bound(self):
        rng = stream(0, "test-det-bound")
        Pi = separable_policy(rng, 3, 5)
        for _ in range(300):
            A, _ = sample_feasible_mixing(Pi, rng)
            report = check_det_bound(A, Pi)
            assert report.feasible
            assert report.abs_det <= 1.0 + 1e-10
            if report.abs_det > 1.0 - 1e-8:
                assert report.permutation_distance <= 1e-6

    @pytest.mark.property
    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 5), st.integers(0, 2**32))
    def test_column_stochastic_matrices_have_det_at_most_one(self, k, seed):
        A = random_stochastic(np.random.default_rng(seed), k, k)
        assert abs(np.linalg.det(A)) <= 1.0 + 1e-10

    def test_permutation_distance_of_perturbed_permutation(self):
        A = np.eye(3)[:, [2, 0, 1]] * 0.9 + 0.1 / 3
        assert permutation_distance(A) == pytest.approx(0.1 - 0.1 / 3)


@pytest.mark.unit
class TestNoScaling:

    def test_identity_diagonal_holds(self, rng):
        T = random_stochastic(rng, 5, 3)
        Pi = random_stochastic(rng, 3, 4)
        report = check_no_scaling(T, Pi, np.ones(3))
        assert report.all_stochastic
        assert report.holds

    def test_non_identity_diagonal_breaks_stochasticity(self, rng):
        T = random_stochastic(rng, 5, 3)
        Pi = random_stochastic(rng, 3, 4)
        report = check_no_scaling(T, Pi, np.diag([0.5, 1.0, 2.0]))
        assert not report.all_stochastic
        assert report.holds

    @pytest.mark.property
    def test_random_constructions(self):
        rng = stream(0, "test-no-scaling")
        for _ in range(200):
            T, Pi, d = sample_scaling_instance(rng, 6, 3, 5)
            assert check_no_scaling(T, Pi, d).holds
