"""
Tests for identify.nmf_minvol: SPA, the minimum-volume solver and the
permutation-invariant error.
"""

import numpy as np
import pytest

from identify.env_core import build_counterexample, mix_observable, random_finite_env
from identify.nmf_minvol import (
    SolverOptions,
    all_permutations,
    best_permutation_error,
    det_volume,
    minvol_factorize,
    numerical_rank,
    permutation_tv_errors,
    spa_init,
)
from identify.stochastic import is_stochastic, random_stochastic
from utils.errors import DEGENERATE, INVALID_PARAMS, NOT_STOCHASTIC, RANK_DEFICIENT, LatentActError

# ── SPA ────────────────────────────────────────────────────────────────────


@pytest.mark.unit
class TestSpaInit:

    def test_finds_pure_columns_of_separable_data(self, finite_env):
        P = finite_env.observable(0)
        assert sorted(spa_init(P, 3)) == [0, 1, 2]

    def test_k_larger_than_columns(self, finite_env):
        with pytest.raises(LatentActError) as exc:
            spa_init(finite_env.observable(0), 6)
        assert exc.value.code == INVALID_PARAMS

    def test_repeated_columns_are_degenerate(self):
        P = np.repeat(np.array([[0.2], [0.8]]), 3, axis=1)
        with pytest.raises(LatentActError) as exc:
            spa_init(P, 2)
        assert exc.value.code == DEGENERATE

    def test_deterministic(self, finite_env):
        P = finite_env.observable(0)
        assert spa_init(P, 3) == spa_init(P, 3)


# ── solver ─────────────────────────────────────────────────────────────────


@pytest.mark.unit
class TestMinvolFactorize:

    def test_recovers_separable_instance(self, finite_env):
        P = finite_env.observable(0)
        result = minvol_factorize(P, SolverOptions(k=3))
        _, err = best_permutation_error(result.T, finite_env.T_star[0], result.Pi, finite_env.Pi_star[0])
        assert err <= 1e-5
        assert result.residual <= 1e-8

    def test_factors_are_stochastic(self, finite_env):
        result = minvol_factorize(finite_env.observable(0), SolverOptions(k=3))
        assert is_stochastic(result.T, atol=1e-8)
        assert is_stochastic(result.Pi, atol=1e-8)

    def test_same_seed_same_result(self, finite_env):
        P = finite_env.observable(0)
        a = minvol_factorize(P, SolverOptions(k=3, seed=5))
        b = minvol_factorize(P, SolverOptions(k=3, seed=5))
        np.testing.assert_array_equal(a.T, b.T)
        assert a.chosen == b.chosen

    def test_objective_is_least_among_candidates(self, finite_env):
        result = minvol_factorize(finite_env.observable(0), SolverOptions(k=3))
        feasible = [c["objective"] for c in result.candidates if c["residual"] <= result.tol]
        assert result.objective == pytest.approx(min(feasible), rel=1e-6)

    def test_k_equal_one(self, rng):
        P = np.repeat(random_stochastic(rng, 5, 1), 4, axis=1)
        result = minvol_factorize(P, SolverOptions(k=1))
        np.testing.assert_allclose(result.T[:, 0], P[:, 0], atol=1e-7)
        np.testing.assert_allclose(result.Pi, np.ones((1, 4)))

    def test_counterexample_is_rank_deficient(self):
        P, _, _ = build_counterexample()
        with pytest.raises(LatentActError) as exc:
            minvol_factorize(P, SolverOptions(k=2))
        assert exc.value.code == RANK_DEFICIENT
        assert exc.value.details["effective_rank"] == 1

    def test_reduce_rank_solves_at_effective_rank(self, rng):
        T = random_stochastic(rng, 6, 2)
        P = mix_observable(T, np.hstack([np.eye(2), random_stochastic(rng, 2, 3)]))
        result = minvol_factorize(P, SolverOptions(k=3, reduce_rank=True))
        assert result.reduced
        assert result.k == 2
        assert result.requested_k == 3

    def test_reduced_residual_is_measured_on_the_input(self, rng):
        T = random_stochastic(rng, 6, 2)
        P = mix_observable(T, np.hstack([np.eye(2), random_stochastic(rng, 2, 3)]))
        noisy = (1.0 - 1e-6) * P + 1e-6 * random_stochastic(rng, 6, 5)
        result = minvol_factorize(
            noisy, SolverOptions(k=3, reduce_rank=True, rank_tol=1e-4, tol=1e-3)
        )
        assert result.reduced and result.k == 2
        assert result.residual == pytest.approx(np.linalg.norm(noisy - result.T @ result.Pi))
        # no rank-2 product gets closer to the input than its third singular value
        sigma_3 = np.linalg.svd(noisy, compute_uv=False)[2]
        assert result.residual >= sigma_3 * (1 - 1e-6)
        assert result.reduced_residual <= result.tol

    def test_unreduced_residuals_agree(self, finite_env):
        result = minvol_factorize(finite_env.observable(0), SolverOptions(k=3))
        assert not result.reduced
        assert result.reduced_residual == result.residual

    def test_non_stochastic_input(self):
        with pytest.raises(LatentActError) as exc:
            minvol_factorize(np.array([[0.5, 0.5], [0.6, 0.5]]), SolverOptions(k=1))
        assert exc.value.code == NOT_STOCHASTIC

    @pytest.mark.parametrize(
        "kwargs",
        [{"k": 0}, {"restarts": 0}, {"eps_det": 0.0}, {"rho0": -1.0}, {"tol": 0.0}],
    )
    def test_invalid_options(self, kwargs):
        with pytest.raises(LatentActError) as exc:
            SolverOptions(**kwargs)
        assert exc.value.code == INVALID_PARAMS

    def test_result_to_dict_is_column_major(self, finite_env):
        result = minvol_factorize(finite_env.observable(0), SolverOptions(k=3))
        doc = result.to_dict()
        assert len(doc["T"]) == 3
        assert len(doc["T"][0]) == 6
        assert "T" not in result.to_dict(include_factors=False)


@pytest.mark.slow
@pytest.mark.property
def test_exact_recovery_over_seeds():
    successes = 0
    for seed in range(20):
        env = random_finite_env(6, 3, 5, seed=seed)
        result = minvol_factorize(env.observable(0), SolverOptions(k=3, seed=seed))
        _, err = best_permutation_error(result.T, env.T_star[0], result.Pi, env.Pi_star[0])
        successes += err <= 1e-5
    assert successes >= 19


# ── permutations and volume ────────────────────────────────────────────────


@pytest.mark.unit
class TestPermutationError:

    def test_zero_for_planted_permutation(self, rng):
        T = random_stochastic(rng, 5, 3)
        Pi = random_stochastic(rng, 3, 4)
        perm = [2, 0, 1]
        inverse = np.argsort(perm)
        found, err = best_permutation_error(T[:, inverse], T, Pi[inverse, :], Pi)
        assert err == pytest.approx(0.0)
        np.testing.assert_array_equal(T[:, inverse][:, list(found)], T)

    def test_noisy_copy_keeps_the_planted_permutation(self, rng):
        T = random_stochastic(rng, 5, 3)
        Pi = random_stochastic(rng, 3, 4)
        perm = [2, 0, 1]
        inverse = np.argsort(perm)
        noisy_T = T[:, inverse] + rng.uniform(-1e-3, 1e-3, size=T.shape)
        noisy_Pi = Pi[inverse, :] + rng.uniform(-1e-3, 1e-3, size=Pi.shape)
        found, err = best_permutation_error(noisy_T, T, noisy_Pi, Pi)
        assert found == tuple(perm)
        assert err <= 2e-3

    def test_tv_errors_zero_at_best_permutation(self, rng):
        T = random_stochastic(rng, 5, 3)
        Pi = random_stochastic(rng, 3, 4)
        perm, _ = best_permutation_error(T[:, ::-1], T, Pi[::-1, :], Pi)
        tv_T, tv_Pi = permutation_tv_errors(T[:, ::-1], T, Pi[::-1, :], Pi, perm)
        assert tv_T == pytest.approx(0.0)
        assert tv_Pi == pytest.approx(0.0)

    def test_k_above_limit_rejected(self):
        with pytest.raises(LatentActError) as exc:
            all_permutations(10)
        assert exc.value.code == INVALID_PARAMS

    def test_permutation_count(self):
        assert all_permutations(4).shape == (24, 4)


@pytest.mark.unit
class TestVolume:

    def test_identity_volume_is_one(self):
        assert det_volume(np.eye(3)) == pytest.approx(1.0)

    def test_mixing_shrinks_volume(self, rng):
        A = 0.8 * np.eye(3) + 0.2 * random_stochastic(rng, 3, 3)
        assert det_volume(np.eye(3) @ A) < 1.0

    def test_equal_columns_have_zero_volume(self):
        T = np.array([[0.3, 0.3], [0.7, 0.7]])
        assert det_volume(T) == pytest.approx(0.0, abs=1e-12)

    def test_returns_the_determinant_not_its_log(self):
        T = np.array([[0.75, 0.25], [0.25, 0.75]])
        assert det_volume(T) == pytest.approx(0.25)

    def test_numerical_rank(self):
        assert numerical_rank(np.ones((3, 3))) == 1
        assert numerical_rank(np.eye(3)) == 3
