"""Entropy reward, perturbation, gradient estimation, and the reasoning loop."""

import math

import numpy as np
import pytest

from reason_iad.backend import EvaluationResult, ToyBackend
from reason_iad.core import Config, seeded_rng
from reason_iad.latent import (ReasoningError, apply_update, entropy_nats,
                               estimate_gradient, finalize_answer,
                               init_latent_tokens, normalized_entropy, perturb,
                               reward, run_reasoning, sigma_from_fraction)
from reason_iad.scenario import build_crafted_suite


class TestNormalizedEntropy:
    def test_uniform_is_one(self):
        assert normalized_entropy([0.25] * 4) == pytest.approx(1.0, abs=1e-12)

    def test_one_hot_is_zero(self):
        assert normalized_entropy([0.0, 1.0, 0.0]) == 0.0

    def test_frozen_example(self):
        # direct-summation oracle: H = 0.9404479886553263 nats over ln 4
        value = normalized_entropy([0.7, 0.1, 0.1, 0.1])
        assert value == pytest.approx(0.6783898247235197, abs=1e-12)
        assert entropy_nats([0.7, 0.1, 0.1, 0.1]) == pytest.approx(
            0.9404479886553263, abs=1e-12)

    def test_range_and_extremes(self):
        rng = seeded_rng(31, "entropy_props")
        for _ in range(500):
            c = int(rng.integers(2, 9))
            raw = rng.uniform(0, 1, size=c) + 1e-12
            p = raw / raw.sum()
            value = normalized_entropy(p)
            assert -1e-12 <= value <= 1 + 1e-12
        for c in (2, 3, 7):
            one_hot = np.zeros(c)
            one_hot[c // 2] = 1.0
            assert normalized_entropy(one_hot) == 0.0
            assert normalized_entropy(np.full(c, 1 / c)) == pytest.approx(
                1.0, abs=1e-12)


class TestReward:
    def test_all_one_hot(self):
        assert reward([[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(1.0)

    def test_half_and_half(self):
        assert reward([[0.5, 0.5], [1.0, 0.0]]) == pytest.approx(0.5, abs=1e-12)

    def test_all_uniform_four_options(self):
        assert reward([[0.25] * 4] * 4) == pytest.approx(0.0, abs=1e-12)

    def test_permutation_invariance(self):
        rng = seeded_rng(32, "reward_props")
        dists = [rng.dirichlet(np.ones(4)) for _ in range(5)]
        base = reward(dists)
        assert reward(dists[::-1]) == pytest.approx(base, abs=1e-12)

    def test_raw_nats_mode_can_go_negative(self):
        value = reward([[0.25] * 4], normalize=False)
        assert value == pytest.approx(1.0 - math.log(4), abs=1e-12)
        assert value < 0


class TestSigmaFromFraction:
    def test_constant_tokens(self):
        tokens = np.full((3, 5), 2.0)
        assert sigma_from_fraction(tokens, 0.10) == pytest.approx(0.2, abs=1e-12)

    def test_zero_fraction(self):
        assert sigma_from_fraction(np.ones((1, 4)), 0.0) == 0.0

    def test_frozen_example(self):
        # rms of {3, 4} = sqrt(12.5)
        assert sigma_from_fraction(np.array([[3.0, 4.0]]), 1.0) == pytest.approx(
            3.5355339059327378, abs=1e-12)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError, match="degenerate latent state"):
            sigma_from_fraction(np.zeros((2, 3)), 0.1)


class TestPerturb:
    def test_zero_sigma_is_identity(self):
        tokens = seeded_rng(1, "p").standard_normal((2, 4))
        perturbed, noise = perturb(tokens, 0.0, seeded_rng(2, "p"))
        assert np.array_equal(perturbed, tokens)
        assert np.all(noise == 0.0)

    def test_moments_over_one_million_draws(self):
        sigma = 0.37
        tokens = np.zeros((100, 10_000))
        _, noise = perturb(tokens, sigma, seeded_rng(11, "perturb_stats"))
        standard_error = sigma / math.sqrt(noise.size)
        assert abs(noise.mean()) < 4 * standard_error
        assert abs(noise.var() - sigma ** 2) / sigma ** 2 < 0.01

    def test_additivity(self):
        tokens = seeded_rng(1, "p").standard_normal((3, 4))
        perturbed, noise = perturb(tokens, 0.5, seeded_rng(4, "p"))
        assert np.allclose(perturbed - tokens, noise)


class TestEstimateGradient:
    def test_zero_reward_annihilates(self):
        noise = seeded_rng(5, "g").standard_normal((2, 3))
        assert np.all(estimate_gradient(0.0, noise, 0.1) == 0.0)

    def test_zero_sigma_rejected(self):
        with pytest.raises(ValueError, match="zero perturbation scale"):
            estimate_gradient(1.0, np.ones((1, 2)), 0.0)

    def test_scaling(self):
        noise = np.array([[2.0, -4.0]])
        gradient = estimate_gradient(0.5, noise, 0.1)
        assert np.allclose(gradient, 0.5 * noise / 0.01)


class TestApplyUpdate:
    def test_null_step(self):
        tokens = seeded_rng(6, "u").standard_normal((2, 3))
        assert np.array_equal(apply_update(tokens, np.ones((2, 3)), 0.0), tokens)

    def test_non_finite_gradient_rejected(self):
        gradient = np.array([[np.nan, 0.0]])
        with pytest.raises(ValueError, match="divergent update"):
            apply_update(np.zeros((1, 2)), gradient, 1e-3)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            apply_update(np.zeros((1, 2)), np.zeros((2, 2)), 1e-3)

    def test_expected_ascent_step_contracts_quadratic(self):
        # Analytic gradient of the smoothed objective for R(Z) = 1 - |Z-Z*|^2/c
        # is -2(Z-Z*)/c; the Monte-Carlo mean must match it, and the expected
        # step must move toward Z*.
        d, c, sigma = 8, 4.0, 0.3
        rng = seeded_rng(21, "ascent")
        target = rng.standard_normal(d)
        tokens = target + rng.standard_normal(d) * 0.7
        samples = 200_000
        noise = rng.standard_normal((samples, d)) * sigma
        rewards = 1.0 - np.sum((tokens + noise - target) ** 2, axis=1) / c
        mean_gradient = (rewards[:, None] * noise / sigma ** 2).mean(axis=0)
        analytic = -2.0 * (tokens - target) / c
        assert np.allclose(mean_gradient, analytic, atol=0.05)

        stepped = apply_update(tokens[None, :], analytic[None, :], eta=0.05)
        assert np.linalg.norm(stepped[0] - target) < np.linalg.norm(tokens - target)


class TestInitLatentTokens:
    def test_shape_and_default_count(self):
        backend = ToyBackend(seed=0)
        tokens = init_latent_tokens(4, backend, seeded_rng(0, "init"))
        assert tokens.shape == (4, backend.dimension)

    def test_zero_jitter_copies_neutral(self):
        backend = ToyBackend(seed=0)
        tokens = init_latent_tokens(3, backend, seeded_rng(0, "init"),
                                    jitter_scale=0.0)
        for row in tokens:
            assert np.array_equal(row, backend.neutral_token_embedding)

    def test_deterministic(self):
        backend = ToyBackend(seed=0)
        first = init_latent_tokens(4, backend, seeded_rng(9, "init"))
        second = init_latent_tokens(4, backend, seeded_rng(9, "init"))
        assert np.array_equal(first, second)

    def test_jitter_scale_tracks_neutral_rms(self):
        backend = ToyBackend(seed=0)
        tokens = init_latent_tokens(2000, backend, seeded_rng(1, "init"))
        deviations = tokens - backend.neutral_token_embedding
        rms = np.sqrt(np.mean(backend.neutral_token_embedding ** 2))
        assert deviations.std() == pytest.approx(0.01 * rms, rel=0.05)


class TestFinalizeAnswer:
    def _evaluation(self, rows):
        rows = np.asarray(rows, dtype=np.float64)
        return EvaluationResult(distributions=rows, attention=None,
                                latent_positions=tuple(range(rows.shape[0])))

    def test_singleton_mean(self):
        answer, dist = finalize_answer(self._evaluation([[0.2, 0.8]]))
        assert answer == 1
        assert np.allclose(dist, [0.2, 0.8])

    def test_symmetric_tie_takes_lowest_index(self):
        answer, dist = finalize_answer(self._evaluation([[1.0, 0.0], [0.0, 1.0]]))
        assert answer == 0
        assert np.allclose(dist, [0.5, 0.5])

    def test_frozen_example(self):
        answer, dist = finalize_answer(
            self._evaluation([[0.6, 0.4], [0.5, 0.5], [0.1, 0.9]]))
        assert answer == 1
        assert np.allclose(dist, [0.4, 0.6], atol=1e-12)

    def test_argmax_invariant_under_token_permutation(self):
        rng = seeded_rng(41, "finalize")
        for _ in range(200):
            rows = rng.dirichlet(np.ones(4), size=3)
            base, _ = finalize_answer(self._evaluation(rows))
            permuted, _ = finalize_answer(self._evaluation(rows[::-1]))
            assert base == permuted


class FlakyBackend(ToyBackend):
    """Fails on the nth evaluate call."""

    def __init__(self, fail_at: int, **kwargs):
        super().__init__(**kwargs)
        self.calls = 0
        self.fail_at = fail_at

    def evaluate(self, *args, **kwargs):
        self.calls += 1
        if self.calls == self.fail_at:
            raise RuntimeError("synthetic backend outage")
        return super().evaluate(*args, **kwargs)


@pytest.fixture(scope="module")
def suite():
    return build_crafted_suite(backend_seed=0, count=2)


class TestRunReasoning:
    def _backend(self, suite):
        return ToyBackend(seed=suite.backend_seed, dim=suite.dim)

    def test_zero_iterations(self, suite):
        crafted = suite.instances[0]
        config = Config(seed=3, n_iter=0)
        result = run_reasoning(crafted.instance, list(suite.repository),
                               self._backend(suite), config)
        assert result.trace.per_iteration == []
        assert result.selected_patches.size == 0
        assert result.trace.initial_reward == result.trace.final_reward
        assert result.final_answer == int(np.argmax(result.final_distribution))

    def test_bit_identical_repeat(self, suite):
        crafted = suite.instances[0]
        config = Config(seed=11)
        backend = self._backend(suite)
        first = run_reasoning(crafted.instance, list(suite.repository), backend, config)
        second = run_reasoning(crafted.instance, list(suite.repository), backend, config)
        assert first.final_answer == second.final_answer
        assert np.array_equal(first.final_distribution, second.final_distribution)
        assert first.trace.columns() == second.trace.columns()
        assert first.selected_patches == second.selected_patches
        assert first.explanation == second.explanation

    def test_best_reward_non_decreasing(self, suite):
        crafted = suite.instances[0]
        result = run_reasoning(crafted.instance, list(suite.repository),
                               self._backend(suite), Config(seed=5))
        best = [row.best_reward for row in result.trace.per_iteration]
        assert best == sorted(best)

    def test_trace_columns_schema(self, suite):
        crafted = suite.instances[0]
        result = run_reasoning(crafted.instance, list(suite.repository),
                               self._backend(suite), Config(seed=5, n_iter=3))
        columns = result.trace.columns()
        assert set(columns) == {"iteration", "reward", "best_reward",
                                "entropies", "patch_indices"}
        assert columns["iteration"] == [1, 2, 3]
        assert all(len(e) == 4 for e in columns["entropies"])

    def test_setting_mismatch_rejected(self, suite):
        crafted = suite.instances[0]
        config = Config(seed=1, setting="zero-shot")
        with pytest.raises(ValueError, match="zero-shot"):
            run_reasoning(crafted.instance, list(suite.repository),
                          self._backend(suite), config)

    def test_zero_shot_runs_without_reference(self, suite):
        from dataclasses import replace
        crafted = suite.instances[0]
        instance = replace(crafted.instance, reference_image=None)
        config = Config(seed=1, setting="zero-shot")
        result = run_reasoning(instance, list(suite.repository),
                               self._backend(suite), config)
        assert result.final_answer == instance.gold_option

    def test_mid_run_failure_carries_iteration_and_trace(self, suite):
        crafted = suite.instances[0]
        backend = FlakyBackend(fail_at=10, seed=suite.backend_seed, dim=suite.dim)
        with pytest.raises(ReasoningError) as info:
            run_reasoning(crafted.instance, list(suite.repository), backend,
                          Config(seed=2))
        assert info.value.iteration >= 1
        assert info.value.partial_trace.per_iteration is not None
        assert "synthetic backend outage" in str(info.value)

    def test_antithetic_option_runs(self, suite):
        crafted = suite.instances[0]
        config = Config(seed=4, antithetic=True, n_iter=3)
        result = run_reasoning(crafted.instance, list(suite.repository),
                               self._backend(suite), config)
        assert len(result.trace.per_iteration) == 3

    def test_inner_trials_override(self, suite):
        crafted = suite.instances[0]
        config = Config(seed=4, n_iter=2, inner_trials=1)
        counting = FlakyBackend(fail_at=10**9, seed=suite.backend_seed,
                                dim=suite.dim)
        run_reasoning(crafted.instance, list(suite.repository), counting, config)
        # initial + per-iter (perturbed + post-update + 1 trial) + final
        assert counting.calls == 1 + 2 * 3 + 1

    @pytest.mark.parametrize("overrides", [
        {"t_patches": 0}, {"inner_trials": 0}, {"sigma_frac": 0.0},
        {"normalize_entropy": False},
    ])
    def test_degenerate_configurations_run(self, suite, overrides):
        crafted = suite.instances[0]
        config = Config(seed=1, **overrides)
        result = run_reasoning(crafted.instance, list(suite.repository),
                               self._backend(suite), config)
        assert len(result.trace.per_iteration) == config.n_iter
        if overrides.get("t_patches") == 0 or overrides.get("inner_trials") == 0:
            assert result.selected_patches.size == 0
