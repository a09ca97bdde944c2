"""Attention profiles, candidate sampling, best-set updates, and injection."""

import numpy as np
import pytest

from reason_iad.backend import EvaluationResult
from reason_iad.core import seeded_rng
from reason_iad.patches import (EMPTY_PATCH_SET, INITIAL_BEST_REWARD, PatchSet,
                                inject_patches, latent_to_patch_attention,
                                sample_candidates, update_best)


def _evaluation(attention):
    attention = np.asarray(attention, dtype=np.float64)
    m = attention.shape[0]
    dists = np.full((m, 2), 0.5)
    return EvaluationResult(distributions=dists, attention=attention,
                            latent_positions=tuple(range(m)))


class TestPatchSet:
    def test_canonical_ascending_order(self):
        assert PatchSet((5, 2, 9)).indices == (2, 5, 9)

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            PatchSet((1, 1))

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            PatchSet((-1,))


class TestLatentToPatchAttention:
    def test_singleton_mean(self):
        profile = latent_to_patch_attention(_evaluation([[0.5, 0.5]]))
        assert np.allclose(profile, [0.5, 0.5])

    def test_symmetric_mean(self):
        profile = latent_to_patch_attention(_evaluation([[1.0, 0.0], [0.0, 1.0]]))
        assert np.allclose(profile, [0.5, 0.5])

    def test_frozen_example(self):
        profile = latent_to_patch_attention(_evaluation([[0.8, 0.2], [0.4, 0.6]]))
        assert np.allclose(profile, [0.6, 0.4], atol=1e-12)

    def test_missing_attention_rejected(self):
        evaluation = EvaluationResult(distributions=np.full((1, 2), 0.5),
                                      attention=None, latent_positions=(0,))
        with pytest.raises(ValueError, match="lacks attention"):
            latent_to_patch_attention(evaluation)

    def test_output_is_valid_profile(self):
        rng = seeded_rng(77, "profiles")
        for _ in range(200):
            m, p = int(rng.integers(1, 6)), int(rng.integers(1, 10))
            raw = rng.uniform(0, 1, size=(m, p)) + 1e-9
            rows = raw / raw.sum(axis=1, keepdims=True)
            profile = latent_to_patch_attention(_evaluation(rows))
            assert np.all(profile >= 0)
            assert profile.sum() == pytest.approx(1.0, abs=1e-9)


class TestSampleCandidates:
    def test_degenerate_profile(self):
        profile = np.zeros(8)
        profile[3] = 1.0
        rng = seeded_rng(1, "sample")
        for _ in range(20):
            assert sample_candidates(profile, 1, rng).indices == (3,)

    def test_zero_request(self):
        assert sample_candidates(np.full(4, 0.25), 0, seeded_rng(1, "s")) \
            == EMPTY_PATCH_SET

    def test_clamps_to_nonzero_support(self):
        profile = np.array([0.5, 0.5, 0.0, 0.0])
        result = sample_candidates(profile, 4, seeded_rng(1, "s"))
        assert result.indices == (0, 1)

    def test_never_returns_zero_weight_patch(self):
        profile = np.array([0.5, 0.0, 0.25, 0.25])
        rng = seeded_rng(2, "s")
        for _ in range(500):
            assert 1 not in sample_candidates(profile, 2, rng)

    def test_indices_distinct(self):
        rng = seeded_rng(3, "s")
        profile = np.full(10, 0.1)
        for _ in range(200):
            drawn = sample_candidates(profile, 4, rng).indices
            assert len(set(drawn)) == len(drawn) == 4

    def test_deterministic_given_stream(self):
        profile = np.full(8, 0.125)
        first = sample_candidates(profile, 3, seeded_rng(9, "fixed"))
        second = sample_candidates(profile, 3, seeded_rng(9, "fixed"))
        assert first == second

    def test_uniform_inclusion_frequencies(self):
        # Monte-Carlo oracle: t=2 of 8 uniform patches, inclusion rate 0.25.
        rng = seeded_rng(5, "freq")
        profile = np.full(8, 0.125)
        counts = np.zeros(8)
        draws = 100_000
        for _ in range(draws):
            for index in sample_candidates(profile, 2, rng).indices:
                counts[index] += 1
        assert np.all(np.abs(counts / draws - 0.25) < 0.01)

    def test_weighted_frequencies_match_sequential_oracle(self):
        # Against an explicit sequential without-replacement sampler.
        profile = np.array([0.5, 0.3, 0.2])
        rng = seeded_rng(6, "wfreq")
        draws = 60_000
        counts = np.zeros(3)
        for _ in range(draws):
            for index in sample_candidates(profile, 2, rng).indices:
                counts[index] += 1

        oracle_rng = seeded_rng(7, "wfreq_oracle")
        oracle_counts = np.zeros(3)
        for _ in range(draws):
            remaining = profile.copy()
            for _ in range(2):
                weights = remaining / remaining.sum()
                pick = oracle_rng.choice(3, p=weights)
                oracle_counts[pick] += 1
                remaining[pick] = 0.0
        assert np.all(np.abs(counts / draws - oracle_counts / draws) < 0.012)


class TestUpdateBest:
    def test_strict_improvement_required(self):
        best = PatchSet((1,))
        kept, kept_reward = update_best(PatchSet((2,)), 0.5, best, 0.5)
        assert kept == best and kept_reward == 0.5

    def test_first_candidate_always_accepted(self):
        cand = PatchSet((4,))
        kept, kept_reward = update_best(cand, -123.0, EMPTY_PATCH_SET,
                                        INITIAL_BEST_REWARD)
        assert kept == cand and kept_reward == -123.0

    def test_fold_frozen_example(self):
        stream = [(PatchSet((0,)), 0.2), (PatchSet((1,)), 0.5), (PatchSet((2,)), 0.3)]
        best, best_reward = EMPTY_PATCH_SET, INITIAL_BEST_REWARD
        for cand, value in stream:
            best, best_reward = update_best(cand, value, best, best_reward)
        assert best == PatchSet((1,)) and best_reward == 0.5

    def test_fold_matches_max_scan_oracle(self):
        rng = seeded_rng(8, "fold")
        for _ in range(300):
            length = int(rng.integers(1, 30))
            rewards = rng.uniform(-1, 1, size=length)
            best, best_reward = EMPTY_PATCH_SET, INITIAL_BEST_REWARD
            trajectory = []
            for index, value in enumerate(rewards):
                best, best_reward = update_best(PatchSet((index,)), float(value),
                                                best, best_reward)
                trajectory.append(best_reward)
            # Non-decreasing, equals the running maximum, first-attained on ties.
            assert trajectory == [float(np.max(rewards[:i + 1]))
                                  for i in range(length)]
            first_argmax = int(np.argmax(rewards))
            assert best == PatchSet((first_argmax,))


class TestInjectPatches:
    def _parts(self, dim=6):
        rng = seeded_rng(10, "inject")
        prompt = rng.standard_normal((3, dim))
        latents = rng.standard_normal((2, dim))
        bank = rng.standard_normal((5, dim))
        return prompt, latents, bank

    def test_empty_injection(self):
        prompt, latents, bank = self._parts()
        sequence, positions = inject_patches(prompt, latents, EMPTY_PATCH_SET, bank)
        assert sequence.shape == (5, 6)
        assert positions == (3, 4)
        assert np.array_equal(sequence[:3], prompt)
        assert np.array_equal(sequence[3:], latents)

    def test_index_order_between_prompt_and_latents(self):
        prompt, latents, bank = self._parts()
        sequence, positions = inject_patches(prompt, latents, PatchSet((2, 0)), bank)
        assert sequence.shape == (7, 6)
        assert np.array_equal(sequence[3], bank[0])
        assert np.array_equal(sequence[4], bank[2])
        assert positions == (5, 6)

    def test_length_arithmetic(self):
        prompt, latents, bank = self._parts()
        for subset in [(), (1,), (0, 3, 4)]:
            sequence, _ = inject_patches(prompt, latents, PatchSet(subset), bank)
            assert sequence.shape[0] == 3 + len(subset) + 2

    def test_out_of_range_index_rejected(self):
        prompt, latents, bank = self._parts()
        with pytest.raises(ValueError):
            inject_patches(prompt, latents, PatchSet((9,)), bank)
