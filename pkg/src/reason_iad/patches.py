"""Attention-guided patch selection and reward-gated best-set tracking.

Candidate patches are sampled without replacement from the latent tokens'
mean attention profile; the best set is replaced only on strict reward
improvement, starting from an empty set at reward -inf so the first
candidate always wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backend import EvaluationResult


@dataclass(frozen=True)
class PatchSet:
    """Distinct patch indices, canonicalized to ascending order."""

    indices: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        canonical = tuple(sorted(int(i) for i in self.indices))
        if any(i < 0 for i in canonical):
            raise ValueError("patch indices must be >= 0")
        if len(set(canonical)) != len(canonical):
            raise ValueError("patch indices must be distinct")
        object.__setattr__(self, "indices", canonical)

    @property
    def size(self) -> int:
        return len(self.indices)

    def __contains__(self, index: int) -> bool:
        return index in self.indices


EMPTY_PATCH_SET = PatchSet()


def validate_profile(weights) -> np.ndarray:
    profile = np.asarray(weights, dtype=np.float64)
    if profile.ndim != 1 or profile.size == 0:
        raise ValueError("attention profile must be a non-empty 1-D vector")
    if not np.all(np.isfinite(profile)) or np.any(profile < 0):
        raise ValueError("attention profile entries must be finite and >= 0")
    if abs(float(profile.sum()) - 1.0) > 1e-9:
        raise ValueError("attention profile must sum to 1")
    return profile


def latent_to_patch_attention(evaluation: EvaluationResult) -> np.ndarray:
    """Mean over latent tokens of their patch-attention rows, renormalized."""
    if evaluation.attention is None:
        raise ValueError("backend lacks attention capability")
    attention = np.asarray(evaluation.attention, dtype=np.float64)
    if attention.ndim != 2 or attention.shape[1] == 0:
        raise ValueError("attention map must be (m, P) with P >= 1")
    profile = attention.mean(axis=0)
    total = profile.sum()
    if total <= 0:
        raise ValueError("attention profile has no mass")
    return profile / total


def sample_candidates(profile, t: int, rng: np.random.Generator) -> PatchSet:
    """Draw t distinct patch indices by weighted sampling without replacement.

    Uses exponential-race keys (Gumbel top-t), which reproduces sequential
    weighted draws without replacement; t is clamped to the number of
    patches with nonzero weight, and zero-weight patches are never chosen.
    """
    profile = validate_profile(profile)
    if t < 0:
        raise ValueError("t must be >= 0")
    nonzero = np.flatnonzero(profile > 0)
    take = min(t, nonzero.size)
    if take == 0:
        return EMPTY_PATCH_SET
    gumbel = rng.gumbel(size=nonzero.size)
    keys = np.log(profile[nonzero]) + gumbel
    chosen = nonzero[np.argsort(-keys)[:take]]
    return PatchSet(indices=tuple(int(i) for i in chosen))


def update_best(cand: PatchSet, cand_reward: float, best: PatchSet,
                best_reward: float) -> tuple[PatchSet, float]:
    """Keep the candidate only on strict reward improvement."""
    if cand_reward > best_reward:
        return cand, float(cand_reward)
    return best, float(best_reward)


INITIAL_BEST_REWARD = -math.inf


def inject_patches(prompt_embeddings: np.ndarray, latent_tokens: np.ndarray,
                   patches: PatchSet, image_patch_embeddings: np.ndarray
                   ) -> tuple[np.ndarray, tuple[int, ...]]:
    """Build [prompt, selected patch embeddings, latent tokens].

    Returns the sequence and the positions of the latent tokens within it.
    """
    prompt = np.asarray(prompt_embeddings, dtype=np.float64)
    latents = np.asarray(latent_tokens, dtype=np.float64)
    patch_bank = np.asarray(image_patch_embeddings, dtype=np.float64)
    if prompt.ndim != 2 or latents.ndim != 2 or patch_bank.ndim != 2:
        raise ValueError("all inputs must be 2-D (count, d) arrays")
    for index in patches.indices:
        if index >= patch_bank.shape[0]:
            raise ValueError(f"patch index {index} outside bank of {patch_bank.shape[0]}")
    selected = patch_bank[list(patches.indices)] if patches.size else \
        np.zeros((0, prompt.shape[1]), dtype=np.float64)
    sequence = np.concatenate([prompt, selected, latents], axis=0)
    start = prompt.shape[0] + selected.shape[0]
    latent_positions = tuple(range(start, start + latents.shape[0]))
    return sequence, latent_positions
