"""Shared domain types, run configuration, and deterministic RNG provisioning.

Everything downstream imports from here: embeddings are plain 1-D float64
numpy arrays, answer distributions are 1-D probability arrays, and random
streams are derived from a (seed, labels...) key so that per-instance work
is reproducible regardless of scheduling order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache

import numpy as np

ONE_SHOT = "one-shot"
ZERO_SHOT = "zero-shot"

#: Tolerance for "sums to one" checks on probability vectors.
PROB_ATOL = 1e-9


class Subtask(str, Enum):
    """The seven QA task types handled by the harness."""

    ANOMALY_DISCRIMINATION = "anomaly_discrimination"
    DEFECT_CLASSIFICATION = "defect_classification"
    DEFECT_LOCALIZATION = "defect_localization"
    DEFECT_DESCRIPTION = "defect_description"
    DEFECT_ANALYSIS = "defect_analysis"
    OBJECT_CLASSIFICATION = "object_classification"
    OBJECT_ANALYSIS = "object_analysis"


@dataclass(frozen=True)
class Config:
    """Run configuration.

    Defaults are the reference operating point: 4 latent tokens, 10
    reasoning iterations, learning rate 1e-3, 10% relative perturbation,
    top-2 retrieval.
    """

    m: int = 4
    n_iter: int = 10
    eta: float = 1e-3
    sigma_frac: float = 0.10
    top_k: int = 2
    t_patches: int = 4
    seed: int = 0
    setting: str = ONE_SHOT
    # Number of candidate-patch trials per iteration; None means m.
    inner_trials: int | None = None
    # When False, rewards use raw entropy in nats instead of the
    # [0, 1]-normalized form (can go negative for C > 2).
    normalize_entropy: bool = True
    # Antithetic (+noise / -noise) gradient estimation; off by default.
    antithetic: bool = False

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.n_iter < 0:
            raise ValueError("n_iter must be >= 0")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.sigma_frac < 0:
            raise ValueError("sigma_frac must be >= 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.t_patches < 0:
            raise ValueError("t_patches must be >= 0")
        if self.setting not in (ONE_SHOT, ZERO_SHOT):
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.inner_trials is not None and self.inner_trials < 0:
            raise ValueError("inner_trials must be >= 0")

    @property
    def effective_inner_trials(self) -> int:
        return self.m if self.inner_trials is None else self.inner_trials

    def with_overrides(self, **kwargs) -> "Config":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class QueryInstance:
    """One QA instance: image reference(s), question, options, gold label."""

    instance_id: str
    query_image: str
    question: str
    options: tuple[str, ...]
    subtask: Subtask
    reference_image: str | None = None
    gold_option: int | None = None
    # Index of the option that asserts "anomalous"; only meaningful for
    # anomaly_discrimination instances.
    positive_option: int | None = None
    dataset: str | None = None

    def __post_init__(self) -> None:
        if len(self.options) < 2:
            raise ValueError(
                f"instance {self.instance_id!r}: needs at least 2 options"
            )
        for name, idx in (("gold_option", self.gold_option),
                          ("positive_option", self.positive_option)):
            if idx is not None and not 0 <= idx < len(self.options):
                raise ValueError(
                    f"instance {self.instance_id!r}: {name} {idx} out of range"
                )

    @property
    def num_options(self) -> int:
        return len(self.options)


def as_embedding(values) -> np.ndarray:
    """Coerce to a finite 1-D float64 vector."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise ValueError("embedding must be a non-empty 1-D vector")
    if not np.all(np.isfinite(vec)):
        raise ValueError("embedding has non-finite entries")
    return vec


def validate_distribution(probs, num_options: int | None = None) -> np.ndarray:
    """Check a probability vector: entries in [0, 1], sums to 1 within 1e-9."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("distribution must be 1-D with at least 2 entries")
    if num_options is not None and p.size != num_options:
        raise ValueError(f"distribution has {p.size} entries, expected {num_options}")
    if not np.all(np.isfinite(p)):
        raise ValueError("distribution has non-finite entries")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("distribution entries outside [0, 1]")
    if abs(float(p.sum()) - 1.0) > PROB_ATOL:
        raise ValueError(f"distribution sums to {p.sum()!r}, not 1")
    return p


@lru_cache(maxsize=65536)
def _label_words(label) -> tuple[int, ...]:
    """Hash one stream label into 32-bit words (stable across processes)."""
    if isinstance(label, (int, np.integer)):
        data = b"i" + int(label).to_bytes(16, "little", signed=True)
    else:
        data = b"s" + str(label).encode("utf-8")
    digest = hashlib.sha256(data).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


def seeded_rng(seed: int, *labels) -> np.random.Generator:
    """Deterministic generator for the stream named by (seed, labels...).

    Identical keys yield identical streams; any difference in seed or any
    label yields a statistically independent stream.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for label in labels:
        entropy.extend(_label_words(label))
    return np.random.default_rng(np.random.SeedSequence(entropy))
