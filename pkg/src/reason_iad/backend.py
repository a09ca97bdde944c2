"""Model-backend contract and the built-in deterministic toy backend.

A backend owns the model side of the pipeline: encoding text and images
into a shared d-dimensional space and evaluating an embedding sequence
into per-latent-token answer distributions plus latent-to-patch attention.
The toy backend is a single seeded self-attention layer over explicit
patch features, small enough to verify the optimization machinery
end-to-end against exhaustive oracles.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .core import PROB_ATOL, as_embedding, seeded_rng

DEFAULT_DIM = 16

# Capability names a backend may declare.
TEXT_ENCODE = "text_encode"
IMAGE_ENCODE = "image_encode"
EVALUATE = "evaluate"
GENERATE = "generate"


class BackendError(RuntimeError):
    """A backend call failed."""


@dataclass(frozen=True)
class EvaluationResult:
    """One forward pass: per-latent-token answer distributions and attention.

    distributions: (m, C) rows, each a probability vector.
    attention:     (m, P) rows over the image's patch positions, each
                   renormalized to sum 1 (None if the backend cannot
                   report attention).
    latent_positions: sequence indices the m rows were read from.
    """

    distributions: np.ndarray
    attention: np.ndarray | None
    latent_positions: tuple[int, ...]

    def validate(self) -> "EvaluationResult":
        dists = np.asarray(self.distributions, dtype=np.float64)
        if dists.ndim != 2 or dists.shape[0] != len(self.latent_positions):
            raise ValueError("distributions must be (m, C) with one row per latent token")
        if dists.shape[1] < 2:
            raise ValueError("distributions need at least 2 options")
        if not np.all(np.isfinite(dists)) or np.any(dists < 0) or np.any(dists > 1):
            raise ValueError("distribution entries outside [0, 1]")
        if np.any(np.abs(dists.sum(axis=1) - 1.0) > PROB_ATOL):
            raise ValueError("distribution rows must sum to 1")
        if self.attention is not None:
            att = np.asarray(self.attention, dtype=np.float64)
            if att.ndim != 2 or att.shape[0] != dists.shape[0]:
                raise ValueError("attention must be (m, P)")
            if att.shape[1] > 0:
                if not np.all(np.isfinite(att)) or np.any(att < 0):
                    raise ValueError("attention entries must be finite and >= 0")
                if np.any(np.abs(att.sum(axis=1) - 1.0) > PROB_ATOL):
                    raise ValueError("attention rows must sum to 1")
        return self


class ModelBackend(ABC):
    """Abstract model interface the engine drives."""

    @property
    @abstractmethod
    def capabilities(self) -> frozenset[str]:
        ...

    @property
    @abstractmethod
    def dimension(self) -> int:
        ...

    @property
    @abstractmethod
    def neutral_token_embedding(self) -> np.ndarray:
        ...

    @abstractmethod
    def encode_text(self, text: str) -> np.ndarray:
        ...

    @abstractmethod
    def encode_image(self, image_ref) -> tuple[np.ndarray, np.ndarray]:
        """Return (pooled embedding (d,), patch embeddings (P, d))."""

    @abstractmethod
    def evaluate(self, sequence: np.ndarray, latent_positions,
                 patch_positions, num_options: int) -> EvaluationResult:
        ...

    def generate(self, sequence: np.ndarray, latent_positions,
                 patch_positions) -> str:
        raise BackendError("backend does not support generation")


@dataclass(frozen=True)
class ToyImageSpec:
    """Explicit image features for the toy backend: patch grid plus pooled vector."""

    patches: np.ndarray
    pooled: np.ndarray

    def __post_init__(self) -> None:
        patches = np.asarray(self.patches, dtype=np.float64)
        pooled = as_embedding(self.pooled)
        if patches.ndim != 2 or patches.shape[0] < 1:
            raise ValueError("image spec needs at least one patch")
        if not np.all(np.isfinite(patches)):
            raise ValueError("patch features must be finite")
        if patches.shape[1] != pooled.shape[0]:
            raise ValueError(
                f"patch dimension {patches.shape[1]} != pooled dimension {pooled.shape[0]}"
            )
        object.__setattr__(self, "patches", patches)
        object.__setattr__(self, "pooled", pooled)

    def to_json(self) -> dict:
        return {"pooled": self.pooled.tolist(), "patches": self.patches.tolist()}

    @classmethod
    def from_json(cls, record: dict) -> "ToyImageSpec":
        if not isinstance(record, dict) or "pooled" not in record or "patches" not in record:
            raise ValueError('image spec must be a map with keys "pooled" and "patches"')
        return cls(patches=np.asarray(record["patches"], dtype=np.float64),
                   pooled=np.asarray(record["pooled"], dtype=np.float64))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ToyImageSpec":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# Token vectors, projections, and answer heads are pure functions of their
# seeds; memoized (read-only) so repeated evaluation calls skip regeneration.
@lru_cache(maxsize=65536)
def _token_unit_vector(seed: int, dim: int, token: str) -> np.ndarray:
    raw = seeded_rng(seed, "text_token", dim, token).standard_normal(dim)
    vec = raw / np.linalg.norm(raw)
    vec.setflags(write=False)
    return vec


def toy_encode_text(text: str, seed: int, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Deterministic text embedding: L2-normalized sum of per-token unit vectors."""
    tokens = text.split()
    if not tokens:
        raise ValueError("empty text")
    total = np.zeros(dim, dtype=np.float64)
    for token in tokens:
        total += _token_unit_vector(seed, dim, token)
    norm = np.linalg.norm(total)
    if norm < 1e-12:
        raise ValueError("degenerate text embedding")
    return total / norm


def toy_encode_image(spec: ToyImageSpec, dim: int = DEFAULT_DIM) -> tuple[np.ndarray, np.ndarray]:
    """Identity encoder: the spec's features are the embeddings."""
    if spec.pooled.shape[0] != dim:
        raise ValueError(f"image spec dimension {spec.pooled.shape[0]} != backend dimension {dim}")
    return spec.pooled.copy(), spec.patches.copy()


@lru_cache(maxsize=256)
def toy_projections(seed: int, dim: int = DEFAULT_DIM) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded query/key/value projection matrices (d, d)."""
    scale = 1.0 / np.sqrt(dim)
    matrices = []
    for name in ("proj_q", "proj_k", "proj_v"):
        matrix = seeded_rng(seed, name, dim).standard_normal((dim, dim)) * scale
        matrix.setflags(write=False)
        matrices.append(matrix)
    return tuple(matrices)


@lru_cache(maxsize=1024)
def toy_answer_head(seed: int, num_options: int, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Seeded answer head (d, C) mapping hidden states to option logits."""
    head = seeded_rng(seed, "answer_head", dim, num_options).standard_normal((dim, num_options))
    head.setflags(write=False)
    return head


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def toy_evaluate(sequence: np.ndarray, latent_positions, patch_positions,
                 num_options: int, seed: int) -> EvaluationResult:
    """One seeded self-attention pass with an answer-head readout.

    The answer distribution of each latent token is the softmax of the
    answer head applied to that token's attention output; its attention
    row is the pass's attention over the patch positions, renormalized.
    """
    if num_options < 2:
        raise ValueError("need at least 2 answer options")
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise ValueError("sequence must be (n, d) with n >= 1")
    n, dim = seq.shape
    latent_positions = tuple(int(i) for i in latent_positions)
    patch_positions = tuple(int(i) for i in patch_positions)
    for pos in (*latent_positions, *patch_positions):
        if not 0 <= pos < n:
            raise ValueError(f"position {pos} outside sequence of length {n}")
    if not latent_positions:
        raise ValueError("need at least one latent position")

    w_q, w_k, w_v = toy_projections(seed, dim)
    w_a = toy_answer_head(seed, num_options, dim)

    queries = seq @ w_q
    keys = seq @ w_k
    values = seq @ w_v
    weights = _softmax_rows(queries @ keys.T / np.sqrt(dim))
    hidden = weights @ values

    latent_index = np.asarray(latent_positions)
    distributions = _softmax_rows(hidden[latent_index] @ w_a)

    if patch_positions:
        rows = weights[latent_index][:, np.asarray(patch_positions)]
        attention = rows / rows.sum(axis=1, keepdims=True)
    else:
        attention = np.zeros((len(latent_positions), 0), dtype=np.float64)

    return EvaluationResult(
        distributions=distributions,
        attention=attention,
        latent_positions=latent_positions,
    ).validate()


class ToyBackend(ModelBackend):
    """Stateless deterministic backend over explicit image specs.

    Image references are paths to spec files (or in-memory ToyImageSpec
    objects). No generation capability: explanation text falls back to
    the engine's structured synthesis.
    """

    def __init__(self, seed: int = 0, dim: int = DEFAULT_DIM):
        self.seed = int(seed)
        self._dim = int(dim)
        self._neutral = toy_encode_text("think", self.seed, self._dim)

    @property
    def capabilities(self) -> frozenset[str]:
        return frozenset({TEXT_ENCODE, IMAGE_ENCODE, EVALUATE})

    @property
    def dimension(self) -> int:
        return self._dim

    @property
    def neutral_token_embedding(self) -> np.ndarray:
        return self._neutral.copy()

    def encode_text(self, text: str) -> np.ndarray:
        return toy_encode_text(text, self.seed, self._dim)

    def encode_image(self, image_ref) -> tuple[np.ndarray, np.ndarray]:
        if isinstance(image_ref, ToyImageSpec):
            spec = image_ref
        elif isinstance(image_ref, dict):
            spec = ToyImageSpec.from_json(image_ref)
        elif isinstance(image_ref, (str, Path)):
            try:
                spec = ToyImageSpec.load(image_ref)
            except (OSError, json.JSONDecodeError, ValueError) as exc:
                raise BackendError(f"cannot load image spec {image_ref!r}: {exc}") from exc
        else:
            raise BackendError(f"unsupported image reference {type(image_ref).__name__}")
        return toy_encode_image(spec, self._dim)

    def evaluate(self, sequence, latent_positions, patch_positions,
                 num_options: int) -> EvaluationResult:
        return toy_evaluate(sequence, latent_positions, patch_positions,
                            num_options, self.seed)

    # Weight accessors so controlled experiments can derive patch features
    # from the same seeded matrices the evaluation uses.
    def projections(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return toy_projections(self.seed, self._dim)

    def answer_head(self, num_options: int) -> np.ndarray:
        return toy_answer_head(self.seed, num_options, self._dim)
