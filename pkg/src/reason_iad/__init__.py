"""Retrieval-augmented latent reasoning engine and evaluation harness."""

from .backend import (BackendError, EvaluationResult, ModelBackend,
                      ToyBackend, ToyImageSpec)
from .core import Config, QueryInstance, Subtask, seeded_rng
from .harness import RunReport, compute_metrics, load_dataset, run_batch
from .knowledge import (KnowledgeEntry, RetrievalResult, assemble_prompt,
                        cosine_similarity, embed_labels,
                        load_knowledge_repository, retrieve_top_k)
from .latent import (LatentState, ReasoningResult, RewardTrace,
                     apply_update, estimate_gradient, finalize_answer,
                     init_latent_tokens, normalized_entropy, perturb,
                     reward, run_reasoning, sigma_from_fraction)
from .patches import (PatchSet, inject_patches, latent_to_patch_attention,
                      sample_candidates, update_best)
from .wire import WireBackend, run_conformance, serve_backend

__version__ = "0.1.0"

__all__ = [
    "BackendError", "Config", "EvaluationResult", "KnowledgeEntry",
    "LatentState", "ModelBackend", "PatchSet", "QueryInstance",
    "ReasoningResult", "RetrievalResult", "RewardTrace", "RunReport",
    "Subtask", "ToyBackend", "ToyImageSpec", "WireBackend",
    "apply_update", "assemble_prompt", "compute_metrics",
    "cosine_similarity", "embed_labels", "estimate_gradient",
    "finalize_answer", "init_latent_tokens", "inject_patches",
    "latent_to_patch_attention", "load_dataset",
    "load_knowledge_repository", "normalized_entropy", "perturb",
    "retrieve_top_k", "reward", "run_batch", "run_conformance",
    "run_reasoning", "sample_candidates", "seeded_rng", "serve_backend",
    "sigma_from_fraction", "update_best",
]
