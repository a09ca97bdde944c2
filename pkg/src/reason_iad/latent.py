"""Entropy-driven latent reasoning over optimizable think tokens.

The engine inserts m continuous think tokens into the model input,
perturbs them with Gaussian noise, scores the perturbed state by one
minus the mean (normalized) entropy of the per-token answer
distributions, ascends the reward with a single-sample policy-gradient
estimate, and after each update lets an inner loop resample candidate
image patches from the tokens' attention profile, keeping the best set
under strict reward improvement.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .backend import GENERATE, BackendError, EvaluationResult, ModelBackend
from .core import ONE_SHOT, Config, QueryInstance, seeded_rng
from .knowledge import (RetrievalResult, assemble_prompt, embed_labels,
                        retrieve_top_k, OPTION_LETTERS)
from .patches import (EMPTY_PATCH_SET, INITIAL_BEST_REWARD, PatchSet,
                      inject_patches, latent_to_patch_attention,
                      sample_candidates, update_best)


class ReasoningError(RuntimeError):
    """Backend failure mid-run; carries the iteration index and partial trace."""

    def __init__(self, message: str, iteration: int, partial_trace: "RewardTrace"):
        super().__init__(message)
        self.iteration = iteration
        self.partial_trace = partial_trace


@dataclass(frozen=True)
class LatentState:
    """Current think tokens plus the best patch set found so far.

    best_reward only ever grows over a run (strict-improvement updates);
    iteration counts completed outer iterations.
    """

    tokens: np.ndarray
    best_patches: PatchSet
    best_reward: float
    iteration: int

    def __post_init__(self) -> None:
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise ValueError("latent state needs (m, d) tokens with m >= 1")
        if not np.all(np.isfinite(tokens)):
            raise ValueError("latent tokens must be finite")
        if self.iteration < 0:
            raise ValueError("iteration must be >= 0")
        object.__setattr__(self, "tokens", tokens)


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    reward: float
    entropies: tuple[float, ...]
    best_reward: float
    patch_indices: tuple[int, ...]


@dataclass
class RewardTrace:
    """Per-iteration optimization record, plus the initial/final state rewards."""

    per_iteration: list[TraceRow] = field(default_factory=list)
    initial_reward: float = 0.0
    final_reward: float = 0.0

    def columns(self) -> dict:
        """Columnar export map; key names are the fixed trace-file schema."""
        return {
            "iteration": [row.iteration for row in self.per_iteration],
            "reward": [row.reward for row in self.per_iteration],
            "best_reward": [row.best_reward for row in self.per_iteration],
            "entropies": [list(row.entropies) for row in self.per_iteration],
            "patch_indices": [list(row.patch_indices) for row in self.per_iteration],
        }


@dataclass(frozen=True)
class ReasoningResult:
    instance_id: str
    final_answer: int
    final_distribution: np.ndarray
    trace: RewardTrace
    selected_patches: PatchSet
    retrieved_knowledge: RetrievalResult
    explanation: str
    prompt: str


def init_latent_tokens(m: int, backend: ModelBackend, rng: np.random.Generator,
                       jitter_scale: float = 0.01) -> np.ndarray:
    """m copies of the backend's neutral token, each with small Gaussian jitter.

    Jitter standard deviation is jitter_scale times the neutral embedding's
    root-mean-square entry, so initialization respects the backend's scale.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    neutral = np.asarray(backend.neutral_token_embedding, dtype=np.float64)
    rms = float(np.sqrt(np.mean(neutral ** 2)))
    tokens = np.tile(neutral, (m, 1))
    tokens += rng.standard_normal(tokens.shape) * (jitter_scale * rms)
    return tokens


def sigma_from_fraction(tokens: np.ndarray, sigma_frac: float) -> float:
    """Perturbation scale: sigma_frac times the RMS of all token entries."""
    if sigma_frac < 0:
        raise ValueError("sigma_frac must be >= 0")
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.size == 0:
        raise ValueError("degenerate latent state: no tokens")
    rms = float(np.sqrt(np.mean(tokens ** 2)))
    if rms == 0.0:
        raise ValueError("degenerate latent state: all-zero tokens")
    return sigma_frac * rms


def perturb(tokens: np.ndarray, sigma: float, rng: np.random.Generator
            ) -> tuple[np.ndarray, np.ndarray]:
    """Additive elementwise Gaussian noise: returns (tokens + noise, noise)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    tokens = np.asarray(tokens, dtype=np.float64)
    noise = rng.standard_normal(tokens.shape) * sigma
    return tokens + noise, noise


def entropy_nats(probs) -> float:
    """Shannon entropy in nats with the 0 log 0 = 0 convention."""
    p = np.asarray(probs, dtype=np.float64)
    nonzero = p[p > 0]
    return float(-(nonzero * np.log(nonzero)).sum())


def normalized_entropy(probs) -> float:
    """Entropy divided by log(C): 0 for one-hot, 1 for uniform."""
    p = np.asarray(probs, dtype=np.float64)
    if p.size < 2:
        raise ValueError("need a distribution over at least 2 options")
    return entropy_nats(p) / float(np.log(p.size))


def reward(per_token_distributions, normalize: bool = True) -> float:
    """One minus the mean per-token entropy (normalized by default)."""
    dists = list(per_token_distributions)
    if not dists:
        raise ValueError("need at least one per-token distribution")
    measure = normalized_entropy if normalize else entropy_nats
    return 1.0 - float(np.mean([measure(p) for p in dists]))


def estimate_gradient(reward_value: float, noise: np.ndarray, sigma: float
                      ) -> np.ndarray:
    """Single-sample policy-gradient estimate: reward * noise / sigma^2."""
    if sigma == 0:
        raise ValueError("zero perturbation scale")
    return float(reward_value) * np.asarray(noise, dtype=np.float64) / (sigma ** 2)


def apply_update(tokens: np.ndarray, gradient: np.ndarray, eta: float
                 ) -> np.ndarray:
    """Ascent step: tokens + eta * gradient."""
    if eta < 0:
        raise ValueError("eta must be >= 0")
    tokens = np.asarray(tokens, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != tokens.shape:
        raise ValueError(f"gradient shape {gradient.shape} != tokens {tokens.shape}")
    if not np.all(np.isfinite(gradient)):
        raise ValueError("divergent update: non-finite gradient")
    return tokens + eta * gradient


def finalize_answer(final_eval: EvaluationResult) -> tuple[int, np.ndarray]:
    """Mean of the per-token distributions, renormalized; argmax answer.

    Ties resolve to the lowest option index.
    """
    dists = np.asarray(final_eval.distributions, dtype=np.float64)
    mean = dists.mean(axis=0)
    mean = mean / mean.sum()
    return int(np.argmax(mean)), mean


def _entropies(distributions: np.ndarray, normalize: bool) -> tuple[float, ...]:
    measure = normalized_entropy if normalize else entropy_nats
    return tuple(measure(p) for p in distributions)


def synthesize_explanation(instance: QueryInstance, retrieved: RetrievalResult,
                           patches: PatchSet, trace: RewardTrace,
                           answer: int, distribution: np.ndarray) -> str:
    """Structured explanation from the run's own evidence trail."""
    if retrieved.ranked:
        knowledge = ", ".join(
            f"{entry.label} (similarity {score:.4f})" for entry, score in retrieved.ranked
        )
    else:
        knowledge = "none"
    patch_text = ", ".join(str(i) for i in patches.indices) if patches.size else "none"
    letter = OPTION_LETTERS[answer]
    return (
        f"Answer {letter}: {instance.options[answer]} "
        f"(confidence {float(distribution[answer]):.4f}). "
        f"Retrieved knowledge: {knowledge}. "
        f"Injected patches: {patch_text}. "
        f"Reward moved from {trace.initial_reward:.4f} to {trace.final_reward:.4f} "
        f"(best {max((row.best_reward for row in trace.per_iteration), default=trace.final_reward):.4f}) "
        f"over {len(trace.per_iteration)} iterations."
    )


@dataclass(frozen=True)
class EngineContext:
    """Prepared per-instance evaluation context.

    base is [prompt embedding, reference pooled (one-shot only), query
    pooled, all query patch embeddings]; patch_positions index the patch
    block inside it. Injection appends selected patch copies and the
    latent tokens after the base.
    """

    base: np.ndarray
    patch_positions: tuple[int, ...]
    patch_bank: np.ndarray
    retrieved: RetrievalResult
    prompt: str


def prepare_context(instance: QueryInstance, repo, backend: ModelBackend,
                    config: Config) -> EngineContext:
    """Retrieval, prompt assembly, and base-sequence construction."""
    if config.setting == ONE_SHOT and instance.reference_image is None:
        raise ValueError(f"instance {instance.instance_id!r}: one-shot run needs a reference image")
    if config.setting != ONE_SHOT and instance.reference_image is not None:
        raise ValueError(f"instance {instance.instance_id!r}: zero-shot run must not carry a reference image")

    pooled, patch_bank = backend.encode_image(instance.query_image)
    if repo:
        embedded = embed_labels(repo, backend)
        retrieved = retrieve_top_k(pooled, embedded, config.top_k)
    else:
        retrieved = RetrievalResult(ranked=(), k=config.top_k)
    prompt = assemble_prompt(instance, retrieved, config.setting)

    prefix = [backend.encode_text(prompt)]
    if config.setting == ONE_SHOT:
        ref_pooled, _ = backend.encode_image(instance.reference_image)
        prefix.append(ref_pooled)
    prefix.append(pooled)
    base = np.concatenate([np.stack(prefix), patch_bank], axis=0)
    patch_positions = tuple(range(len(prefix), len(prefix) + patch_bank.shape[0]))
    return EngineContext(base=base, patch_positions=patch_positions,
                         patch_bank=patch_bank, retrieved=retrieved, prompt=prompt)


def evaluate_with_patches(context: EngineContext, tokens: np.ndarray,
                          patches: PatchSet, backend: ModelBackend,
                          num_options: int) -> EvaluationResult:
    """Evaluate the context's sequence with the given injection and tokens."""
    sequence, latent_positions = inject_patches(
        context.base, tokens, patches, context.patch_bank)
    return backend.evaluate(sequence, latent_positions,
                            context.patch_positions, num_options)


def run_reasoning(instance: QueryInstance, repo, backend: ModelBackend,
                  config: Config) -> ReasoningResult:
    """Full reasoning pass for one instance.

    Retrieval enriches the prompt; the optimization loop runs n_iter
    outer iterations (perturb, estimate gradient, update) each followed
    by the inner candidate-patch loop, and the answer comes from one
    final evaluation of the unperturbed tokens plus the best patch set.
    """
    context = prepare_context(instance, repo, backend, config)
    retrieved = context.retrieved
    num_options = instance.num_options
    trace = RewardTrace()

    def evaluate_state(tokens: np.ndarray, patches: PatchSet, iteration: int
                       ) -> tuple[EvaluationResult, float]:
        try:
            evaluation = evaluate_with_patches(context, tokens, patches,
                                               backend, num_options)
        except Exception as exc:
            raise ReasoningError(
                f"backend evaluation failed at iteration {iteration} "
                f"for instance {instance.instance_id!r}: {exc}",
                iteration=iteration, partial_trace=trace,
            ) from exc
        return evaluation, reward(evaluation.distributions, config.normalize_entropy)

    state = LatentState(
        tokens=init_latent_tokens(
            config.m, backend,
            seeded_rng(config.seed, "latent_init", instance.instance_id)),
        best_patches=EMPTY_PATCH_SET,
        best_reward=INITIAL_BEST_REWARD,
        iteration=0,
    )

    initial_eval, initial_reward = evaluate_state(state.tokens, EMPTY_PATCH_SET, 0)
    trace.initial_reward = initial_reward

    current_eval = initial_eval
    for n in range(1, config.n_iter + 1):
        sigma = sigma_from_fraction(state.tokens, config.sigma_frac)
        perturbed, noise = perturb(
            state.tokens, sigma,
            seeded_rng(config.seed, "perturb", instance.instance_id, n))
        perturbed_eval, perturbed_reward = evaluate_state(
            perturbed, state.best_patches, n)
        if sigma > 0:
            if config.antithetic:
                _, mirror_reward = evaluate_state(
                    state.tokens - noise, state.best_patches, n)
                gradient = estimate_gradient(
                    (perturbed_reward - mirror_reward) / 2.0, noise, sigma)
            else:
                gradient = estimate_gradient(perturbed_reward, noise, sigma)
            state = replace(
                state, tokens=apply_update(state.tokens, gradient, config.eta))

        current_eval, _ = evaluate_state(state.tokens, state.best_patches, n)
        for j in range(1, config.effective_inner_trials + 1):
            profile = latent_to_patch_attention(current_eval)
            cand = sample_candidates(
                profile, config.t_patches,
                seeded_rng(config.seed, "patch_sample", instance.instance_id, n, j))
            cand_eval, cand_reward = evaluate_state(state.tokens, cand, n)
            new_best, new_reward = update_best(
                cand, cand_reward, state.best_patches, state.best_reward)
            if new_best is cand:
                current_eval = cand_eval
            state = replace(state, best_patches=new_best, best_reward=new_reward)

        state = replace(state, iteration=n)
        trace.per_iteration.append(TraceRow(
            iteration=n,
            reward=perturbed_reward,
            entropies=_entropies(perturbed_eval.distributions, config.normalize_entropy),
            best_reward=state.best_reward,
            patch_indices=state.best_patches.indices,
        ))

    if config.n_iter == 0:
        final_eval, final_reward = initial_eval, initial_reward
    else:
        final_eval, final_reward = evaluate_state(
            state.tokens, state.best_patches, config.n_iter)
    trace.final_reward = final_reward

    answer, distribution = finalize_answer(final_eval)

    if GENERATE in backend.capabilities:
        sequence, latent_positions = inject_patches(
            context.base, state.tokens, state.best_patches, context.patch_bank)
        try:
            explanation = backend.generate(sequence, latent_positions,
                                           context.patch_positions)
        except BackendError:
            explanation = synthesize_explanation(
                instance, retrieved, state.best_patches, trace, answer, distribution)
    else:
        explanation = synthesize_explanation(
            instance, retrieved, state.best_patches, trace, answer, distribution)

    return ReasoningResult(
        instance_id=instance.instance_id,
        final_answer=answer,
        final_distribution=distribution,
        trace=trace,
        selected_patches=state.best_patches,
        retrieved_knowledge=retrieved,
        explanation=explanation,
        prompt=context.prompt,
    )
