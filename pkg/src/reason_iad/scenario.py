"""Crafted toy scenarios with a planted confidence-raising patch.

Each generated instance carries one patch whose value vector is derived
from the toy backend's own seeded weights so that injecting it strictly
raises every latent token's probability on the gold option. The derivation
is re-done from the weights on every call (never hard-coded) and verified
by exhaustive evaluation of all candidate patch subsets before the
instance is accepted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .backend import ToyBackend, ToyImageSpec
from .core import Config, QueryInstance, Subtask, seeded_rng
from .knowledge import KnowledgeEntry
from .latent import (evaluate_with_patches, finalize_answer, prepare_context,
                     reward)
from .patches import EMPTY_PATCH_SET, PatchSet

CATEGORY_DESCRIPTIONS = {
    "cable": "Three insulated wires in a gray sheath. Defects: missing wire, "
             "swapped insulation colors, crushed sheath, exposed copper.",
    "capsule": "Two-tone gelatin capsule with printed code. Defects: cracks, "
               "dents, misprint, contamination specks.",
    "hazelnut": "Round nut with woody shell. Defects: cracks, cuts, holes, "
                "surface mold patches.",
    "screw": "Steel screw with flat head and full thread. Defects: stripped "
             "thread, bent shank, chipped tip, scratched head.",
    "zipper": "Metal zipper on dark fabric tape. Defects: broken teeth, "
              "split tape, frayed fabric, rough coil.",
    "bottle": "Clear glass bottle viewed from above. Defects: broken rim, "
              "contamination inside, cracked glass body.",
}

_SUBTASK_TEMPLATES = {
    Subtask.ANOMALY_DISCRIMINATION: (
        "Is there any defect visible in the query image?",
        ("Yes", "No"),
    ),
    Subtask.DEFECT_CLASSIFICATION: (
        "What type of defect appears in the query image?",
        ("A crack", "A missing part", "A contamination speck", "A scratch"),
    ),
    Subtask.DEFECT_LOCALIZATION: (
        "Where is the defect located in the query image?",
        ("Top left region", "Top right region", "Bottom left region", "Center"),
    ),
    Subtask.DEFECT_DESCRIPTION: (
        "Which description matches the defect in the query image?",
        ("A thin dark line", "A round bright spot", "A large dent", "A color stain"),
    ),
    Subtask.DEFECT_ANALYSIS: (
        "How does the defect affect the product?",
        ("It breaks the seal", "It weakens the structure",
         "It is cosmetic only", "It blocks assembly"),
    ),
    Subtask.OBJECT_CLASSIFICATION: (
        "What object is shown in the query image?",
        ("A cable", "A capsule", "A hazelnut", "A screw"),
    ),
    Subtask.OBJECT_ANALYSIS: (
        "What is the main function of the object's highlighted part?",
        ("Electrical insulation", "Mechanical fastening",
         "Content protection", "Alignment guidance"),
    ),
}


@dataclass(frozen=True)
class CraftedInstance:
    instance: QueryInstance
    image: ToyImageSpec
    reference: ToyImageSpec
    planted_patch: int


@dataclass(frozen=True)
class CraftedSuite:
    instances: tuple[CraftedInstance, ...]
    repository: tuple[KnowledgeEntry, ...]
    backend_seed: int
    dim: int
    num_patches: int
    t_patches: int


def derive_confidence_patch(backend: ToyBackend, num_options: int,
                            target_option: int, gain: float) -> np.ndarray:
    """Patch embedding whose value pulls answer logits toward the target.

    Solved from the backend's seeded weights: the patch's value image under
    the answer head equals gain times (target one-hot minus the mean of the
    other options), while its key stays neutral for the neutral-token query
    so attention neither ignores nor fixates on it.
    """
    w_q, w_k, w_v = backend.projections()
    w_a = backend.answer_head(num_options)
    neutral_query = backend.neutral_token_embedding @ w_q

    direction = np.full(num_options, -1.0 / (num_options - 1))
    direction[target_option] = 1.0

    logit_map = w_v @ w_a                      # x @ logit_map = answer-logit shift
    key_row = w_k @ neutral_query              # x @ key_row = attention logit * sqrt(d)
    system = np.vstack([logit_map.T, key_row[None, :]])
    rhs = np.concatenate([gain * direction, [0.0]])
    patch, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    return patch


def _junk_patch(rng: np.random.Generator, dim: int, norm: float = 0.3) -> np.ndarray:
    raw = rng.standard_normal(dim)
    return raw * (norm / np.linalg.norm(raw))


def build_repository() -> list[KnowledgeEntry]:
    return [KnowledgeEntry(label, description)
            for label, description in CATEGORY_DESCRIPTIONS.items()]


def _verify_instance(crafted: CraftedInstance, repo, backend: ToyBackend,
                     config: Config, t_patches: int) -> bool:
    """Exhaustively check the planted patch does what the suite promises."""
    instance = crafted.instance
    context = prepare_context(instance, list(repo), backend, config)
    neutral = backend.neutral_token_embedding
    tokens = np.tile(neutral, (config.m, 1))
    gold = instance.gold_option

    def run_eval(patches: PatchSet):
        evaluation = evaluate_with_patches(context, tokens, patches, backend,
                                           instance.num_options)
        return evaluation, reward(evaluation.distributions)

    base_eval, base_reward = run_eval(EMPTY_PATCH_SET)
    planted_eval, _ = run_eval(PatchSet((crafted.planted_patch,)))
    if not np.all(planted_eval.distributions[:, gold]
                  > base_eval.distributions[:, gold]):
        return False

    num_patches = crafted.image.patches.shape[0]
    rewards_with, rewards_without = [], []
    for subset in combinations(range(num_patches), t_patches):
        evaluation, value = run_eval(PatchSet(subset))
        if crafted.planted_patch in subset:
            rewards_with.append(value)
            answer, _ = finalize_answer(evaluation)
            if answer != gold:
                return False
        else:
            rewards_without.append(value)
    if min(rewards_with) <= max(rewards_without):
        return False
    if min(rewards_with) <= base_reward:
        return False
    return True


def build_crafted_suite(backend_seed: int = 0, dim: int = 16,
                        num_patches: int = 9, count: int = 10,
                        t_patches: int = 4, m: int = 4) -> CraftedSuite:
    """Generate `count` verified instances against a toy backend seed."""
    backend = ToyBackend(seed=backend_seed, dim=dim)
    repo = build_repository()
    labels = list(CATEGORY_DESCRIPTIONS)
    subtasks = list(_SUBTASK_TEMPLATES)
    config = Config(m=m, t_patches=t_patches, setting="one-shot",
                    seed=backend_seed)

    crafted: list[CraftedInstance] = []
    for index in range(count):
        subtask = subtasks[index % len(subtasks)]
        question, options = _SUBTASK_TEMPLATES[subtask]
        label = labels[index % len(labels)]
        instance_id = f"toy-{index:03d}-{subtask.value}"
        rng = seeded_rng(backend_seed, "scenario", instance_id)
        gold = int(rng.integers(len(options)))
        planted = int(rng.integers(num_patches))

        pooled = backend.encode_text(label)
        reference = ToyImageSpec(
            patches=np.stack([_junk_patch(rng, dim) for _ in range(num_patches)]),
            pooled=pooled,
        )

        gain = 16.0
        accepted = None
        for _ in range(8):
            patches = np.stack([_junk_patch(rng, dim) for _ in range(num_patches)])
            patches[planted] = derive_confidence_patch(
                backend, len(options), gold, gain)
            image = ToyImageSpec(patches=patches, pooled=pooled)
            candidate = CraftedInstance(
                instance=QueryInstance(
                    instance_id=instance_id,
                    query_image=image,
                    reference_image=reference,
                    question=question,
                    options=tuple(options),
                    subtask=subtask,
                    gold_option=gold,
                    positive_option=(0 if subtask is Subtask.ANOMALY_DISCRIMINATION
                                     else None),
                ),
                image=image,
                reference=reference,
                planted_patch=planted,
            )
            if _verify_instance(candidate, repo, backend, config, t_patches):
                accepted = candidate
                break
            gain *= 1.5
        if accepted is None:
            raise RuntimeError(
                f"could not craft a verified instance for {instance_id!r}")
        crafted.append(accepted)

    return CraftedSuite(
        instances=tuple(crafted),
        repository=tuple(repo),
        backend_seed=backend_seed,
        dim=dim,
        num_patches=num_patches,
        t_patches=t_patches,
    )


def write_suite(suite: CraftedSuite, out_dir: str | Path) -> dict:
    """Materialize the suite as dataset/knowledge/image files for the CLI.

    Returns the paths map: dataset, knowledge, images directory.
    """
    out = Path(out_dir)
    images = out / "images"
    images.mkdir(parents=True, exist_ok=True)

    knowledge_path = out / "knowledge.jsonl"
    with open(knowledge_path, "w", encoding="utf-8") as handle:
        for entry in suite.repository:
            handle.write(json.dumps(
                {"label": entry.label, "description": entry.description}) + "\n")

    letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    dataset_path = out / "dataset.jsonl"
    with open(dataset_path, "w", encoding="utf-8") as handle:
        for crafted in suite.instances:
            instance = crafted.instance
            query_path = images / f"{instance.instance_id}.json"
            reference_path = images / f"{instance.instance_id}.reference.json"
            crafted.image.save(query_path)
            crafted.reference.save(reference_path)
            record = {
                "instance_id": instance.instance_id,
                "image": str(query_path),
                "reference_image": str(reference_path),
                "question": instance.question,
                "options": list(instance.options),
                "gold": letters[instance.gold_option],
                "subtask": instance.subtask.value,
            }
            if instance.positive_option is not None:
                record["positive_option"] = letters[instance.positive_option]
            handle.write(json.dumps(record) + "\n")

    return {"dataset": dataset_path, "knowledge": knowledge_path, "images": images}
