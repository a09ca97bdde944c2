"""Category-knowledge retrieval and prompt assembly.

A knowledge repository is an ordered list of (category label, description)
records. Retrieval embeds the labels with the active backend's text
encoder, scores them against the query image's pooled embedding by cosine
similarity, and injects the top-k descriptions into the inspection prompt.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import ONE_SHOT, QueryInstance, as_embedding

PROMPT_PREAMBLE = (
    "You are an expert industrial inspector responsible for analyzing product "
    "images. Your task is to determine whether the query image contains any "
    "defects and to answer the related questions. You should first perform "
    "the reasoning process internally and then provide the final answer. "
    "The following domain knowledge describes typical defect types and "
    "normal object characteristics: "
)

OPTION_LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


@dataclass(frozen=True)
class KnowledgeEntry:
    """Category label plus its defect/normal-appearance description."""

    label: str
    description: str
    label_embedding: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError("knowledge entry label must be non-empty")
        if not self.description:
            raise ValueError(f"entry {self.label!r}: description must be non-empty")


@dataclass(frozen=True)
class RetrievalResult:
    """Top-k entries with their similarity scores, best first."""

    ranked: tuple[tuple[KnowledgeEntry, float], ...]
    k: int

    def labels(self) -> list[str]:
        return [entry.label for entry, _ in self.ranked]


def load_knowledge_repository(path: str | Path) -> list[KnowledgeEntry]:
    """Read a repository file: one JSON record per line, line order is index order."""
    entries: list[KnowledgeEntry] = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if not isinstance(record, dict):
                raise ValueError(f"{path}:{lineno}: record must be a map")
            for key in ("label", "description"):
                if key not in record or not isinstance(record[key], str):
                    raise ValueError(f"{path}:{lineno}: missing string key {key!r}")
            entries.append(KnowledgeEntry(record["label"], record["description"]))
    return entries


def embed_labels(repo: list[KnowledgeEntry], backend) -> list[KnowledgeEntry]:
    """Populate every entry's label embedding via the backend text encoder."""
    embedded = []
    for entry in repo:
        try:
            vec = as_embedding(backend.encode_text(entry.label))
        except Exception as exc:
            raise RuntimeError(
                f"failed to embed knowledge label {entry.label!r}: {exc}"
            ) from exc
        embedded.append(replace(entry, label_embedding=vec))
    return embedded


def cosine_similarity(v, k) -> float:
    """v.k / (|v| |k|), defined only for nonzero vectors of equal dimension."""
    v = as_embedding(v)
    k = as_embedding(k)
    if v.shape != k.shape:
        raise ValueError(f"dimension mismatch: {v.shape} vs {k.shape}")
    nv = float(np.linalg.norm(v))
    nk = float(np.linalg.norm(k))
    if nv == 0.0 or nk == 0.0:
        raise ValueError("degenerate embedding: zero norm")
    return float(np.dot(v, k) / (nv * nk))


def retrieve_top_k(v, repo: list[KnowledgeEntry], k: int) -> RetrievalResult:
    """The k highest-scoring entries, score order, ties by repository index."""
    if not repo:
        raise ValueError("empty knowledge repository")
    if k < 1:
        raise ValueError("k must be >= 1")
    scored = []
    for index, entry in enumerate(repo):
        if entry.label_embedding is None:
            raise ValueError(f"entry {entry.label!r} has no label embedding")
        scored.append((entry, cosine_similarity(v, entry.label_embedding), index))
    # Stable sort on descending score keeps repository order among ties.
    scored.sort(key=lambda item: (-item[1], item[2]))
    top = tuple((entry, score) for entry, score, _ in scored[: min(k, len(repo))])
    return RetrievalResult(ranked=top, k=k)


def format_options(options) -> str:
    lines = []
    for index, text in enumerate(options):
        if index >= len(OPTION_LETTERS):
            raise ValueError("too many options to letter")
        lines.append(f"{OPTION_LETTERS[index]}. {text}")
    return "\n".join(lines)


def assemble_prompt(instance: QueryInstance, retrieved: RetrievalResult,
                    setting: str = ONE_SHOT) -> str:
    """Render the inspection prompt with retrieved knowledge in rank order."""
    knowledge_lines = []
    for entry, _ in retrieved.ranked:
        knowledge_lines.append(f"Category: {entry.label}\n{entry.description}")
    knowledge_block = "\n".join(knowledge_lines)

    if setting == ONE_SHOT:
        image_block = (
            f"Reference image (normal): {instance.reference_image}\n"
            f"Query image: {instance.query_image}"
        )
    else:
        image_block = f"Query image: {instance.query_image}"

    return (
        f"{PROMPT_PREAMBLE}\n"
        f"{knowledge_block}\n"
        f"{image_block}\n"
        f"Question: {instance.question}\n"
        f"{format_options(instance.options)}\n"
        f"Answer with the option letter."
    )
