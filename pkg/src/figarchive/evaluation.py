"""Zero-shot evaluation over user-supplied embeddings: closed-VQA style
classification by cosine argmax, image/text retrieval recall, nonparametric
bootstrap confidence intervals, and convex parameter interpolation.

Encoders are out of scope; embeddings arrive as matrices (or the persisted
binary format from :mod:`figarchive.embedding`).  Cosine ties break toward
the lowest index.  Task specs and the variant-averaging convention are
documented in docs/evaluation.md.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .embedding import EmbeddingMatrix
from .errors import ValidationError


@dataclass
class ClosedVqaItem:
    image_embedding: np.ndarray
    answer_texts: list[str]
    answer_embeddings: np.ndarray  # (M, d) aligned with answer_texts
    correct_index: int
    permutation_seed: int = 0

    def __post_init__(self) -> None:
        self.image_embedding = np.asarray(self.image_embedding, dtype=np.float64)
        self.answer_embeddings = np.asarray(self.answer_embeddings, dtype=np.float64)
        m = len(self.answer_texts)
        if m < 2:
            raise ValidationError("need at least 2 answer candidates")
        if self.answer_embeddings.shape[0] != m:
            raise ValidationError("answer_embeddings misaligned with answer_texts")
        if not 0 <= self.correct_index < m:
            raise ValidationError("correct_index out of range")
        if not (np.isfinite(self.image_embedding).all() and np.isfinite(self.answer_embeddings).all()):
            raise ValidationError("embeddings must be finite")


@dataclass
class RetrievalSet:
    image_embeddings: np.ndarray  # (N, d)
    caption_embeddings: np.ndarray  # (N, d), row i is image i's mate

    def __post_init__(self) -> None:
        self.image_embeddings = np.asarray(self.image_embeddings, dtype=np.float64)
        self.caption_embeddings = np.asarray(self.caption_embeddings, dtype=np.float64)
        if self.image_embeddings.shape != self.caption_embeddings.shape:
            raise ValidationError("image/caption embedding counts must match")

    @property
    def n(self) -> int:
        return self.image_embeddings.shape[0]


def _unit_rows(matrix: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=-1, keepdims=True)
    if (norms == 0).any():
        bad = int(np.argwhere(norms.reshape(-1) == 0)[0][0])
        raise ValidationError(f"zero-norm embedding in {what} at index {bad}")
    return matrix / norms


def closed_vqa_accuracy(items: Sequence[ClosedVqaItem]) -> tuple[float, list[int]]:
    """Accuracy of cosine-argmax answer selection, plus per-item predictions.

    Ties break to the lowest candidate index.  Raises on zero-norm
    embeddings, naming the item.
    """
    if not items:
        raise ValidationError("no items to score")
    predictions: list[int] = []
    hits = 0
    for idx, item in enumerate(items):
        try:
            image = _unit_rows(item.image_embedding[None, :], f"item {idx} image")[0]
            answers = _unit_rows(item.answer_embeddings, f"item {idx} answers")
        except ValidationError as exc:
            raise ValidationError(str(exc)) from None
        sims = answers @ image
        pred = int(np.argmax(sims))  # argmax returns the first (lowest) max index
        predictions.append(pred)
        hits += int(pred == item.correct_index)
    return hits / len(items), predictions


def recall_at_k(retrieval: RetrievalSet, direction: str, k: int) -> float:
    """Fraction of queries whose true mate ranks in the top k by cosine.

    ``direction`` is "image_to_text" or "text_to_image".  Ranks use
    descending similarity with ties broken by candidate index; k beyond the
    candidate count is clamped (with the recall then over the full list).
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    if direction == "image_to_text":
        queries, candidates = retrieval.image_embeddings, retrieval.caption_embeddings
    elif direction == "text_to_image":
        queries, candidates = retrieval.caption_embeddings, retrieval.image_embeddings
    else:
        raise ValidationError(f"unknown direction {direction!r}")
    n = retrieval.n
    if n == 0:
        raise ValidationError("empty retrieval set")
    if k > n:
        import warnings

        warnings.warn(f"k={k} exceeds candidate count {n}; using full list")
        k = n
    q = _unit_rows(queries, "queries")
    c = _unit_rows(candidates, "candidates")
    sims = q @ c.T  # (n_queries, n_candidates)
    hits = 0
    for i in range(n):
        # stable rank: sort by (-similarity, index)
        order = np.lexsort((np.arange(n), -sims[i]))
        rank = int(np.where(order == i)[0][0]) + 1
        hits += int(rank <= k)
    return hits / n


def per_query_hits(retrieval: RetrievalSet, direction: str, k: int) -> list[int]:
    """0/1 hit indicators per query (bootstrap input for recall CIs)."""
    if direction == "image_to_text":
        queries, candidates = retrieval.image_embeddings, retrieval.caption_embeddings
    else:
        queries, candidates = retrieval.caption_embeddings, retrieval.image_embeddings
    n = retrieval.n
    k = min(k, n)
    q = _unit_rows(queries, "queries")
    c = _unit_rows(candidates, "candidates")
    sims = q @ c.T
    hits = []
    for i in range(n):
        order = np.lexsort((np.arange(n), -sims[i]))
        rank = int(np.where(order == i)[0][0]) + 1
        hits.append(int(rank <= k))
    return hits


def bootstrap_ci(
    per_item_scores: Sequence[float],
    resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean; deterministic given seed."""
    if len(per_item_scores) == 0:
        raise ValidationError("scores must be non-empty")
    if not 0 < level < 1:
        raise ValidationError("level must be in (0, 1)")
    scores = np.asarray(per_item_scores, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = scores.shape[0]
    idx = rng.integers(0, n, size=(resamples, n))
    means = scores[idx].mean(axis=1)
    lo = (1 - level) / 2 * 100
    hi = (1 + level) / 2 * 100
    low, high = np.percentile(means, [lo, hi])
    return float(low), float(high)


def wise_ft_merge(
    base_params: Mapping[str, np.ndarray],
    adapted_params: Mapping[str, np.ndarray],
    alpha: float,
) -> dict[str, np.ndarray]:
    """Elementwise convex combination ``(1 - alpha) * base + alpha * adapted``."""
    if not 0 <= alpha <= 1:
        raise ValidationError("alpha must be in [0, 1]")
    base_names = set(base_params)
    adapted_names = set(adapted_params)
    if base_names != adapted_names:
        missing = sorted(base_names.symmetric_difference(adapted_names))
        raise ValidationError(f"parameter name mismatch: {missing[0]!r}")
    merged: dict[str, np.ndarray] = {}
    for name in base_params:
        b = np.asarray(base_params[name], dtype=np.float64)
        a = np.asarray(adapted_params[name], dtype=np.float64)
        if b.shape != a.shape:
            raise ValidationError(f"shape mismatch for parameter {name!r}: {b.shape} vs {a.shape}")
        merged[name] = (1.0 - alpha) * b + alpha * a
    return merged


def shuffle_answers(items: Sequence[ClosedVqaItem], seed: int) -> list[ClosedVqaItem]:
    """Deterministically permute each item's candidates, tracking the correct
    index through the permutation."""
    out: list[ClosedVqaItem] = []
    for i, item in enumerate(items):
        entropy = np.random.SeedSequence([seed, i]).generate_state(1)[0]
        rng = np.random.default_rng(int(entropy))
        m = len(item.answer_texts)
        perm = rng.permutation(m)
        out.append(
            ClosedVqaItem(
                image_embedding=item.image_embedding.copy(),
                answer_texts=[item.answer_texts[j] for j in perm],
                answer_embeddings=item.answer_embeddings[perm].copy(),
                correct_index=int(np.where(perm == item.correct_index)[0][0]),
                permutation_seed=int(entropy),
            )
        )
    return out


@dataclass
class TaskClass:
    label: str
    captions: list[str]  # caption variants, usually two


@dataclass
class TaskSpec:
    task_name: str
    classes: list[TaskClass]
    items: list[dict]  # {"image_key", "class"}

    @staticmethod
    def load(path: str | Path) -> "TaskSpec":
        data = json.loads(Path(path).read_text())
        classes = [TaskClass(label=c["label"], captions=list(c["captions"])) for c in data["classes"]]
        labels = {c.label for c in classes}
        for item in data["items"]:
            if item["class"] not in labels:
                raise ValidationError(f"item {item['image_key']!r} names unknown class {item['class']!r}")
        return TaskSpec(task_name=data["task_name"], classes=classes, items=list(data["items"]))

    @property
    def n_variants(self) -> int:
        return min(len(c.captions) for c in self.classes)


def evaluate_classification(
    task: TaskSpec,
    image_embeddings: EmbeddingMatrix,
    text_embeddings: EmbeddingMatrix,
    shuffle_seed: int = 0,
    bootstrap_resamples: int = 1000,
    bootstrap_seed: int = 0,
) -> dict:
    """Closed-VQA evaluation of one task spec.

    Text embeddings are keyed by exact caption string.  Each caption variant
    is evaluated as a full run; the reported accuracy is the mean over
    variants, with a bootstrap CI over per-item mean scores.
    """
    label_to_idx = {c.label: i for i, c in enumerate(task.classes)}
    per_variant_acc: list[float] = []
    per_item_scores = np.zeros(len(task.items), dtype=np.float64)
    for variant in range(task.n_variants):
        captions = [c.captions[variant] for c in task.classes]
        answer_embeddings = np.vstack([text_embeddings.row(c) for c in captions])
        items = [
            ClosedVqaItem(
                image_embedding=image_embeddings.row(item["image_key"]),
                answer_texts=list(captions),
                answer_embeddings=answer_embeddings,
                correct_index=label_to_idx[item["class"]],
            )
            for item in task.items
        ]
        items = shuffle_answers(items, seed=shuffle_seed + variant)
        accuracy, predictions = closed_vqa_accuracy(items)
        per_variant_acc.append(accuracy)
        per_item_scores += np.asarray(
            [float(p == it.correct_index) for p, it in zip(predictions, items)]
        )
    per_item_scores /= task.n_variants
    low, high = bootstrap_ci(
        per_item_scores, resamples=bootstrap_resamples, seed=bootstrap_seed
    )
    return {
        "task_name": task.task_name,
        "accuracy": float(np.mean(per_variant_acc)),
        "per_variant_accuracy": per_variant_acc,
        "ci_low": low,
        "ci_high": high,
        "n_items": len(task.items),
        "n_options": len(task.classes),
    }


def evaluate_retrieval(
    retrieval: RetrievalSet,
    ks: Sequence[int] = (1, 10, 100),
    bootstrap_resamples: int = 1000,
    bootstrap_seed: int = 0,
) -> dict:
    """Recall@k in both directions with bootstrap CIs."""
    report: dict = {"n_pairs": retrieval.n, "recall": {}}
    for direction in ("image_to_text", "text_to_image"):
        report["recall"][direction] = {}
        for k in ks:
            hits = per_query_hits(retrieval, direction, k)
            low, high = bootstrap_ci(hits, resamples=bootstrap_resamples, seed=bootstrap_seed)
            report["recall"][direction][f"recall@{k}"] = {
                "value": float(np.mean(hits)),
                "ci_low": low,
                "ci_high": high,
            }
    return report
