"""Evaluation protocols: prompt-based zero-shot classification, UAR/WAR
metrics, video-level pooling, cross-modal retrieval, and few-shot linear
probing on frozen embeddings.

Everything here is pure and deterministic; ranking ties always break toward
the lower index so reports are reproducible bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .caption_schema import tokenize
from .encoders import TextEncoderParams, encode_text
from .numerics import ShapeMismatch

DEFAULT_PROMPT_TEMPLATE = "a photo of a face with an expression of {CLASS}."

_PLACEHOLDER = "{CLASS}"


class EmptyVideo(ValueError):
    """A video needs at least one frame embedding."""


class LengthMismatch(ValueError):
    """Predictions and labels differ in length."""


class InsufficientShots(ValueError):
    """A class has fewer training examples than the requested shot count."""


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    return rows / np.maximum(norms, 1e-12)


@dataclass
class ClassPromptSet:
    """Encoded class prompts: one unit-norm embedding row per class."""

    class_names: tuple[str, ...]
    template: str
    embeddings: np.ndarray  # C x D, unit rows

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise ValueError("need at least two classes")
        if self.template.count(_PLACEHOLDER) != 1:
            raise ValueError(f"template must contain exactly one {_PLACEHOLDER} placeholder")
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.class_names):
            raise ValueError("need one embedding row per class")

    @property
    def class_count(self) -> int:
        return len(self.class_names)


def build_prompt_set(
    class_names: Sequence[str],
    text_params: TextEncoderParams,
    template: str = DEFAULT_PROMPT_TEMPLATE,
) -> ClassPromptSet:
    """Encode ``template`` with each class name substituted in."""
    names = tuple(class_names)
    if len(names) < 2:
        raise ValueError("need at least two classes")
    if template.count(_PLACEHOLDER) != 1:
        raise ValueError(f"template must contain exactly one {_PLACEHOLDER} placeholder")
    rows = [
        encode_text(tokenize(template.replace(_PLACEHOLDER, name), text_params.vocab_size), text_params)
        for name in names
    ]
    return ClassPromptSet(names, template, _unit_rows(np.stack(rows)))


def zero_shot_classify(image_embedding: np.ndarray, prompts: ClassPromptSet) -> int:
    """Nearest class prompt by cosine; ties resolve to the lowest index."""
    vec = np.asarray(image_embedding, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != prompts.embeddings.shape[1]:
        raise ValueError(
            f"embedding must be a vector of dim {prompts.embeddings.shape[1]}, got {vec.shape}"
        )
    sims = prompts.embeddings @ vec
    return int(np.argmax(sims))  # argmax returns the first (lowest) maximizer


def video_zero_shot(
    frame_embeddings: Sequence[np.ndarray] | np.ndarray,
    prompts: ClassPromptSet,
    frame_cap: int = 16,
) -> int:
    """Temporal pooling: mean the first ``frame_cap`` frames, re-normalize,
    then classify the pooled embedding."""
    frames = np.asarray(frame_embeddings, dtype=np.float64)
    if frames.ndim == 1:
        frames = frames[None, :]
    if frames.shape[0] == 0:
        raise EmptyVideo("a video needs at least one frame")
    if frame_cap < 1:
        raise ValueError("frame_cap must be positive")
    pooled = frames[:frame_cap].mean(axis=0)
    norm = np.linalg.norm(pooled)
    if norm > 1e-12:
        pooled = pooled / norm
    return zero_shot_classify(pooled, prompts)


@dataclass
class MetricsReport:
    """UAR/WAR plus the underlying per-class counts.

    ``per_class_recall`` is nan for classes with no support; those classes are
    excluded from the UAR mean and listed in ``absent_classes``.
    """

    uar: float
    war: float
    per_class_recall: np.ndarray
    confusion: np.ndarray  # true class x predicted class, counts
    absent_classes: tuple[int, ...] = ()
    recall_at: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "uar": self.uar,
            "war": self.war,
            "per_class_recall": [
                None if np.isnan(r) else float(r) for r in self.per_class_recall
            ],
            "confusion": self.confusion.astype(int).tolist(),
            "absent_classes": list(self.absent_classes),
            "recall_at": self.recall_at,
        }
        return json.dumps(payload, sort_keys=True, indent=2)


def compute_uar_war(
    predictions: Sequence[int], labels: Sequence[int], class_count: int | None = None
) -> MetricsReport:
    """Per-class recalls, their mean (UAR), and plain accuracy (WAR)."""
    preds = np.asarray(predictions, dtype=np.int64)
    truth = np.asarray(labels, dtype=np.int64)
    if preds.shape != truth.shape or preds.ndim != 1:
        raise LengthMismatch(f"got {preds.shape} predictions for {truth.shape} labels")
    if preds.size == 0:
        raise LengthMismatch("need at least one prediction")
    if preds.min() < 0 or truth.min() < 0:
        raise ValueError("class indices must be nonnegative")
    count = int(max(preds.max(), truth.max())) + 1 if class_count is None else class_count
    if count < int(max(preds.max(), truth.max())) + 1:
        raise ValueError("class_count smaller than the largest index present")

    confusion = np.zeros((count, count), dtype=np.int64)
    np.add.at(confusion, (truth, preds), 1)
    support = confusion.sum(axis=1)
    recall = np.full(count, np.nan)
    present = support > 0
    recall[present] = confusion[np.arange(count), np.arange(count)][present] / support[present]
    absent = tuple(int(c) for c in np.flatnonzero(~present))
    return MetricsReport(
        uar=float(np.mean(recall[present])),
        war=float(np.trace(confusion) / preds.size),
        per_class_recall=recall,
        confusion=confusion,
        absent_classes=absent,
    )


def retrieval_eval(
    image_rows: np.ndarray, text_rows: np.ndarray, ks: Sequence[int] = (1, 5, 10)
) -> dict[str, dict[int, float]]:
    """Recall@K in both directions for index-paired embeddings.

    Candidates are ranked by cosine descending with ties broken toward the
    lower index; recall@K is the fraction of queries whose true pair lands in
    the top K.
    """
    images = np.asarray(image_rows, dtype=np.float64)
    texts = np.asarray(text_rows, dtype=np.float64)
    if images.ndim != 2 or images.shape != texts.shape:
        raise ShapeMismatch(
            f"paired rows must share a shape, got {images.shape} vs {texts.shape}"
        )
    if not ks or any(k < 1 for k in ks):
        raise ValueError("ks must be positive")
    images = _unit_rows(images)
    texts = _unit_rows(texts)
    sims = images @ texts.T

    def direction(matrix: np.ndarray) -> dict[int, float]:
        n = matrix.shape[0]
        # stable sort on -sim keeps lower indices first among ties
        order = np.argsort(-matrix, axis=1, kind="stable")
        rank_of_pair = np.argmax(order == np.arange(n)[:, None], axis=1)
        return {int(k): float(np.mean(rank_of_pair < k)) for k in ks}

    return {"image_to_text": direction(sims), "text_to_image": direction(sims.T)}


def _one_hot(labels: np.ndarray, count: int) -> np.ndarray:
    out = np.zeros((labels.size, count))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _fit_logistic(
    features: np.ndarray,
    labels: np.ndarray,
    class_count: int,
    learning_rate: float = 1.0,
    max_iterations: int = 10000,
    tolerance: float = 1e-5,
) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch gradient descent on multinomial cross-entropy."""
    n, d = features.shape
    weights = np.zeros((d, class_count))
    bias = np.zeros(class_count)
    targets = _one_hot(labels, class_count)
    for _ in range(max_iterations):
        logits = features @ weights + bias
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        delta = (probs - targets) / n
        grad_w = features.T @ delta
        grad_b = delta.sum(axis=0)
        norm = np.sqrt((grad_w**2).sum() + (grad_b**2).sum())
        if norm < tolerance:
            break
        weights -= learning_rate * grad_w
        bias -= learning_rate * grad_b
    return weights, bias


def linear_probe(
    train_embeddings: np.ndarray,
    train_labels: Sequence[int],
    test_embeddings: np.ndarray,
    test_labels: Sequence[int],
    shots: int,
    seed: int,
) -> MetricsReport:
    """Few-shot probe: sample ``shots`` per class, fit a linear classifier on
    frozen embeddings, report test metrics. Deterministic per seed."""
    if shots < 1:
        raise InsufficientShots("shots must be >= 1")
    train_x = np.asarray(train_embeddings, dtype=np.float64)
    train_y = np.asarray(train_labels, dtype=np.int64)
    test_x = np.asarray(test_embeddings, dtype=np.float64)
    test_y = np.asarray(test_labels, dtype=np.int64)
    if train_x.shape[0] != train_y.size:
        raise LengthMismatch("train embeddings and labels differ in length")
    if test_x.shape[0] != test_y.size:
        raise LengthMismatch("test embeddings and labels differ in length")

    class_count = int(max(train_y.max(), test_y.max())) + 1
    rng = np.random.default_rng([seed, 31])
    chosen: list[np.ndarray] = []
    for c in range(class_count):
        members = np.flatnonzero(train_y == c)
        if members.size == 0:
            continue
        if members.size < shots:
            raise InsufficientShots(
                f"class {c} has {members.size} examples, needs {shots}"
            )
        picks = rng.choice(members.size, size=shots, replace=False)
        chosen.append(members[np.sort(picks)])
    support = np.concatenate(chosen)
    weights, bias = _fit_logistic(train_x[support], train_y[support], class_count)
    predictions = np.argmax(test_x @ weights + bias, axis=1)
    return compute_uar_war(predictions, test_y, class_count)
