"""kNN / retrieval scoring, ranking metrics and entropy-weighted head fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    DimMismatch,
    EmptyTrain,
    IndexOutOfRange,
    KTooLarge,
    LengthMismatch,
    ShapeMismatch,
    ValidationError,
    as_embedding,
)


@dataclass(frozen=True)
class EnsembleConfig:
    temperature: float = 1.0
    sharpening: float = 1.0

    def __post_init__(self):
        if not (self.temperature > 0 and self.sharpening > 0):
            raise ValidationError("temperature and sharpening must be positive")


@dataclass(frozen=True)
class KnnConfig:
    k: int = 20
    vote_temperature: float = 0.07

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if not self.vote_temperature > 0:
            raise ValidationError("vote_temperature must be positive")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def cosine_similarity(a, b) -> np.ndarray:
    a = as_embedding(a, "queries")
    b = as_embedding(b, "gallery")
    if a.shape[1] != b.shape[1]:
        raise DimMismatch(f"dims differ: {a.shape[1]} vs {b.shape[1]}")
    return _unit_rows(a) @ _unit_rows(b).T


def retrieval_scores(queries, gallery) -> np.ndarray:
    return cosine_similarity(queries, gallery)


def knn_posteriors(train, labels: Sequence[int], query, cfg: KnnConfig = KnnConfig(),
                   num_classes: int | None = None) -> np.ndarray:
    """Class posteriors from similarity-weighted votes of the k nearest train points.

    Neighbors are ranked by cosine similarity (ties to the lower train
    index) and vote with weight ``exp(sim / vote_temperature)``; each row is
    normalized to sum to 1. Columns are class ids ``0..num_classes-1``.
    """
    train = as_embedding(train, "train")
    labels = np.asarray(labels, dtype=np.int64)
    if train.shape[0] == 0:
        raise EmptyTrain("train set is empty")
    if labels.shape != (train.shape[0],):
        raise LengthMismatch(f"{labels.size} labels for {train.shape[0]} train rows")
    if labels.min() < 0:
        raise ValidationError("labels must be non-negative class ids")
    if cfg.k > train.shape[0]:
        raise KTooLarge(f"k={cfg.k} exceeds the {train.shape[0]} train points")
    n_cls = int(labels.max()) + 1 if num_classes is None else num_classes
    if labels.max() >= n_cls:
        raise ValidationError("label exceeds num_classes")
    sims = cosine_similarity(query, train)
    nbrs = np.argsort(-sims, axis=1, kind="stable")[:, :cfg.k]
    top = np.take_along_axis(sims, nbrs, axis=1)
    # Shift by the row max before exponentiating; the normalization cancels it.
    w = np.exp((top - top[:, :1]) / cfg.vote_temperature)
    out = np.zeros((sims.shape[0], n_cls), dtype=np.float64)
    rows = np.repeat(np.arange(sims.shape[0]), cfg.k)
    np.add.at(out, (rows, labels[nbrs].ravel()), w.ravel())
    return out / out.sum(axis=1, keepdims=True)


def _stack_heads(head_scores) -> np.ndarray:
    heads = [np.atleast_2d(np.asarray(h, dtype=np.float64)) for h in head_scores]
    if not heads:
        raise ValidationError("at least one head is required")
    if any(h.shape != heads[0].shape for h in heads):
        raise ShapeMismatch(f"head score shapes differ: {[h.shape for h in heads]}")
    return np.stack(heads)


def prediction_entropy(scores, temperature: float = 1.0) -> np.ndarray:
    """Entropy of ``softmax(scores / temperature)`` per row."""
    z = np.atleast_2d(np.asarray(scores, dtype=np.float64)) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    logq = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -(np.exp(logq) * logq).sum(axis=-1)


def entropy_weights(head_scores, cfg: EnsembleConfig = EnsembleConfig()) -> np.ndarray:
    """Per-query head weights ``alpha ∝ exp(-sharpening * entropy)``; shape (queries, heads)."""
    heads = _stack_heads(head_scores)
    ent = np.stack([prediction_entropy(h, cfg.temperature) for h in heads], axis=1)
    logits = -cfg.sharpening * ent
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def ensemble_scores(head_scores, weights) -> np.ndarray:
    heads = _stack_heads(head_scores)
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if w.shape == (1, heads.shape[0]):
        w = np.repeat(w, heads.shape[1], axis=0)
    if w.shape != (heads.shape[1], heads.shape[0]):
        raise ShapeMismatch(f"weights shape {w.shape}, expected {(heads.shape[1], heads.shape[0])}")
    return np.einsum("qt,tqc->qc", w, heads)


def zscore_heads(head_scores) -> list[np.ndarray]:
    """Standardize each head's score row to zero mean and unit variance.

    Optional pre-fusion step for heads whose similarity scales differ.
    """
    out = []
    for h in _stack_heads(head_scores):
        sd = h.std(axis=1, keepdims=True)
        out.append((h - h.mean(axis=1, keepdims=True)) / np.where(sd > 0, sd, 1.0))
    return out


def top1_accuracy(scores, truth: Sequence[int]) -> float:
    s = np.atleast_2d(np.asarray(scores))
    truth = np.asarray(truth)
    if truth.shape != (s.shape[0],):
        raise LengthMismatch(f"{truth.size} labels for {s.shape[0]} queries")
    if s.shape[0] == 0:
        return 0.0
    return float(np.mean(np.argmax(s, axis=1) == truth))


def recall_at_1(scores, truth_index: Sequence[int]) -> float:
    s = np.atleast_2d(np.asarray(scores))
    truth = np.asarray(truth_index)
    if truth.shape != (s.shape[0],):
        raise LengthMismatch(f"{truth.size} targets for {s.shape[0]} queries")
    if truth.size and (truth.min() < 0 or truth.max() >= s.shape[1]):
        raise IndexOutOfRange("retrieval target index outside the gallery")
    return top1_accuracy(s, truth)
