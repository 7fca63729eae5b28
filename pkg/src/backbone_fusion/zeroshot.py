"""Per-backbone scoring: logit matrices, probabilities, predictions, accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedstore import BackboneRecord
from .errors import NumericalError
from .normalize import NormalizationMode


@dataclass
class LogitMatrix:
    """(N, C) inner-product scores for one backbone, accumulated in float64."""

    values: np.ndarray
    backbone_name: str
    mode: NormalizationMode


@dataclass
class PredictionVector:
    """Argmax class per row plus the softmax probability of that class."""

    preds: np.ndarray       # (N,) int64
    confidence: np.ndarray  # (N,) float64 in (0, 1]


def compute_logits(record: BackboneRecord, mode: NormalizationMode) -> LogitMatrix:
    """Score every image row against every text row: entry (i, c) = image_i . text_c."""
    images = np.asarray(record.image_embeddings, dtype=np.float64)
    texts = np.asarray(record.text_embeddings, dtype=np.float64)
    if images.shape[1] != texts.shape[1]:
        raise ValueError(
            f"{record.name}: image dim {images.shape[1]} != text dim {texts.shape[1]}"
        )
    values = images @ texts.T
    if not np.isfinite(values).all():
        raise NumericalError(f"{record.name}: non-finite logits")
    return LogitMatrix(values=values, backbone_name=record.name, mode=mode)


def softmax(x: np.ndarray) -> np.ndarray:
    """Max-subtracted exponential normalization over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def probabilities(logits: LogitMatrix) -> np.ndarray:
    """Row-wise softmax of a logit matrix."""
    return softmax(logits.values)


def predict(logits: LogitMatrix) -> PredictionVector:
    """Lowest-index argmax per row; confidence is the softmax value there."""
    values = logits.values
    preds = values.argmax(axis=1)
    probs = softmax(values)
    confidence = probs[np.arange(len(preds)), preds]
    return PredictionVector(preds=preds.astype(np.int64), confidence=confidence)


def accuracy(preds: PredictionVector, labels: np.ndarray, split: np.ndarray) -> float:
    """Fraction of split indices where the prediction matches the label."""
    split = np.asarray(split, dtype=np.int64)
    if split.size == 0:
        raise ValueError("split is empty")
    labels = np.asarray(labels, dtype=np.int64)
    return float((preds.preds[split] == labels[split]).mean())


def entropy(prob: np.ndarray) -> np.ndarray | float:
    """Shannon entropy in nats over the last axis, with 0 * log(0) := 0."""
    p = np.asarray(prob, dtype=np.float64)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    return float(h) if h.ndim == 0 else h
