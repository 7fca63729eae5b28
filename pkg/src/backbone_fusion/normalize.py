"""Embedding normalization regimes applied before scoring.

Four regimes are supported: no normalization, unit-norm rows, half-mean
subtraction (distribution normalization), and their combination.  The
half-mean variant scores a pair as

    (text - mu_y / 2) . (image - mu_x / 2)

where mu_x is the mean of a seeded random subset of image embeddings and
mu_y the mean over all class text embeddings.  Subtracting the half-means
from the rows up front reduces that score to a plain inner product.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .embedstore import BackboneRecord


class NormalizationMode(Enum):
    UN = "un"
    L2 = "l2"
    DN = "dn"
    DN_L2 = "dn+l2"

    @property
    def uses_dn(self) -> bool:
        return self in (NormalizationMode.DN, NormalizationMode.DN_L2)

    @classmethod
    def from_flag(cls, flag: str) -> "NormalizationMode":
        for mode in cls:
            if mode.value == flag:
                return mode
        raise ValueError(f"unknown normalization mode {flag!r}")


@dataclass
class NormalizationStats:
    """Half-mean statistics for one backbone."""

    mu_x: np.ndarray  # (D,) mean of the image-embedding subset
    mu_y: np.ndarray  # (D,) mean over all class text embeddings
    subset_size: int  # actual subset size used (after clamping)
    seed: int


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize a zero vector")
    return v / norms


def compute_dn_stats(
    image_embeddings: np.ndarray,
    text_embeddings: np.ndarray,
    subset_size: int,
    seed: int,
    pre_l2: bool = False,
    candidate_indices: np.ndarray | None = None,
) -> NormalizationStats:
    """Estimate the half-mean statistics from a seeded random image subset.

    ``candidate_indices`` restricts which image rows may enter the subset
    (typically the evaluation split; labels are never consulted).  A
    ``subset_size`` larger than the candidate pool is clamped, and the actual
    size used is recorded in the result.
    """
    if subset_size < 1:
        raise ValueError(f"subset_size must be >= 1, got {subset_size}")
    images = np.asarray(image_embeddings, dtype=np.float64)
    texts = np.asarray(text_embeddings, dtype=np.float64)
    if pre_l2:
        images = l2_normalize(images)
        texts = l2_normalize(texts)
    if candidate_indices is None:
        candidates = np.arange(images.shape[0])
    else:
        candidates = np.asarray(candidate_indices, dtype=np.int64)
    actual = min(subset_size, len(candidates))
    if actual < len(candidates):
        rng = np.random.Generator(np.random.Philox(key=seed))
        subset = rng.choice(candidates, size=actual, replace=False)
    else:
        subset = candidates
    return NormalizationStats(
        mu_x=images[subset].mean(axis=0),
        mu_y=texts.mean(axis=0),
        subset_size=actual,
        seed=seed,
    )


def dn_score(image_emb: np.ndarray, text_emb: np.ndarray, stats: NormalizationStats) -> float:
    """Half-mean-subtracted inner product of one image/text pair."""
    image_emb = np.asarray(image_emb, dtype=np.float64)
    text_emb = np.asarray(text_emb, dtype=np.float64)
    if image_emb.shape != stats.mu_x.shape or text_emb.shape != stats.mu_y.shape:
        raise ValueError("embedding dimensions do not match the normalization stats")
    return float((text_emb - stats.mu_y / 2.0) @ (image_emb - stats.mu_x / 2.0))


def apply_mode(
    record: BackboneRecord,
    mode: NormalizationMode,
    stats: NormalizationStats | None = None,
    dn_order: str = "l2-first",
) -> BackboneRecord:
    """Return a transformed copy of a backbone record for the given regime.

    For the combined regime, ``dn_order`` selects whether rows are unit-
    normalized before the half-mean subtraction (``l2-first``, the default;
    ``stats`` must then have been computed with ``pre_l2``) or after
    (``dn-first``).
    """
    if mode.uses_dn and stats is None:
        raise ValueError(f"mode {mode.value} requires normalization stats")
    if dn_order not in ("l2-first", "dn-first"):
        raise ValueError(f"unknown dn_order {dn_order!r}")

    images = np.asarray(record.image_embeddings, dtype=np.float64)
    texts = np.asarray(record.text_embeddings, dtype=np.float64)

    if mode is NormalizationMode.L2:
        images, texts = l2_normalize(images), l2_normalize(texts)
    elif mode is NormalizationMode.DN:
        images, texts = images - stats.mu_x / 2.0, texts - stats.mu_y / 2.0
    elif mode is NormalizationMode.DN_L2:
        if dn_order == "l2-first":
            images, texts = l2_normalize(images), l2_normalize(texts)
            images, texts = images - stats.mu_x / 2.0, texts - stats.mu_y / 2.0
        else:
            images, texts = images - stats.mu_x / 2.0, texts - stats.mu_y / 2.0
            images, texts = l2_normalize(images), l2_normalize(texts)

    return BackboneRecord(name=record.name, image_embeddings=images, text_embeddings=texts)


def prepare_record(
    record: BackboneRecord,
    mode: NormalizationMode,
    dn_subset: int = 100,
    dn_seed: int = 7,
    dn_order: str = "l2-first",
    candidate_indices: np.ndarray | None = None,
) -> BackboneRecord:
    """Compute stats if the regime needs them, then apply it."""
    stats = None
    if mode.uses_dn:
        stats = compute_dn_stats(
            record.image_embeddings,
            record.text_embeddings,
            subset_size=dn_subset,
            seed=dn_seed,
            pre_l2=(mode is NormalizationMode.DN_L2 and dn_order == "l2-first"),
            candidate_indices=candidate_indices,
        )
    return apply_mode(record, mode, stats, dn_order)
