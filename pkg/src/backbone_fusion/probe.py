"""Linear probes over frozen unit-normalized embeddings.

A probe is a plain linear classifier whose weight rows start as the
backbone's unit-normalized class text embeddings ("language" initialization)
with zero bias, so the untrained probe reproduces the unit-norm zero-shot
pipeline exactly.  Training minimizes cross-entropy with Adam on the
designated 90% train split; the held-out 10% is reserved for fusion fitting
and must never reach the trainer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .combine import TrainConfig
from .embedstore import BackboneRecord
from .errors import NumericalError, StoreValidationError
from .normalize import NormalizationMode, l2_normalize
from .zeroshot import LogitMatrix, softmax


@dataclass
class LinearProbe:
    weight: np.ndarray  # (C, D)
    bias: np.ndarray    # (C,)
    backbone_name: str


def init_from_language_weights(record: BackboneRecord) -> LinearProbe:
    """Weight rows = unit-normalized text embeddings, bias = 0."""
    return LinearProbe(
        weight=l2_normalize(record.text_embeddings),
        bias=np.zeros(record.text_embeddings.shape[0]),
        backbone_name=record.name,
    )


def probe_logits(
    probe: LinearProbe, record: BackboneRecord, split: np.ndarray | None = None
) -> LogitMatrix:
    """W @ unit-normalized image rows + bias, over ``split`` (default: all)."""
    images = l2_normalize(record.image_embeddings)
    if split is not None:
        images = images[np.asarray(split, dtype=np.int64)]
    if images.shape[1] != probe.weight.shape[1]:
        raise ValueError(
            f"{probe.backbone_name}: image dim {images.shape[1]} != probe dim {probe.weight.shape[1]}"
        )
    values = images @ probe.weight.T + probe.bias
    return LogitMatrix(values=values, backbone_name=probe.backbone_name, mode=NormalizationMode.L2)


def probe_forward_backward(
    w: np.ndarray, b: np.ndarray, xb: np.ndarray, yb: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Batch-mean cross-entropy of the linear classifier plus analytic gradients."""
    m = len(yb)
    probs = softmax(xb @ w.T + b)
    loss = float(-np.log(probs[np.arange(m), yb]).mean())
    grad = probs.copy()
    grad[np.arange(m), yb] -= 1.0
    grad /= m
    return loss, grad.T @ xb, grad.sum(axis=0)


def train_probe(
    probe: LinearProbe,
    record: BackboneRecord,
    labels: np.ndarray,
    train_split: np.ndarray,
    cfg: TrainConfig | None = None,
    reserved: np.ndarray | None = None,
) -> tuple[LinearProbe, dict]:
    """Cross-entropy training with Adam; returns the probe and diagnostics.

    ``reserved`` indices (holdout/test) are asserted disjoint from the train
    split before any optimization happens.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    train_split = np.asarray(train_split, dtype=np.int64)
    if train_split.size == 0:
        raise ValueError("train split is empty")
    if reserved is not None:
        overlap = np.intersect1d(train_split, np.asarray(reserved, dtype=np.int64))
        if overlap.size:
            raise ValueError(f"train split leaks {overlap.size} reserved indices")

    images = l2_normalize(record.image_embeddings)
    y = np.asarray(labels, dtype=np.int64)
    w = probe.weight.astype(np.float64).copy()
    b = probe.bias.astype(np.float64).copy()
    beta1, beta2 = cfg.adam_betas
    m_w = np.zeros_like(w)
    v_w = np.zeros_like(w)
    m_b = np.zeros_like(b)
    v_b = np.zeros_like(b)
    step = 0
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    loss_per_epoch = []

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_split))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = train_split[order[start : start + cfg.batch_size]]
            loss, grad_w, grad_b = probe_forward_backward(w, b, images[idx], y[idx])
            if not np.isfinite(loss):
                raise NumericalError(
                    f"{probe.backbone_name}: non-finite loss at epoch {epoch}"
                )
            epoch_loss += loss * len(idx)
            step += 1
            for param, g, m1, v1 in ((w, grad_w, m_w, v_w), (b, grad_b, m_b, v_b)):
                m1 *= beta1
                m1 += (1.0 - beta1) * g
                v1 *= beta2
                v1 += (1.0 - beta2) * g * g
                param -= cfg.learning_rate * (m1 / (1.0 - beta1**step)) / (
                    np.sqrt(v1 / (1.0 - beta2**step)) + cfg.adam_eps
                )
        loss_per_epoch.append(epoch_loss / len(train_split))

    trained = LinearProbe(weight=w, bias=b, backbone_name=probe.backbone_name)
    final_logits = images[train_split] @ w.T + b
    diagnostics = {
        "final_train_accuracy": float((final_logits.argmax(axis=1) == y[train_split]).mean()),
        "loss_per_epoch": loss_per_epoch,
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
    }
    return trained, diagnostics


def save_probe(probe: LinearProbe, directory: str | Path) -> Path:
    """Write <name>.probe.f32le (weight rows then bias) plus a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    c, d = probe.weight.shape
    blob = directory / f"{probe.backbone_name}.probe.f32le"
    payload = np.concatenate(
        [probe.weight.reshape(-1), probe.bias]
    ).astype("<f4")
    blob.write_bytes(payload.tobytes())
    sidecar = directory / f"{probe.backbone_name}.probe.json"
    sidecar.write_text(
        json.dumps(
            {"backbone": probe.backbone_name, "num_classes": c, "dim": d},
            sort_keys=True,
        )
        + "\n",
        "utf-8",
    )
    return blob


def load_probe(directory: str | Path, backbone_name: str) -> LinearProbe:
    directory = Path(directory)
    sidecar = directory / f"{backbone_name}.probe.json"
    blob = directory / f"{backbone_name}.probe.f32le"
    try:
        meta = json.loads(sidecar.read_text("utf-8"))
        raw = blob.read_bytes()
    except FileNotFoundError as exc:
        raise StoreValidationError(f"missing probe file: {exc.filename}") from exc
    c, d = meta["num_classes"], meta["dim"]
    expected = (c * d + c) * 4
    if len(raw) != expected:
        raise StoreValidationError(f"{blob}: {len(raw)} bytes, expected {expected}")
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return LinearProbe(
        weight=flat[: c * d].reshape(c, d), bias=flat[c * d :], backbone_name=backbone_name
    )
