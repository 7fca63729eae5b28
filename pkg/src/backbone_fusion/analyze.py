"""Agreement analysis and reporting: oracle accuracy, exact-subset partition
of correct predictions, delta aggregation, and deterministic serialization."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .zeroshot import PredictionVector

MAX_PARTITION_BACKBONES = 16


@dataclass
class CorrectnessMatrix:
    """Boolean (B, n) matrix: entry (b, i) means backbone b is right on sample i."""

    correct: np.ndarray
    backbone_names: list[str]


@dataclass
class VennPartition:
    """Sample counts per exact subset of backbones that got them right."""

    counts: dict[tuple[str, ...], int]
    none_correct: int
    total: int


@dataclass
class Report:
    method: str
    normalization: str
    per_backbone_accuracy: dict[str, float]
    fused_accuracy: float
    best_single: float
    delta: float
    config: dict = field(default_factory=dict)
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "normalization": self.normalization,
            "per_backbone_accuracy": dict(sorted(self.per_backbone_accuracy.items())),
            "fused_accuracy": self.fused_accuracy,
            "best_single": self.best_single,
            "delta": self.delta,
            "config": self.config,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        return cls(
            method=d["method"],
            normalization=d["normalization"],
            per_backbone_accuracy=d["per_backbone_accuracy"],
            fused_accuracy=d["fused_accuracy"],
            best_single=d["best_single"],
            delta=d["delta"],
            config=d.get("config", {}),
            seed=d.get("seed"),
        )


def correctness(
    preds: list[PredictionVector],
    labels: np.ndarray,
    split: np.ndarray,
    backbone_names: list[str] | None = None,
) -> CorrectnessMatrix:
    """Per-backbone correctness over the split, in split order."""
    split = np.asarray(split, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    rows = [p.preds[split] == labels[split] for p in preds]
    names = backbone_names or [f"backbone_{i}" for i in range(len(preds))]
    if len(names) != len(preds):
        raise ValueError("one name per prediction vector required")
    return CorrectnessMatrix(correct=np.stack(rows), backbone_names=list(names))


def oracle_accuracy(cm: CorrectnessMatrix) -> float:
    """Fraction of samples at least one backbone predicts correctly."""
    return float(cm.correct.any(axis=0).mean())


def venn_partition(cm: CorrectnessMatrix) -> VennPartition:
    """Assign each sample to the exact subset of backbones correct on it."""
    n_backbones, n = cm.correct.shape
    if n_backbones > MAX_PARTITION_BACKBONES:
        raise ValueError(
            f"partitioning enumerates 2^B subsets; B={n_backbones} exceeds "
            f"{MAX_PARTITION_BACKBONES}"
        )
    masks = np.zeros(n, dtype=np.int64)
    for b in range(n_backbones):
        masks |= cm.correct[b].astype(np.int64) << b
    tallies = np.bincount(masks, minlength=2**n_backbones)
    counts: dict[tuple[str, ...], int] = {}
    for mask in range(1, 2**n_backbones):
        if tallies[mask] == 0:
            continue
        subset = tuple(
            sorted(cm.backbone_names[b] for b in range(n_backbones) if mask >> b & 1)
        )
        counts[subset] = int(tallies[mask])
    return VennPartition(counts=counts, none_correct=int(tallies[0]), total=n)


def delta_table(reports: list[Report]) -> dict:
    """Mean/max/min of the fused-minus-best deltas across reports."""
    if not reports:
        raise ValueError("no reports given")
    deltas = np.array([r.delta for r in reports], dtype=np.float64)
    return {
        "mean_delta": float(deltas.mean()),
        "max_delta": float(deltas.max()),
        "min_delta": float(deltas.min()),
        "num_reports": len(reports),
    }


def _venn_to_dict(venn: VennPartition) -> dict:
    return {
        "counts": {",".join(subset): count for subset, count in sorted(venn.counts.items())},
        "none_correct": venn.none_correct,
        "total": venn.total,
    }


def emit_report(obj: Report | VennPartition | dict, fmt: str, path: str | Path) -> None:
    """Serialize deterministically: sorted keys, stable column order, fixed newlines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(obj, Report):
        data = obj.to_dict()
    elif isinstance(obj, VennPartition):
        data = _venn_to_dict(obj)
    else:
        data = obj

    if fmt == "json":
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", "utf-8")
    elif fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if isinstance(obj, VennPartition):
                writer.writerow(["subset", "count"])
                for subset, count in sorted(obj.counts.items()):
                    writer.writerow(["+".join(subset), count])
                writer.writerow(["none", obj.none_correct])
            else:
                keys = _flatten(data)
                writer.writerow([k for k, _ in keys])
                writer.writerow([v for _, v in keys])
    else:
        raise ValueError(f"unknown format {fmt!r}")


def _flatten(data: dict, prefix: str = "") -> list[tuple[str, object]]:
    items: list[tuple[str, object]] = []
    for key in sorted(data):
        value = data[key]
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            items.extend(_flatten(value, prefix=f"{name}."))
        else:
            items.append((name, value))
    return items
