"""Embedding store: data model, bit-exact file format, synthesis and subsampling.

A store is a directory bundling per-backbone image/text embeddings with
labels and named index splits:

    <store>/manifest.json       UTF-8 JSON manifest (see Manifest)
    <store>/labels.u32le        N x uint32, little-endian
    <store>/splits.json         {"train": [...], "probe_holdout": [...], "test": [...]}
    <store>/<name>/image.f32le  N x D float32, little-endian, row-major
    <store>/<name>/text.f32le   C x D float32, little-endian, row-major

All blobs are raw little-endian row-major arrays so that independent
implementations can interoperate byte-for-byte.  Loading validates every
structural invariant and rejects NaN/Inf outright; there is no lenient mode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import StoreValidationError

MANIFEST_VERSION = 1
SPLIT_NAMES = ("train", "probe_holdout", "test")

# Synthetic noise vectors are dimension-normalized: a noise scale of s adds a
# Gaussian vector of expected length ~ NOISE_GAUGE * s regardless of the
# embedding dimension, so the same scale arguments produce comparable
# difficulty at any dimension.  The gauge is calibrated so scales near 1 yield
# mid-range zero-shot accuracy with substantial disagreement across backbones.
NOISE_GAUGE = 2.6


@dataclass
class Manifest:
    """Store-level metadata; the authority for all array shapes."""

    version: int
    dataset_name: str
    num_samples: int
    num_classes: int
    class_names: list[str]
    backbones: list[dict]  # each {"name": str, "dim": int}

    def validate(self) -> None:
        if self.version != MANIFEST_VERSION:
            raise StoreValidationError(
                f"unsupported manifest version {self.version!r} (expected {MANIFEST_VERSION})"
            )
        if not isinstance(self.num_samples, int) or self.num_samples < 1:
            raise StoreValidationError(f"num_samples must be >= 1, got {self.num_samples!r}")
        if not isinstance(self.num_classes, int) or self.num_classes < 2:
            raise StoreValidationError(f"num_classes must be >= 2, got {self.num_classes!r}")
        if len(self.class_names) != self.num_classes:
            raise StoreValidationError(
                f"class_names has {len(self.class_names)} entries, expected {self.num_classes}"
            )
        if not self.backbones:
            raise StoreValidationError("manifest declares no backbones")
        names = [b.get("name") for b in self.backbones]
        if len(set(names)) != len(names):
            raise StoreValidationError(f"duplicate backbone names: {names}")
        for b in self.backbones:
            if not b.get("name"):
                raise StoreValidationError("backbone name must be nonempty")
            dim = b.get("dim")
            if not isinstance(dim, int) or dim < 1:
                raise StoreValidationError(f"backbone {b.get('name')!r} dim must be >= 1, got {dim!r}")

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "dataset_name": self.dataset_name,
            "num_samples": self.num_samples,
            "num_classes": self.num_classes,
            "class_names": list(self.class_names),
            "backbones": [{"name": b["name"], "dim": b["dim"]} for b in self.backbones],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        try:
            return cls(
                version=d["version"],
                dataset_name=d["dataset_name"],
                num_samples=d["num_samples"],
                num_classes=d["num_classes"],
                class_names=list(d["class_names"]),
                backbones=[dict(b) for b in d["backbones"]],
            )
        except (KeyError, TypeError) as exc:
            raise StoreValidationError(f"malformed manifest: {exc}") from exc


@dataclass
class BackboneRecord:
    """One backbone's embeddings: image rows per sample, text rows per class."""

    name: str
    image_embeddings: np.ndarray  # (N, D)
    text_embeddings: np.ndarray   # (C, D)


@dataclass
class SplitSpec:
    """Named, disjoint index sets into the sample axis."""

    train: np.ndarray
    probe_holdout: np.ndarray
    test: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"train": self.train, "probe_holdout": self.probe_holdout, "test": self.test}


@dataclass
class EmbeddingStore:
    """In-memory store; immutable by convention after load/synthesis."""

    manifest: Manifest
    backbones: list[BackboneRecord]
    labels: np.ndarray  # (N,) uint32, entries in [0, C)
    splits: SplitSpec

    def backbone(self, name: str) -> BackboneRecord:
        for rec in self.backbones:
            if rec.name == name:
                return rec
        raise KeyError(f"no backbone named {name!r}")

    @property
    def backbone_names(self) -> list[str]:
        return [rec.name for rec in self.backbones]

    def validate(self) -> None:
        """Check every structural invariant; raise StoreValidationError on the first violation."""
        m = self.manifest
        m.validate()
        n, c = m.num_samples, m.num_classes

        if self.labels.shape != (n,):
            raise StoreValidationError(f"labels shape {self.labels.shape}, expected ({n},)")
        if self.labels.size and int(self.labels.max()) >= c:
            raise StoreValidationError(
                f"label {int(self.labels.max())} out of range for {c} classes"
            )

        if len(self.backbones) != len(m.backbones):
            raise StoreValidationError(
                f"{len(self.backbones)} backbone records, manifest declares {len(m.backbones)}"
            )
        for rec, decl in zip(self.backbones, m.backbones):
            if rec.name != decl["name"]:
                raise StoreValidationError(
                    f"backbone order mismatch: record {rec.name!r} vs manifest {decl['name']!r}"
                )
            d = decl["dim"]
            if rec.image_embeddings.shape != (n, d):
                raise StoreValidationError(
                    f"{rec.name}: image embeddings shape {rec.image_embeddings.shape}, expected ({n}, {d})"
                )
            if rec.text_embeddings.shape != (c, d):
                raise StoreValidationError(
                    f"{rec.name}: text embeddings shape {rec.text_embeddings.shape}, expected ({c}, {d})"
                )
            if not np.isfinite(rec.image_embeddings).all():
                raise StoreValidationError(f"{rec.name}: non-finite image embeddings")
            if not np.isfinite(rec.text_embeddings).all():
                raise StoreValidationError(f"{rec.name}: non-finite text embeddings")

        for split_name, idx in self.splits.as_dict().items():
            if idx.size == 0:
                continue
            if idx.min() < 0 or idx.max() >= n:
                raise StoreValidationError(f"split {split_name!r} has out-of-range indices")
            if len(np.unique(idx)) != len(idx):
                raise StoreValidationError(f"split {split_name!r} contains duplicate indices")
        sets = {name: set(idx.tolist()) for name, idx in self.splits.as_dict().items()}
        for a, b in (("train", "probe_holdout"), ("train", "test"), ("probe_holdout", "test")):
            if sets[a] & sets[b]:
                raise StoreValidationError(f"splits {a!r} and {b!r} overlap")


def _read_exact(path: Path, dtype: np.dtype, shape: tuple[int, ...]) -> np.ndarray:
    expected = int(np.prod(shape)) * dtype.itemsize
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise StoreValidationError(f"missing file: {path}") from exc
    if len(raw) != expected:
        raise StoreValidationError(
            f"{path}: {len(raw)} bytes on disk, manifest implies {expected}"
        )
    return np.frombuffer(raw, dtype=dtype).reshape(shape)


def load_store(path: str | Path) -> EmbeddingStore:
    """Load and fully validate a store directory."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    try:
        manifest = Manifest.from_dict(json.loads(manifest_path.read_text("utf-8")))
    except FileNotFoundError as exc:
        raise StoreValidationError(f"missing file: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise StoreValidationError(f"{manifest_path}: invalid JSON ({exc})") from exc
    manifest.validate()
    n, c = manifest.num_samples, manifest.num_classes

    labels = _read_exact(root / "labels.u32le", np.dtype("<u4"), (n,))

    splits_path = root / "splits.json"
    try:
        raw_splits = json.loads(splits_path.read_text("utf-8"))
    except FileNotFoundError as exc:
        raise StoreValidationError(f"missing file: {splits_path}") from exc
    except json.JSONDecodeError as exc:
        raise StoreValidationError(f"{splits_path}: invalid JSON ({exc})") from exc
    parts = {}
    for name in SPLIT_NAMES:
        if name not in raw_splits:
            raise StoreValidationError(f"splits.json missing {name!r}")
        parts[name] = np.asarray(raw_splits[name], dtype=np.int64)
    splits = SplitSpec(**parts)

    records = []
    for decl in manifest.backbones:
        sub = root / decl["name"]
        records.append(
            BackboneRecord(
                name=decl["name"],
                image_embeddings=_read_exact(sub / "image.f32le", np.dtype("<f4"), (n, decl["dim"])),
                text_embeddings=_read_exact(sub / "text.f32le", np.dtype("<f4"), (c, decl["dim"])),
            )
        )

    store = EmbeddingStore(manifest=manifest, backbones=records, labels=labels, splits=splits)
    store.validate()
    return store


def save_store(store: EmbeddingStore, path: str | Path, overwrite: bool = False) -> None:
    """Write a store directory per the bit-exact layout; refuses non-empty targets."""
    store.validate()
    for rec in store.backbones:
        for arr, kind in ((rec.image_embeddings, "image"), (rec.text_embeddings, "text")):
            if arr.dtype != np.float32:
                raise StoreValidationError(
                    f"{rec.name}: {kind} embeddings must be float32 for storage, got {arr.dtype}"
                )
    root = Path(path)
    if root.exists() and any(root.iterdir()) and not overwrite:
        raise StoreValidationError(f"refusing to write into non-empty directory {root}")
    root.mkdir(parents=True, exist_ok=True)

    (root / "manifest.json").write_text(
        json.dumps(store.manifest.to_dict(), indent=2, sort_keys=True) + "\n", "utf-8"
    )
    (root / "labels.u32le").write_bytes(
        np.ascontiguousarray(store.labels, dtype="<u4").tobytes()
    )
    (root / "splits.json").write_text(
        json.dumps(
            {name: idx.tolist() for name, idx in store.splits.as_dict().items()},
            sort_keys=True,
        )
        + "\n",
        "utf-8",
    )
    for rec in store.backbones:
        sub = root / rec.name
        sub.mkdir(exist_ok=True)
        (sub / "image.f32le").write_bytes(
            np.ascontiguousarray(rec.image_embeddings, dtype="<f4").tobytes()
        )
        (sub / "text.f32le").write_bytes(
            np.ascontiguousarray(rec.text_embeddings, dtype="<f4").tobytes()
        )


def _stratified_splits(
    labels: np.ndarray, rng: np.random.Generator, test_fraction: float, holdout_fraction: float
) -> SplitSpec:
    """Per class: test_fraction to test, then holdout_fraction of the rest to probe_holdout."""
    train_parts, holdout_parts, test_parts = [], [], []
    for cls in range(int(labels.max()) + 1):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        n_test = int(round(len(members) * test_fraction))
        rest = members[n_test:]
        n_hold = int(round(len(rest) * holdout_fraction))
        test_parts.append(members[:n_test])
        holdout_parts.append(rest[:n_hold])
        train_parts.append(rest[n_hold:])
    return SplitSpec(
        train=np.sort(np.concatenate(train_parts)).astype(np.int64),
        probe_holdout=np.sort(np.concatenate(holdout_parts)).astype(np.int64),
        test=np.sort(np.concatenate(test_parts)).astype(np.int64),
    )


def synth_generate(
    seed: int,
    num_backbones: int,
    num_samples: int,
    num_classes: int,
    dim: int,
    per_backbone_noise: list[float],
    shared_noise: float,
    *,
    test_fraction: float = 0.5,
    holdout_fraction: float = 0.1,
    dataset_name: str = "synthetic",
) -> EmbeddingStore:
    """Generate a deterministic synthetic store.

    Each backbone gets its own set of class prototypes (random unit text
    embeddings).  Image embedding i for backbone b is the unit-normalized sum
    of its true-class prototype, a shared per-sample Gaussian noise vector
    (scaled by ``shared_noise``) and a private per-backbone Gaussian noise
    vector (scaled by ``per_backbone_noise[b]``).  The shared component
    controls how correlated the backbones' errors are.  All randomness comes
    from a single Philox counter-based generator keyed by ``seed``, so the
    output is a pure function of the arguments.
    """
    if num_backbones < 1 or num_samples < 1 or num_classes < 2 or dim < 1:
        raise ValueError("num_backbones/num_samples/dim must be >= 1 and num_classes >= 2")
    if len(per_backbone_noise) != num_backbones:
        raise ValueError(
            f"per_backbone_noise has {len(per_backbone_noise)} entries, expected {num_backbones}"
        )
    scales = np.asarray(per_backbone_noise, dtype=np.float64)
    if not np.isfinite(scales).all() or (scales < 0).any():
        raise ValueError("per_backbone_noise entries must be finite and >= 0")
    if not np.isfinite(shared_noise) or shared_noise < 0:
        raise ValueError("shared_noise must be finite and >= 0")

    rng = np.random.Generator(np.random.Philox(key=seed))
    gauge = NOISE_GAUGE / np.sqrt(dim)

    prototypes = []
    for _ in range(num_backbones):
        t = rng.standard_normal((num_classes, dim))
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        prototypes.append(t)

    labels = rng.integers(0, num_classes, size=num_samples)
    shared = rng.standard_normal((num_samples, dim)) * (shared_noise * gauge)

    records = []
    for b in range(num_backbones):
        private = rng.standard_normal((num_samples, dim)) * (scales[b] * gauge)
        images = prototypes[b][labels] + shared + private
        images /= np.linalg.norm(images, axis=1, keepdims=True)
        records.append(
            BackboneRecord(
                name=f"backbone_{b}",
                image_embeddings=images.astype(np.float32),
                text_embeddings=prototypes[b].astype(np.float32),
            )
        )

    splits = _stratified_splits(labels, rng, test_fraction, holdout_fraction)
    manifest = Manifest(
        version=MANIFEST_VERSION,
        dataset_name=dataset_name,
        num_samples=num_samples,
        num_classes=num_classes,
        class_names=[f"class_{c}" for c in range(num_classes)],
        backbones=[{"name": rec.name, "dim": dim} for rec in records],
    )
    store = EmbeddingStore(
        manifest=manifest,
        backbones=records,
        labels=labels.astype(np.uint32),
        splits=splits,
    )
    store.validate()
    return store


def subsample_per_class(
    split: np.ndarray, labels: np.ndarray, per_class: int, seed: int
) -> np.ndarray:
    """Pick up to ``per_class`` indices per class from ``split``, deterministically.

    Classes with fewer members contribute all of them.  The result is sorted,
    so the output is independent of per-class draw order.
    """
    split = np.asarray(split, dtype=np.int64)
    if split.size == 0:
        raise ValueError("split is empty")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    chosen = []
    split_labels = np.asarray(labels)[split]
    for cls in np.unique(split_labels):
        members = split[split_labels == cls]
        if len(members) <= per_class:
            chosen.append(members)
        else:
            chosen.append(rng.choice(members, size=per_class, replace=False))
    return np.sort(np.concatenate(chosen))
