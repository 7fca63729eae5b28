"""Extraction pipeline: encode a dataset with each backbone and write an
embedding store.

The on-disk layout matches the fusion core's store contract byte for byte:

    <store>/manifest.json       UTF-8 JSON manifest
    <store>/labels.u32le        N x uint32, little-endian
    <store>/splits.json         {"train": [...], "probe_holdout": [...], "test": [...]}
    <store>/<name>/image.f32le  N x D float32, little-endian, row-major
    <store>/<name>/text.f32le   C x D float32, little-endian, row-major

Stored embeddings are the raw encoder outputs; normalization is the fusion
core's job, so a single extraction serves every scoring regime.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .datasets import ImageSample, load_folder_dataset
from .encoders import make_encoder

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1


@dataclass
class ExtractJob:
    dataset: str
    backbones: list[str]
    template: str = "an image of {label}"
    out: str | Path = "store"
    batch_size: int = 32
    device: str = "cpu"
    split_seed: int = 7
    test_fraction: float = 0.5     # used only when the dataset has no canonical split
    holdout_fraction: float = 0.1  # share of the train pool reserved for fusion fitting
    fail_on_error: bool = False
    overwrite: bool = False

    def validate(self) -> None:
        if not self.backbones:
            raise ValueError("at least one backbone is required")
        if "{label}" not in self.template:
            raise ValueError("prompt template must contain a {label} slot")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in (0, 1)")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in [0, 1)")


def _open_images(
    samples: list[ImageSample], fail_on_error: bool
) -> tuple[list[ImageSample], list[Image.Image]]:
    """Decode every sample once, dropping unreadable files unless told to fail."""
    kept, images = [], []
    for sample in samples:
        try:
            with Image.open(sample.path) as img:
                images.append(img.convert("RGB").copy())
            kept.append(sample)
        except (OSError, UnidentifiedImageError) as exc:
            if fail_on_error:
                raise
            logger.warning("skipping undecodable image %s: %s", sample.path, exc)
    if not kept:
        raise ValueError("no decodable images remain")
    return kept, images


def _stratified_splits(
    labels: np.ndarray,
    canonical_test: np.ndarray | None,
    seed: int,
    test_fraction: float,
    holdout_fraction: float,
) -> dict[str, list[int]]:
    """Test from the canonical split when present, else carved by fraction;
    the remaining pool is divided 90/10 into train and probe_holdout, per class."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    train, holdout, test = [], [], []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        if canonical_test is not None:
            is_test = np.isin(members, canonical_test)
            test.extend(members[is_test].tolist())
            pool = members[~is_test]
        else:
            n_test = int(round(len(members) * test_fraction))
            test.extend(members[:n_test].tolist())
            pool = members[n_test:]
        n_hold = int(round(len(pool) * holdout_fraction))
        holdout.extend(pool[:n_hold].tolist())
        train.extend(pool[n_hold:].tolist())
    return {
        "train": sorted(train),
        "probe_holdout": sorted(holdout),
        "test": sorted(test),
    }


def _encode_in_batches(encoder, images: list[Image.Image], batch_size: int) -> np.ndarray:
    chunks = [
        encoder.encode_images(images[start : start + batch_size])
        for start in range(0, len(images), batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def extract(job: ExtractJob) -> Path:
    """Run the extraction and return the store directory."""
    job.validate()
    dataset = load_folder_dataset(job.dataset)
    samples, images = _open_images(dataset.samples, job.fail_on_error)
    labels = np.array([s.class_index for s in samples], dtype=np.uint32)
    prompts = [job.template.format(label=name) for name in dataset.class_names]

    out = Path(job.out)
    if out.exists() and any(out.iterdir()) and not job.overwrite:
        raise FileExistsError(f"refusing to write into non-empty directory {out}")
    out.mkdir(parents=True, exist_ok=True)

    backbone_meta = []
    for name in job.backbones:
        encoder = make_encoder(name, device=job.device)
        image_features = _encode_in_batches(encoder, images, job.batch_size)
        text_features = encoder.encode_texts(prompts)
        if image_features.shape[1] != text_features.shape[1]:
            raise ValueError(
                f"{name}: image dim {image_features.shape[1]} != text dim "
                f"{text_features.shape[1]}"
            )
        safe_name = name.replace(":", "_").replace("/", "_")
        sub = out / safe_name
        sub.mkdir(exist_ok=True)
        (sub / "image.f32le").write_bytes(
            np.ascontiguousarray(image_features, dtype="<f4").tobytes()
        )
        (sub / "text.f32le").write_bytes(
            np.ascontiguousarray(text_features, dtype="<f4").tobytes()
        )
        backbone_meta.append({"name": safe_name, "dim": int(image_features.shape[1])})
        logger.info("%s: encoded %d images, %d prompts", name, len(images), len(prompts))

    canonical_test = (
        np.flatnonzero([s.in_test for s in samples])
        if dataset.has_canonical_split
        else None
    )
    splits = _stratified_splits(
        labels, canonical_test, job.split_seed, job.test_fraction, job.holdout_fraction
    )

    manifest = {
        "version": MANIFEST_VERSION,
        "dataset_name": dataset.name,
        "num_samples": int(len(samples)),
        "num_classes": len(dataset.class_names),
        "class_names": dataset.class_names,
        "backbones": backbone_meta,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8"
    )
    (out / "labels.u32le").write_bytes(
        np.ascontiguousarray(labels, dtype="<u4").tobytes()
    )
    (out / "splits.json").write_text(json.dumps(splits, sort_keys=True) + "\n", "utf-8")
    return out
