"""Folder-based image datasets.

The canonical layout is one subdirectory per class.  A dataset root that
contains ``train/`` and ``test/`` directories (each holding class
subdirectories) carries its own canonical split; otherwise the test portion
is carved out at extraction time with the split seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".webp"}
DATASET_ROOT_ENV = "CLIP_STORE_DATASETS"


class DatasetError(ValueError):
    """The dataset path is missing or malformed."""


@dataclass
class ImageSample:
    path: Path
    class_index: int
    in_test: bool | None  # None when the dataset has no canonical split


@dataclass
class FolderDataset:
    name: str
    class_names: list[str]
    samples: list[ImageSample]
    has_canonical_split: bool


def resolve_dataset(identifier: str) -> Path:
    """A dataset is either a directory path or a name under $CLIP_STORE_DATASETS."""
    direct = Path(identifier)
    if direct.is_dir():
        return direct
    root = os.environ.get(DATASET_ROOT_ENV)
    if root:
        named = Path(root) / identifier
        if named.is_dir():
            return named
    raise DatasetError(
        f"dataset {identifier!r} not found (not a directory, and not under "
        f"${DATASET_ROOT_ENV})"
    )


def _class_dirs(root: Path) -> list[Path]:
    return sorted(p for p in root.iterdir() if p.is_dir())


def _image_files(class_dir: Path) -> list[Path]:
    return sorted(
        p for p in class_dir.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


def load_folder_dataset(identifier: str) -> FolderDataset:
    root = resolve_dataset(identifier)
    subdirs = {p.name for p in root.iterdir() if p.is_dir()}
    canonical = {"train", "test"} <= subdirs

    if canonical:
        class_names = sorted(
            {d.name for d in _class_dirs(root / "train")}
            | {d.name for d in _class_dirs(root / "test")}
        )
        index = {name: i for i, name in enumerate(class_names)}
        samples = []
        for part, in_test in (("train", False), ("test", True)):
            for class_dir in _class_dirs(root / part):
                for path in _image_files(class_dir):
                    samples.append(ImageSample(path, index[class_dir.name], in_test))
    else:
        class_dirs = _class_dirs(root)
        if not class_dirs:
            raise DatasetError(f"{root}: no class subdirectories found")
        class_names = [d.name for d in class_dirs]
        samples = [
            ImageSample(path, i, None)
            for i, class_dir in enumerate(class_dirs)
            for path in _image_files(class_dir)
        ]

    if not samples:
        raise DatasetError(f"{root}: no images found")
    return FolderDataset(
        name=root.name,
        class_names=class_names,
        samples=samples,
        has_canonical_split=canonical,
    )
