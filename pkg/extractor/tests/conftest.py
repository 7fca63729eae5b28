"""Builds tiny on-disk image datasets for extraction tests."""

import numpy as np
import pytest
from PIL import Image


def write_image(path, seed, size=(24, 20)):
    rng = np.random.Generator(np.random.Philox(key=seed))
    pixels = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
    Image.fromarray(pixels, "RGB").save(path)


@pytest.fixture()
def toy_dataset(tmp_path):
    """Ten images in two classes, flat class-per-subdirectory layout."""
    root = tmp_path / "pets"
    for cls_i, cls in enumerate(("cat", "dog")):
        (root / cls).mkdir(parents=True)
        for i in range(5):
            write_image(root / cls / f"{cls}_{i}.png", seed=cls_i * 100 + i)
    return root


@pytest.fixture()
def split_dataset(tmp_path):
    """Canonical train/test layout: 6 train + 2 test images per class."""
    root = tmp_path / "birds"
    for part, count in (("train", 6), ("test", 2)):
        for cls_i, cls in enumerate(("wren", "crow")):
            (root / part / cls).mkdir(parents=True)
            for i in range(count):
                write_image(
                    root / part / cls / f"{cls}_{i}.png",
                    seed=10_000 + cls_i * 1000 + (0 if part == "train" else 500) + i,
                )
    return root
