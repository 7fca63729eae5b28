"""Shared fixtures: the canonical seed-7 synthetic stores and their logits."""

import pytest

from backbone_fusion import synth_generate
from backbone_fusion.normalize import NormalizationMode
from backbone_fusion.pipeline import zeroshot_logit_matrices

RAMP = [0.8, 0.9, 1.0, 1.1, 1.2]


@pytest.fixture(scope="session")
def fixture_store():
    """The reference experiment store: 1000-sample test split + 1000-sample train pool."""
    return synth_generate(7, 5, 2000, 10, 16, RAMP, 0.3)


@pytest.fixture(scope="session")
def small_store():
    """The smaller store used by the generator's own documented example."""
    return synth_generate(7, 5, 1000, 10, 16, RAMP, 0.3)


@pytest.fixture(scope="session")
def l2_logits(fixture_store):
    return zeroshot_logit_matrices(fixture_store, NormalizationMode.L2)


@pytest.fixture(scope="session")
def small_l2_logits(small_store):
    return zeroshot_logit_matrices(small_store, NormalizationMode.L2)


def make_tiny_store(seed=3, num_backbones=2, num_samples=12, num_classes=3, dim=4):
    return synth_generate(
        seed,
        num_backbones,
        num_samples,
        num_classes,
        dim,
        [0.5] * num_backbones,
        0.2,
        test_fraction=0.25,
        holdout_fraction=0.2,
    )
