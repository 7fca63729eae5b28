"""Linear probes: language-weight initialization, training, persistence."""

import numpy as np
import pytest

from backbone_fusion.combine import TrainConfig
from backbone_fusion.embedstore import synth_generate
from backbone_fusion.normalize import NormalizationMode, apply_mode
from backbone_fusion.probe import (
    init_from_language_weights,
    load_probe,
    probe_forward_backward,
    probe_logits,
    save_probe,
    train_probe,
)
from backbone_fusion.zeroshot import accuracy, compute_logits, predict


class TestLanguageInit:
    def test_bias_is_zero(self, small_store):
        probe = init_from_language_weights(small_store.backbones[0])
        np.testing.assert_array_equal(probe.bias, 0.0)

    def test_untrained_probe_matches_zeroshot_logits(self, small_store):
        for rec in small_store.backbones:
            probe = init_from_language_weights(rec)
            via_probe = probe_logits(probe, rec).values
            via_zeroshot = compute_logits(
                apply_mode(rec, NormalizationMode.L2), NormalizationMode.L2
            ).values
            np.testing.assert_allclose(via_probe, via_zeroshot, atol=1e-5)

    def test_untrained_probe_matches_zeroshot_accuracy_exactly(self, small_store):
        rec = small_store.backbones[0]
        split = small_store.splits.test
        probe_acc = accuracy(
            predict(probe_logits(init_from_language_weights(rec), rec)),
            small_store.labels,
            split,
        )
        zs_acc = accuracy(
            predict(compute_logits(apply_mode(rec, NormalizationMode.L2), NormalizationMode.L2)),
            small_store.labels,
            split,
        )
        assert probe_acc == zs_acc


class TestTraining:
    def test_separable_fixture_reaches_full_train_accuracy(self):
        store = synth_generate(9, 1, 80, 4, 8, [0.0], 0.0)
        rec = store.backbones[0]
        probe = init_from_language_weights(rec)
        trained, diag = train_probe(
            probe, rec, store.labels, store.splits.train, TrainConfig(epochs=20)
        )
        assert diag["final_train_accuracy"] == 1.0

    def test_loss_non_increasing_on_separable_fixture(self):
        store = synth_generate(10, 1, 60, 3, 6, [0.0], 0.0)
        rec = store.backbones[0]
        _, diag = train_probe(
            init_from_language_weights(rec),
            rec,
            store.labels,
            store.splits.train,
            TrainConfig(learning_rate=1e-3, epochs=15),
        )
        losses = np.array(diag["loss_per_epoch"])
        assert (np.diff(losses) <= 1e-12).all()

    def test_gradients_match_finite_differences(self):
        # oracle: central differences of the forward loss, step 1e-5
        rng = np.random.Generator(np.random.Philox(key=61))
        for trial in range(5):
            m, c, d = 4, 3, 5
            xb = rng.standard_normal((m, d))
            yb = rng.integers(0, c, size=m)
            w = rng.standard_normal((c, d)) * 0.5
            b = rng.standard_normal(c) * 0.5
            _, grad_w, grad_b = probe_forward_backward(w, b, xb, yb)
            step = 1e-5
            for grad, param in ((grad_w, w), (grad_b, b)):
                flat_grad = grad.reshape(-1)
                flat = param.reshape(-1)
                for k in range(flat.size):
                    original = flat[k]
                    flat[k] = original + step
                    up, _, _ = probe_forward_backward(w, b, xb, yb)
                    flat[k] = original - step
                    down, _, _ = probe_forward_backward(w, b, xb, yb)
                    flat[k] = original
                    numeric = (up - down) / (2 * step)
                    denom = max(abs(numeric), abs(flat_grad[k]), 1e-8)
                    assert abs(flat_grad[k] - numeric) / denom < 1e-4

    def test_reserved_indices_must_stay_out(self, small_store):
        rec = small_store.backbones[0]
        probe = init_from_language_weights(rec)
        poisoned = np.concatenate(
            [small_store.splits.train, small_store.splits.test[:1]]
        )
        with pytest.raises(ValueError):
            train_probe(
                probe,
                rec,
                small_store.labels,
                poisoned,
                TrainConfig(epochs=1),
                reserved=small_store.splits.test,
            )

    def test_training_is_deterministic(self, small_store):
        rec = small_store.backbones[0]
        cfg = TrainConfig(epochs=3, seed=4)
        a, _ = train_probe(
            init_from_language_weights(rec), rec, small_store.labels, small_store.splits.train, cfg
        )
        b, _ = train_probe(
            init_from_language_weights(rec), rec, small_store.labels, small_store.splits.train, cfg
        )
        np.testing.assert_array_equal(a.weight, b.weight)
        np.testing.assert_array_equal(a.bias, b.bias)


class TestProbeLogits:
    def test_constant_bias_dominates_zero_weight(self, small_store):
        rec = small_store.backbones[0]
        probe = init_from_language_weights(rec)
        probe.weight = np.zeros_like(probe.weight)
        probe.bias = np.zeros_like(probe.bias)
        probe.bias[0] = 5.0
        preds = predict(probe_logits(probe, rec))
        assert (preds.preds == 0).all()

    def test_split_restriction(self, small_store):
        rec = small_store.backbones[0]
        probe = init_from_language_weights(rec)
        split = small_store.splits.test[:7]
        restricted = probe_logits(probe, rec, split=split)
        full = probe_logits(probe, rec)
        np.testing.assert_allclose(restricted.values, full.values[split])


class TestPersistence:
    def test_round_trip(self, tmp_path, small_store):
        rec = small_store.backbones[0]
        trained, _ = train_probe(
            init_from_language_weights(rec),
            rec,
            small_store.labels,
            small_store.splits.train,
            TrainConfig(epochs=2),
        )
        save_probe(trained, tmp_path)
        loaded = load_probe(tmp_path, rec.name)
        np.testing.assert_allclose(loaded.weight, trained.weight, atol=1e-6)
        np.testing.assert_allclose(loaded.bias, trained.bias, atol=1e-6)
