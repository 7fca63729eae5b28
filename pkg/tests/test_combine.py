"""Fusion methods: degeneracies, voting rules, the genetic search, and the
per-sample temperature network with its gradient check."""

import numpy as np
import pytest

from backbone_fusion.combine import (
    GacConfig,
    TrainConfig,
    average_logits,
    combine_with_temperatures,
    gac_search,
    nnc_apply,
    nnc_forward_backward,
    nnc_init,
    nnc_inputs,
    nnc_train,
    select_by_confidence,
    vote_top1,
    vote_top3,
)
from backbone_fusion.normalize import NormalizationMode
from backbone_fusion.pipeline import zeroshot_logit_matrices
from backbone_fusion.zeroshot import LogitMatrix, PredictionVector, predict, probabilities

from conftest import make_tiny_store


def _matrix(values, name="m"):
    return LogitMatrix(
        values=np.asarray(values, dtype=np.float64),
        backbone_name=name,
        mode=NormalizationMode.L2,
    )


def _pv(preds, confidence):
    return PredictionVector(
        preds=np.asarray(preds, dtype=np.int64),
        confidence=np.asarray(confidence, dtype=np.float64),
    )


class TestSingleBackboneDegeneracies:
    def test_all_combiners_reduce_to_the_single_backbone(self):
        rng = np.random.Generator(np.random.Philox(key=31))
        logits = _matrix(rng.standard_normal((30, 4)))
        single = predict(logits)
        probs = probabilities(logits)

        np.testing.assert_array_equal(vote_top1([single]).preds, single.preds)
        np.testing.assert_array_equal(vote_top3([probs]).preds, single.preds)
        np.testing.assert_array_equal(select_by_confidence([probs]).preds, single.preds)
        np.testing.assert_array_equal(average_logits([logits]).preds, single.preds)
        fused, _ = combine_with_temperatures([logits], np.array([1.0]))
        np.testing.assert_array_equal(fused.preds, single.preds)

    def test_gac_single_backbone_returns_its_accuracy(self):
        rng = np.random.Generator(np.random.Philox(key=32))
        logits = _matrix(rng.standard_normal((40, 3)))
        labels = rng.integers(0, 3, size=40)
        single_acc = (predict(logits).preds == labels).mean()
        result = gac_search([logits], labels, np.arange(40), GacConfig(generations=5, seed=0))
        assert result.best_fitness == pytest.approx(single_acc)


class TestAveraging:
    def test_identical_copies_preserve_argmax(self):
        rng = np.random.Generator(np.random.Philox(key=33))
        logits = _matrix(rng.standard_normal((25, 6)))
        single = predict(logits).preds
        fused = average_logits([logits, logits, logits])
        np.testing.assert_array_equal(fused.preds, single)

    def test_two_row_arithmetic(self):
        fused = average_logits([_matrix([[2.0, 0.0]]), _matrix([[0.0, 1.0]])])
        assert fused.preds[0] == 0  # mean row is [1, 0.5]

    def test_calibrated_averaging_divides_by_temperature(self):
        a, b = _matrix([[2.0, 0.0]]), _matrix([[0.0, 3.0]])
        fused = average_logits([a, b], temps=[1.0, 100.0])
        assert fused.preds[0] == 0  # backbone 1 flattened away


class TestVoteTop1:
    def test_strict_majority(self):
        preds = [_pv([0], [0.9]), _pv([0], [0.5]), _pv([1], [0.99])]
        assert vote_top1(preds).preds[0] == 0

    def test_tie_resolved_by_confidence(self):
        preds = [_pv([0], [0.9]), _pv([1], [0.6])]
        assert vote_top1(preds).preds[0] == 0
        preds = [_pv([0], [0.6]), _pv([1], [0.9])]
        assert vote_top1(preds).preds[0] == 1

    def test_residual_tie_lowest_index(self):
        preds = [_pv([2], [0.7]), _pv([1], [0.7])]
        assert vote_top1(preds).preds[0] == 1


class TestVoteTop3:
    def test_hand_enumerated_weights(self):
        # rankings [A,B,C] and [B,C,A] give A=3+1=4, B=2+3=5, C=1+2=3
        probs_a = np.array([[0.5, 0.3, 0.2]])
        probs_b = np.array([[0.2, 0.5, 0.3]])
        fused = vote_top3([probs_a, probs_b])
        assert fused.preds[0] == 1

    def test_shared_top1_wins(self):
        rows = [np.array([[0.6, 0.3, 0.1]]), np.array([[0.5, 0.1, 0.4]])]
        assert vote_top3(rows).preds[0] == 0

    def test_requires_three_classes(self):
        with pytest.raises(ValueError):
            vote_top3([np.array([[0.5, 0.5]])])

    def test_weight_tie_falls_back_to_probability(self):
        # both rankings reversed: A=3+1, B=2+2, C=1+3 -> tie A/B/C at 4
        probs_a = np.array([[0.5, 0.3, 0.2]])
        probs_b = np.array([[0.2, 0.3, 0.5]])
        fused = vote_top3([probs_a, probs_b])
        # summed probabilities: A=0.7, B=0.6, C=0.7 -> tie A/C -> lowest index
        assert fused.preds[0] == 0


class TestSelectByConfidence:
    def test_minimum_entropy_backbone_wins(self):
        sharp = np.array([[0.98, 0.01, 0.01]])
        flat = np.array([[0.4, 0.35, 0.25]])
        fused = select_by_confidence([flat, sharp])
        assert fused.preds[0] == 0  # sharp backbone's argmax
        fused = select_by_confidence([sharp, flat])
        assert fused.preds[0] == 0

    def test_identical_rows_choose_backbone_zero(self):
        row = np.array([[0.5, 0.3, 0.2]])
        fused = select_by_confidence([row, row.copy()])
        assert fused.preds[0] == 0
        assert fused.confidence[0] == pytest.approx(0.5)

    def test_temperatures_recalibrate_entropy(self):
        # backbone 0 is overconfident but wrong-headed; a high temperature
        # flattens it so the calibrated pick switches to backbone 1
        over = np.array([[0.9, 0.05, 0.05]])
        mild = np.array([[0.1, 0.8, 0.1]])
        assert select_by_confidence([over, mild]).preds[0] == 0
        fused = select_by_confidence([over, mild], temps=[50.0, 1.0])
        assert fused.preds[0] == 1


class TestCombineWithTemperatures:
    def test_unit_vector_selects_backbone(self):
        rng = np.random.Generator(np.random.Philox(key=34))
        mats = [_matrix(rng.standard_normal((20, 4))) for _ in range(3)]
        for b in range(3):
            temps = np.zeros(3)
            temps[b] = 1.0
            fused, _ = combine_with_temperatures(mats, temps)
            np.testing.assert_array_equal(fused.preds, predict(mats[b]).preds)

    def test_uniform_weights_match_plain_average(self):
        rng = np.random.Generator(np.random.Philox(key=35))
        mats = [_matrix(rng.standard_normal((20, 4))) for _ in range(4)]
        fused, _ = combine_with_temperatures(mats, np.full(4, 0.25))
        np.testing.assert_array_equal(fused.preds, average_logits(mats).preds)

    def test_two_backbone_arithmetic(self):
        fused, _ = combine_with_temperatures(
            [_matrix([[1.0, 0.0]]), _matrix([[0.0, 3.0]])], np.array([2.0, 1.0])
        )
        assert fused.preds[0] == 1  # combined row [2, 3]

    def test_argmax_invariant_to_positive_scaling(self):
        rng = np.random.Generator(np.random.Philox(key=36))
        mats = [_matrix(rng.standard_normal((30, 5))) for _ in range(3)]
        temps = rng.uniform(0.1, 5.0, size=3)
        base, _ = combine_with_temperatures(mats, temps)
        for alpha in (0.01, 0.5, 3.0, 100.0):
            scaled, _ = combine_with_temperatures(mats, alpha * temps)
            np.testing.assert_array_equal(scaled.preds, base.preds)

    def test_per_sample_matrix(self):
        mats = [_matrix([[1.0, 0.0], [1.0, 0.0]]), _matrix([[0.0, 1.0], [0.0, 1.0]])]
        temps = np.array([[1.0, 0.0], [0.0, 1.0]])
        fused, _ = combine_with_temperatures(mats, temps)
        np.testing.assert_array_equal(fused.preds, [0, 1])

    def test_shape_errors(self):
        mats = [_matrix([[1.0, 0.0]])]
        with pytest.raises(ValueError):
            combine_with_temperatures(mats, np.array([1.0, 2.0]))
        with pytest.raises(ValueError):
            combine_with_temperatures(mats, np.ones((3, 3, 3)))


def _margin_complement_fixture(n=200, seed=40):
    """Backbone 0 is right where backbone 1 hesitates, and vice versa."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    labels = rng.integers(0, 2, size=n)
    z0 = np.zeros((n, 2))
    z1 = np.zeros((n, 2))
    first_half = np.arange(n) < n // 2
    for i in range(n):
        if first_half[i]:
            z0[i, labels[i]] = 2.0                  # confident and right
            z1[i, 1 - labels[i]] = 0.3              # mildly wrong
        else:
            z1[i, labels[i]] = 2.0
            z0[i, 1 - labels[i]] = 0.3
    return [_matrix(z0, "a"), _matrix(z1, "b")], labels


class TestGac:
    def test_trace_is_non_decreasing(self, fixture_store, l2_logits):
        cfg = GacConfig(generations=30, seed=3)
        result = gac_search(
            l2_logits, fixture_store.labels, fixture_store.splits.train, cfg
        )
        trace = np.array(result.fitness_trace)
        assert (np.diff(trace) >= 0).all()
        assert result.best_fitness == trace[-1]

    def test_bit_reproducible(self):
        mats, labels = _margin_complement_fixture()
        cfg = GacConfig(generations=40, seed=11)
        a = gac_search(mats, labels, np.arange(200), cfg)
        b = gac_search(mats, labels, np.arange(200), cfg)
        np.testing.assert_array_equal(a.temperatures, b.temperatures)
        assert a.fitness_trace == b.fitness_trace

    def test_matches_grid_oracle_on_complementary_fixture(self):
        mats, labels = _margin_complement_fixture()
        split = np.arange(200)
        # independent oracle: exhaustive 200 x 200 grid over the bounds
        axis = np.linspace(0.0, 10.0, 200)
        stacked = np.stack([m.values for m in mats])
        best_grid = 0.0
        for t0 in axis:
            combined = t0 * stacked[0] + axis[:, None, None] * stacked[1]
            accs = (combined.argmax(axis=2) == labels).mean(axis=1)
            best_grid = max(best_grid, float(accs.max()))
        result = gac_search(mats, labels, split, GacConfig(seed=5))
        assert result.best_fitness >= best_grid - 0.005

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            GacConfig(population=2, elitism=2).validate()
        with pytest.raises(ValueError):
            GacConfig(bounds=(5.0, 5.0)).validate()
        with pytest.raises(ValueError):
            GacConfig(mutation_rate=1.5).validate()

    def test_empty_split_rejected(self):
        mats, labels = _margin_complement_fixture()
        with pytest.raises(ValueError):
            gac_search(mats, labels, np.array([], dtype=np.int64), GacConfig())


class TestNnc:
    def test_untrained_model_is_logit_averaging(self):
        store = make_tiny_store(seed=50, num_samples=24)
        logits = zeroshot_logit_matrices(store, NormalizationMode.L2)
        model = nnc_train(store, logits, np.arange(24), TrainConfig(epochs=0))
        preds, temps = nnc_apply(model, store, logits)
        np.testing.assert_array_equal(preds.preds, average_logits(logits).preds)
        np.testing.assert_allclose(temps, 0.5)

    def test_gradients_match_finite_differences(self):
        # oracle: central differences of the forward loss, step 1e-5
        rng = np.random.Generator(np.random.Philox(key=51))
        for trial in range(5):
            m, n_backbones, c, d = 4, 2, 3, 3
            xb = rng.standard_normal((m, n_backbones * d))
            zb = rng.standard_normal((n_backbones, m, c))
            yb = rng.integers(0, c, size=m)
            w = rng.standard_normal((n_backbones, n_backbones * d)) * 0.3
            b = rng.standard_normal(n_backbones) * 0.3
            _, grad_w, grad_b = nnc_forward_backward(w, b, xb, zb, yb)

            step = 1e-5
            for grad, param in ((grad_w, w), (grad_b, b)):
                flat_grad = grad.reshape(-1)
                flat = param.reshape(-1)
                for k in range(flat.size):
                    original = flat[k]
                    flat[k] = original + step
                    up, _, _ = nnc_forward_backward(w, b, xb, zb, yb)
                    flat[k] = original - step
                    down, _, _ = nnc_forward_backward(w, b, xb, zb, yb)
                    flat[k] = original
                    numeric = (up - down) / (2 * step)
                    denom = max(abs(numeric), abs(flat_grad[k]), 1e-8)
                    assert abs(flat_grad[k] - numeric) / denom < 1e-4

    def test_training_is_deterministic(self):
        store = make_tiny_store(seed=52, num_samples=30)
        logits = zeroshot_logit_matrices(store, NormalizationMode.L2)
        cfg = TrainConfig(epochs=5, seed=9)
        a = nnc_train(store, logits, np.arange(30), cfg)
        b = nnc_train(store, logits, np.arange(30), cfg)
        np.testing.assert_array_equal(a.weight, b.weight)
        np.testing.assert_array_equal(a.bias, b.bias)

    def test_zero_weight_unit_bias_selects_backbone(self):
        store = make_tiny_store(seed=53, num_samples=20)
        logits = zeroshot_logit_matrices(store, NormalizationMode.L2)
        model = nnc_init(store)
        model.bias[:] = [1.0, 0.0]
        preds, _ = nnc_apply(model, store, logits)
        np.testing.assert_array_equal(preds.preds, predict(logits[0]).preds)

    def test_apply_restricted_to_split(self):
        store = make_tiny_store(seed=54, num_samples=20)
        logits = zeroshot_logit_matrices(store, NormalizationMode.L2)
        model = nnc_init(store)
        split = np.array([3, 7, 11])
        preds, temps = nnc_apply(model, store, logits, split=split)
        assert len(preds.preds) == 3
        assert temps.shape == (3, 2)
        full_preds, _ = nnc_apply(model, store, logits)
        np.testing.assert_array_equal(preds.preds, full_preds.preds[split])

    def test_inputs_are_unit_normalized_concatenation(self, small_store):
        x = nnc_inputs(small_store)
        dims = [rec.image_embeddings.shape[1] for rec in small_store.backbones]
        assert x.shape == (1000, sum(dims))
        start = 0
        for d in dims:
            np.testing.assert_allclose(
                np.linalg.norm(x[:, start : start + d], axis=1), 1.0, atol=1e-6
            )
            start += d


class TestCalibratedVariants:
    def test_calibration_leaves_single_backbone_accuracies_alone(
        self, small_store, small_l2_logits
    ):
        from backbone_fusion.calibrate import apply_temperature, fit_temperature
        from backbone_fusion.zeroshot import accuracy

        labels = small_store.labels
        test = small_store.splits.test
        for lm in small_l2_logits:
            before = accuracy(predict(lm), labels, test)
            fitted = fit_temperature(lm, labels, small_store.splits.train)
            after = accuracy(
                predict(apply_temperature(lm, fitted.temperature)), labels, test
            )
            assert after == before
