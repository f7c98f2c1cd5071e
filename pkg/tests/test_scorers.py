import math
import unittest

import numpy as np

from mia.disparity import consistency
from mia.metrics import predict_at_fpr
from mia.scorers import (
    SCORERS,
    SignalSet,
    VarianceMode,
    calibration_scorer,
    calibration_threshold,
    instance_labels,
    lira_offline_scorer,
    lira_scorer,
    loss_predictions,
    loss_scorer,
    minmax_normalize,
    reference_scorer,
    score_bundle,
)
from mia.simulator import SimConfig, generate
from mia.util import AuditError, AuditErrorCode


def normal_logpdf(x: float, mean: float, std: float) -> float:
    return -0.5 * math.log(2 * math.pi * std * std) - (x - mean) ** 2 / (2 * std * std)


def population_std(values) -> float:
    mean = sum(values) / len(values)
    return math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))


class TestLossScorers(unittest.TestCase):
    def test_minmax_endpoints(self):
        assert loss_scorer(SignalSet(target_loss=[0.0, 1.0])).scores.tolist() == [1.0, 0.0]

    def test_degenerate_losses(self):
        result = loss_scorer(SignalSet(target_loss=[2.0, 2.0, 2.0]))
        assert result.scores.tolist() == [0.5, 0.5, 0.5]
        assert result.threshold == 0.5

    def test_threshold_on_score_scale(self):
        result = loss_scorer(SignalSet(target_loss=[0.0, 1.0, 0.5, 0.5]))
        assert result.raw_threshold == 0.5
        assert result.threshold == 0.5

    def test_strict_predictions(self):
        assert loss_predictions(SignalSet(target_loss=[0.2, 0.8, 0.5, 0.5])).tolist() == [1, 0, 0, 0]

    def test_empty_input(self):
        with self.assertRaises(AuditError) as ctx:
            minmax_normalize([])
        assert ctx.exception.code == AuditErrorCode.MISSING_SIGNAL

    def test_calibration(self):
        equal = SignalSet(target_loss=[0.3, 0.1, 0.7], shadow_loss=[0.3, 0.1, 0.7])
        assert calibration_scorer(equal).tolist() == [0.5, 0.5, 0.5]
        swapped = SignalSet(target_loss=[0.1, 0.9], shadow_loss=[0.9, 0.1])
        assert calibration_scorer(swapped).tolist() == [1.0, 0.0]

    def test_calibration_matches_formula(self):
        rng = np.random.default_rng(6)
        target, shadow = rng.random(5), rng.random(5)
        calibrated = target - shadow
        expected = 1 - (calibrated - calibrated.min()) / (calibrated.max() - calibrated.min())
        assert np.allclose(calibration_scorer(SignalSet(target_loss=target, shadow_loss=shadow)), expected, atol=1e-15)

    def test_calibration_needs_shadow_loss(self):
        with self.assertRaises(AuditError) as ctx:
            calibration_scorer(SignalSet(target_loss=[0.1, 0.2]))
        assert ctx.exception.code == AuditErrorCode.MISSING_SIGNAL

    def test_calibration_threshold(self):
        scores = np.array([0.1, 0.2, 0.8, 0.9])
        gt = np.array([0, 0, 1, 1])
        threshold = calibration_threshold(scores, gt)
        assert 0.2 < threshold <= 0.8
        assert np.all((scores >= threshold) == (gt == 1))
        assert calibration_threshold(np.array([0.4, 0.4]), np.array([0, 1])) == 0.4

    def test_calibration_threshold_matches_grid_search(self):
        rng = np.random.default_rng(7)
        scores = rng.random(20)
        gt = rng.integers(0, 2, 20)
        grid = np.linspace(scores.min(), scores.max(), 1000)
        best, best_accuracy = None, -1.0
        for t in grid:
            accuracy = float(np.mean((scores >= t) == (gt == 1)))
            if accuracy > best_accuracy:
                best, best_accuracy = t, accuracy
        assert calibration_threshold(scores, gt) == best


class TestLira(unittest.TestCase):
    def test_equal_distributions_score_zero(self):
        signals = SignalSet(
            target_loss=[0.3, 5.0],
            shadow_in_losses=[[0.1, 0.5], [1.0, 2.0]],
            shadow_out_losses=[[0.1, 0.5], [1.0, 2.0]],
        )
        assert np.all(lira_scorer(signals) == 0.0)

    def test_sign(self):
        signals = SignalSet(
            target_loss=[0.1],
            shadow_in_losses=[[0.0, 0.2]],
            shadow_out_losses=[[2.0, 2.2]],
        )
        assert lira_scorer(signals)[0] > 0

    def test_closed_form(self):
        shadow_in, shadow_out, target = [0.1, 0.2, 0.15], [1.0, 1.1, 0.9], 0.12
        signals = SignalSet(target_loss=[target], shadow_in_losses=[shadow_in], shadow_out_losses=[shadow_out])
        expected = normal_logpdf(target, sum(shadow_in) / 3, population_std(shadow_in)) - normal_logpdf(
            target, sum(shadow_out) / 3, population_std(shadow_out)
        )
        assert abs(lira_scorer(signals)[0] - expected) < 1e-10

    def test_closed_form_random(self):
        rng = np.random.default_rng(8)
        in_losses = rng.gamma(2.0, 0.1, (100, 6))
        out_losses = rng.gamma(2.0, 0.5, (100, 6))
        targets = rng.gamma(2.0, 0.3, 100)
        scores = lira_scorer(SignalSet(target_loss=targets, shadow_in_losses=in_losses, shadow_out_losses=out_losses))
        for i in range(100):
            expected = normal_logpdf(
                targets[i], float(np.mean(in_losses[i])), population_std(in_losses[i].tolist())
            ) - normal_logpdf(targets[i], float(np.mean(out_losses[i])), population_std(out_losses[i].tolist()))
            assert abs(scores[i] - expected) < 1e-10 * max(1.0, abs(expected))

    def test_global_variance_single_shadow_pair(self):
        signals = SignalSet(
            target_loss=[0.2, 0.4],
            shadow_in_losses=[[0.1], [0.3]],
            shadow_out_losses=[[0.9], [0.8]],
        )
        scores = lira_scorer(signals, VarianceMode.GLOBAL)
        assert np.all(np.isfinite(scores))

    def test_zero_variance_is_floored(self):
        signals = SignalSet(
            target_loss=[0.2],
            shadow_in_losses=[[0.2, 0.2]],
            shadow_out_losses=[[0.2, 0.2]],
        )
        assert lira_scorer(signals).tolist() == [0.0]

    def test_per_sample_needs_two_losses(self):
        signals = SignalSet(target_loss=[0.2], shadow_in_losses=[[0.1]], shadow_out_losses=[[0.9, 1.0]])
        with self.assertRaises(AuditError) as ctx:
            lira_scorer(signals)
        assert ctx.exception.code == AuditErrorCode.INSUFFICIENT_INSTANCES

    def test_ragged_rows_from_padded_matrix(self):
        padded = np.array([[0.1, 0.2, np.nan], [0.3, 0.4, 0.5]])
        signals = SignalSet(target_loss=[0.1, 0.3], shadow_in_losses=padded, shadow_out_losses=padded)
        assert [len(row) for row in signals.shadow_in_losses] == [2, 3]
        assert np.all(lira_scorer(signals) == 0.0)

    def test_offline_is_monotone_in_target_loss(self):
        out_losses = [[1.0, 1.2, 0.8]] * 3
        scores = lira_offline_scorer(SignalSet(target_loss=[0.1, 1.0, 2.0], shadow_out_losses=out_losses))
        assert scores[0] > scores[1] > scores[2]
        assert abs(scores[1] - math.log(0.5)) < 1e-12


class TestReference(unittest.TestCase):
    def test_examples(self):
        signals = SignalSet(
            target_confidence=[0.95, 0.1, 0.7],
            shadow_confidences=[[0.6, 0.7, 0.8, 0.9]] * 3,
        )
        assert reference_scorer(signals).tolist() == [1.0, 0.0, 0.5]

    def test_lattice(self):
        rng = np.random.default_rng(10)
        m = 7
        scores = reference_scorer(SignalSet(target_confidence=rng.random(100), shadow_confidences=rng.random((100, m))))
        assert np.all(np.isin(scores, np.arange(m + 1) / m))

    def test_empty_shadow_list(self):
        signals = SignalSet(target_confidence=[0.5], shadow_confidences=[[]])
        with self.assertRaises(AuditError) as ctx:
            reference_scorer(signals)
        assert ctx.exception.code == AuditErrorCode.MISSING_SIGNAL


class TestScoreBundle(unittest.TestCase):
    def test_adds_one_matrix_per_scorer(self):
        bundle = generate(SimConfig(n_samples=300, n_attacks=2, n_instances=3, n_shadow_models=4, seed=5))
        assert instance_labels(bundle) == ["s0", "s1", "s2"]
        scored = score_bundle(bundle, SCORERS, prefix="scored_")
        for name in SCORERS:
            matrix = scored.attacks[f"scored_{name}"]
            assert matrix.values.shape == (3, 300)
            assert matrix.seed_labels == ("s0", "s1", "s2")
            assert np.all(np.isfinite(matrix.values))
        assert scored.attack_names[:2] == bundle.attack_names

    def test_noise_free_signals_give_consistent_scorers(self):
        bundle = generate(SimConfig(n_samples=300, n_attacks=1, n_instances=3, instance_noise_sigma=0.0, seed=6))
        scored = score_bundle(bundle, SCORERS)
        for name in SCORERS:
            pm = predict_at_fpr(scored.ground_truth, scored.attacks[name], 0.1)
            assert consistency(pm, scored.ground_truth) == 1.0

    def test_unknown_scorer(self):
        bundle = generate(SimConfig(n_samples=50, n_attacks=1, n_instances=1, seed=1))
        with self.assertRaises(AuditError) as ctx:
            score_bundle(bundle, ["nope"])
        assert ctx.exception.code == AuditErrorCode.INVALID_CONFIG


if __name__ == "__main__":
    unittest.main()
