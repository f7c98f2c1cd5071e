import unittest

import numpy as np

from mia.disparity import (
    DetectionMode,
    SetBasis,
    attack_predictions,
    canary_disparity,
    consistency,
    convergence_curves,
    coverage_set,
    covered_samples,
    detected_members,
    detection_frequency,
    jaccard,
    method_similarity,
    similarity_trend,
    stability_set,
    unique_samples,
)
from mia.record import ExperimentBundle, GroundTruth, PredictionMatrix, SampleSet, ScoreMatrix
from mia.scorers import score_bundle
from mia.simulator import SimConfig, generate
from mia.util import AuditError, AuditErrorCode


def sample_set(indices, universe=10) -> SampleSet:
    return SampleSet(np.array(indices, dtype=np.int64), universe)


def rows_from_sets(sets, universe) -> np.ndarray:
    rows = np.zeros((len(sets), universe), dtype=np.int8)
    for i, indices in enumerate(sets):
        rows[i, list(indices)] = 1
    return rows


class TestJaccard(unittest.TestCase):
    def test_examples(self):
        assert jaccard(sample_set([1, 2, 3]), sample_set([1, 2, 3])) == 1.0
        assert jaccard(sample_set([1, 2]), sample_set([3, 4])) == 0.0
        assert jaccard(sample_set([1, 2, 3]), sample_set([2, 3, 4])) == 0.5

    def test_two_empty_sets_are_identical(self):
        assert jaccard(sample_set([]), sample_set([])) == 1.0

    def test_universe_mismatch(self):
        with self.assertRaises(AuditError) as ctx:
            jaccard(sample_set([1], 10), sample_set([1], 11))
        assert ctx.exception.code == AuditErrorCode.UNIVERSE_MISMATCH


class TestDetectedSets(unittest.TestCase):
    def test_detected_members(self):
        gt = np.array([1, 0, 1, 0])
        assert detected_members([1, 1, 0, 0], gt).to_list() == [0]
        assert detected_members([1, 1, 0, 0], gt, DetectionMode.ALL_POSITIVES).to_list() == [0, 1]
        assert len(detected_members([0, 0, 0, 0], gt)) == 0

    def test_consistency_examples(self):
        gt = np.ones(3, dtype=np.int64)
        assert consistency(rows_from_sets([{0, 1}, {0, 1}, {0, 1}], 3), gt) == 1.0
        assert consistency(rows_from_sets([{0}, {1}, {2}], 3), gt) == 0.0
        value = consistency(rows_from_sets([{0, 1}, {1, 2}, {0, 1, 2}], 3), gt)
        assert abs(value - 5 / 9) < 1e-15

    def test_consistency_needs_two_instances(self):
        with self.assertRaises(AuditError) as ctx:
            consistency(rows_from_sets([{0}], 3), np.ones(3))
        assert ctx.exception.code == AuditErrorCode.INSUFFICIENT_INSTANCES

    def test_coverage_and_stability_examples(self):
        gt = np.ones(4, dtype=np.int64)
        assert coverage_set(rows_from_sets([{0}, {1}], 4), gt).to_list() == [0, 1]
        assert stability_set(rows_from_sets([{0, 1}, {1, 2}], 4), gt).to_list() == [1]
        single = rows_from_sets([{0, 3}], 4)
        assert coverage_set(single, gt).to_list() == stability_set(single, gt).to_list() == [0, 3]

    def test_set_algebra_invariants(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n_instances, n_samples = int(rng.integers(1, 7)), int(rng.integers(1, 30))
            rows = (rng.random((n_instances, n_samples)) < rng.random()).astype(np.int8)
            gt = rng.integers(0, 2, n_samples)
            mode = DetectionMode.TRUE_POSITIVES if rng.random() < 0.5 else DetectionMode.ALL_POSITIVES
            coverage = coverage_set(rows, gt, mode)
            stability = stability_set(rows, gt, mode)
            union, intersection = set(), None
            for row in rows:
                detected = detected_members(row, gt, mode)
                assert stability.issubset(detected)
                assert detected.issubset(coverage)
                members = set(detected.to_list())
                union |= members
                intersection = members if intersection is None else intersection & members
            assert set(coverage.to_list()) == union
            assert set(stability.to_list()) == intersection
            if n_instances > 1:
                # Adding an instance never shrinks coverage and never grows stability
                assert coverage_set(rows[:-1], gt, mode).issubset(coverage)
                assert stability.issubset(stability_set(rows[:-1], gt, mode))
                identical = len({tuple(detected_members(r, gt, mode).to_list()) for r in rows}) == 1
                assert (consistency(rows, gt, mode) == 1.0) == identical

    def test_detection_frequency(self):
        rows = rows_from_sets([{0, 1}, {1}, {1, 2}], 4)
        assert detection_frequency(rows, np.array([1, 1, 0, 1])).tolist() == [1, 3, 0, 0]


class TestConvergence(unittest.TestCase):
    def test_matches_prefix_recomputation(self):
        rng = np.random.default_rng(4)
        gt = rng.integers(0, 2, 80)
        gt[:2] = [0, 1]
        rows = (rng.random((6, 80)) < 0.3).astype(np.int8)
        pm = PredictionMatrix("a", rows, 0.1, np.zeros(6), np.zeros(6))
        order = [3, 0, 5, 1, 4, 2]
        curve = convergence_curves(pm, gt, DetectionMode.TRUE_POSITIVES, order)
        member = gt == 1
        for point in curve.points:
            prefix = rows[order[: point.k]] == 1
            union, intersection = prefix.any(axis=0), prefix.all(axis=0)
            assert point.coverage.tpr == np.sum(union & member) / np.sum(member)
            assert point.coverage.fpr == np.sum(union & ~member) / np.sum(~member)
            assert point.coverage.set_size == np.sum(union & member)
            assert point.stability.tpr == np.sum(intersection & member) / np.sum(member)
            assert point.stability.set_size == np.sum(intersection & member)
        tprs = [p.coverage.tpr for p in curve.points]
        assert tprs == sorted(tprs)
        stability_fprs = [p.stability.fpr for p in curve.points]
        assert stability_fprs == sorted(stability_fprs, reverse=True)

    def test_first_point_is_single_instance(self):
        gt = np.array([1, 1, 0, 0])
        pm = PredictionMatrix("a", [[1, 0, 1, 0], [1, 1, 0, 0]], 0.5, [0.5, 0.0], [0.0, 0.0])
        first = convergence_curves(pm, gt).points[0]
        assert first.coverage == first.stability
        assert first.coverage.tpr == 0.5
        assert first.coverage.fpr == 0.5
        assert first.coverage.precision == 0.5

    def test_empty_prediction_has_undefined_precision(self):
        pm = PredictionMatrix("a", [[0, 0, 0, 0]], 0.0, [0.0], [1.0])
        assert convergence_curves(pm, np.array([1, 1, 0, 0])).points[0].coverage.precision is None

    def test_order_must_be_permutation(self):
        pm = PredictionMatrix("a", [[1, 0], [0, 1]], 0.5, [0.0, 0.0], [0.0, 0.0])
        with self.assertRaises(AuditError) as ctx:
            convergence_curves(pm, np.array([1, 0]), instance_order=[0, 0])
        assert ctx.exception.code == AuditErrorCode.INVALID_CONFIG


def three_attack_bundle() -> ExperimentBundle:
    # At FPR 0 each attack flags exactly the members scoring above every non-member
    gt = GroundTruth(np.array([1, 1, 1, 0, 0, 0]))
    rows = {
        "a": [0.9, 0.9, 0.1, 0.5, 0.5, 0.5],
        "b": [0.1, 0.9, 0.1, 0.5, 0.5, 0.5],
        "c": [0.1, 0.1, 0.1, 0.5, 0.5, 0.5],
    }
    attacks = {name: ScoreMatrix(name, [row, row], ["s0", "s1"]) for name, row in rows.items()}
    return ExperimentBundle(ground_truth=gt, attacks=attacks)


class TestBundleLevel(unittest.TestCase):
    def test_unique_samples(self):
        bundle = three_attack_bundle()
        assert unique_samples(bundle, "a", beta=0.0).to_list() == [0]
        assert unique_samples(bundle, "b", beta=0.0).to_list() == []
        assert unique_samples(bundle, "c", beta=0.0).to_list() == []

    def test_unique_samples_needs_two_attacks(self):
        bundle = three_attack_bundle().restricted_to(["a"])
        with self.assertRaises(AuditError) as ctx:
            unique_samples(bundle, "a", beta=0.0)
        assert ctx.exception.code == AuditErrorCode.INSUFFICIENT_INSTANCES

    def test_unknown_attack(self):
        with self.assertRaises(AuditError) as ctx:
            covered_samples(three_attack_bundle(), "nope")
        assert ctx.exception.code == AuditErrorCode.UNKNOWN_ATTACK

    def test_covered_samples_is_coverage_set(self):
        bundle = three_attack_bundle()
        pm = attack_predictions(bundle, "a", 0.0)
        assert covered_samples(bundle, "a", beta=0.0).to_list() == coverage_set(pm, bundle.ground_truth).to_list()
        assert covered_samples(bundle, "c", beta=0.0).to_list() == []

    def test_identical_attacks_are_fully_similar(self):
        rng = np.random.default_rng(9)
        gt = GroundTruth(np.array([1, 0] * 50))
        values = rng.normal(size=(3, 100))
        bundle = ExperimentBundle(
            ground_truth=gt,
            attacks={name: ScoreMatrix(name, values, ["0", "1", "2"]) for name in ("x", "y")},
        )
        for basis in SetBasis:
            matrix = method_similarity(bundle, basis, 3, 0.1)
            assert matrix.values.tolist() == [[1.0, 1.0], [1.0, 1.0]]

    def test_similarity_is_symmetric_with_unit_diagonal(self):
        bundle = generate(SimConfig(n_samples=400, n_attacks=3, n_instances=3, emit_signals=False, seed=2))
        matrix = method_similarity(bundle, SetBasis.COVERAGE, 3, 0.1)
        assert np.array_equal(matrix.values, matrix.values.T)
        assert np.all(np.diag(matrix.values) == 1.0)
        assert np.all((matrix.values >= 0) & (matrix.values <= 1))

    def test_insufficient_instances_names_attack(self):
        with self.assertRaises(AuditError) as ctx:
            method_similarity(three_attack_bundle(), SetBasis.COVERAGE, 3, 0.1)
        assert ctx.exception.code == AuditErrorCode.INSUFFICIENT_INSTANCES
        assert "Attack a" in ctx.exception.message

    def test_unique_matches_set_difference(self):
        bundle = generate(SimConfig(n_samples=600, n_attacks=3, n_instances=4, emit_signals=False, seed=8))
        sets = {
            name: set(stability_set(attack_predictions(bundle, name, 0.1), bundle.ground_truth).to_list())
            for name in bundle.attack_names
        }
        for name in bundle.attack_names:
            others = set().union(*(s for other, s in sets.items() if other != name))
            assert set(unique_samples(bundle, name, beta=0.1).to_list()) == sets[name] - others

    def test_similarity_trend(self):
        bundle = generate(SimConfig(n_samples=800, n_attacks=3, n_instances=3, emit_signals=False, seed=1))
        trend = similarity_trend(bundle, [0.001, 0.01, 0.1, 0.2])
        assert trend["basis"] == "coverage"
        assert len(trend["mean_similarity"]) == 4
        slope = np.polyfit([0.001, 0.01, 0.1, 0.2], trend["mean_similarity"], 1)[0]
        assert abs(trend["slope"] - slope) < 1e-12

    def test_canary_disparity(self):
        bundle = generate(
            SimConfig(
                n_samples=1000,
                n_attacks=2,
                n_instances=3,
                canary_fraction=0.1,
                canary_strength=3.0,
                emit_signals=False,
                seed=4,
            )
        )
        result = canary_disparity(bundle, "attack_0", 0.1)
        assert result["canary"]["members"] == 50
        assert result["regular"]["members"] == 450
        assert result["canary"]["mean_detection_rate"] > result["regular"]["mean_detection_rate"]

    def test_loss_scorer_detects_canaries_first(self):
        bundle = generate(
            SimConfig(n_samples=1000, n_attacks=2, n_instances=3, canary_fraction=0.1, canary_strength=3.0, seed=4)
        )
        scored = score_bundle(bundle, ["loss"])
        result = canary_disparity(scored, "loss", 0.1)
        assert result["canary"]["members"] == 50
        # The loss scorer reads the shared target loss, so every instance agrees
        assert result["canary"]["consistency"] == 1.0
        assert result["canary"]["mean_detection_rate"] > 0.9
        assert result["canary"]["mean_detection_rate"] > result["regular"]["mean_detection_rate"]

    def test_canary_disparity_needs_mask(self):
        with self.assertRaises(AuditError) as ctx:
            canary_disparity(three_attack_bundle(), "a", 0.1)
        assert ctx.exception.code == AuditErrorCode.MISSING_SIGNAL


if __name__ == "__main__":
    unittest.main()
