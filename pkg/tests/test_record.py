import unittest

import numpy as np

from mia.record import (
    ExperimentBundle,
    GroundTruth,
    PredictionMatrix,
    SampleSet,
    ScoreMatrix,
    member_balance,
    validate_bundle,
)
from mia.util import AuditError, AuditErrorCode


def small_bundle(labels=(1, 1, 0, 0), scores=None, **kwargs) -> ExperimentBundle:
    scores = [[0.9, 0.8, 0.2, 0.1], [0.7, 0.9, 0.3, 0.4]] if scores is None else scores
    return ExperimentBundle(
        ground_truth=GroundTruth(np.array(labels)),
        attacks={"lira": ScoreMatrix("lira", scores, ["s0", "s1"])},
        **kwargs,
    )


class TestValidateBundle(unittest.TestCase):
    def test_valid_bundle(self):
        assert validate_bundle(small_bundle()) == []

    def test_ground_truth_length_mismatch(self):
        violations = validate_bundle(small_bundle(labels=(1, 1, 0)))
        assert len(violations) == 1
        assert violations[0].message == "length mismatch: gt=3, scores=4"
        assert violations[0].type_name == "ScoreMatrix"

    def test_nan_score(self):
        scores = [[0.9, 0.8, 0.2, 0.1], [0.7, 0.9, float("nan"), 0.4]]
        violations = validate_bundle(small_bundle(scores=scores))
        assert len(violations) == 1
        assert violations[0].index == ["lira", 1, 2]
        assert "lira" in violations[0].message
        assert "row 1, column 2" in violations[0].message

    def test_single_class(self):
        violations = validate_bundle(small_bundle(labels=(1, 1, 1, 1)))
        assert [v.message for v in violations] == ["both classes must be present"]

    def test_canary_must_be_member(self):
        violations = validate_bundle(small_bundle(canary_mask=np.array([1, 0, 1, 0])))
        assert len(violations) == 1
        assert violations[0].field == "canary_mask"
        assert violations[0].index == 2

    def test_duplicate_seed_labels(self):
        bundle = ExperimentBundle(
            ground_truth=GroundTruth(np.array([1, 0])),
            attacks={"a": ScoreMatrix("a", [[0.1, 0.2], [0.3, 0.4]], ["s0", "s0"])},
        )
        violations = validate_bundle(bundle)
        assert [v.field for v in violations] == ["seed_labels"]

    def test_ragged_signal_padding_is_allowed(self):
        signals = {"shadow_out_losses": np.array([[0.1, np.nan], [0.2, 0.3], [0.1, 0.1], [0.5, np.nan]])}
        assert validate_bundle(small_bundle(signals=signals)) == []
        signals = {"target_loss": np.array([0.1, np.inf, 0.2, 0.3])}
        assert len(validate_bundle(small_bundle(signals=signals))) == 1

    def test_validation_is_idempotent(self):
        bundle = small_bundle(labels=(1, 1, 0))
        assert validate_bundle(bundle) == validate_bundle(bundle)


class TestTypes(unittest.TestCase):
    def test_matrices_are_read_only(self):
        matrix = ScoreMatrix("a", [[0.1, 0.2]], ["s0"])
        with self.assertRaises(ValueError):
            matrix.values[0, 0] = 1.0
        gt = GroundTruth(np.array([1, 0]))
        with self.assertRaises(ValueError):
            gt.labels[0] = 0

    def test_score_matrix_head(self):
        matrix = ScoreMatrix("a", [[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]], ["x", "y", "z"])
        head = matrix.head(2)
        assert head.n_instances == 2
        assert head.seed_labels == ("x", "y")

    def test_prediction_matrix_reorder(self):
        pm = PredictionMatrix("a", [[1, 0], [0, 1]], 0.1, [0.0, 1.0], [0.5, 0.2])
        reordered = pm.reorder([1, 0])
        assert reordered.values.tolist() == [[0, 1], [1, 0]]
        assert reordered.achieved_fpr.tolist() == [1.0, 0.0]

    def test_sample_set(self):
        s = SampleSet(np.array([3, 1, 3]), 5)
        assert s.to_list() == [1, 3]
        assert len(s) == 2
        assert 3 in s and 2 not in s
        assert s.to_mask().tolist() == [False, True, False, True, False]
        assert SampleSet.from_mask([0, 1, 0, 1, 0]).to_list() == [1, 3]
        assert s.issubset(SampleSet(np.array([0, 1, 3]), 5))
        assert not s.issubset(SampleSet(np.array([1]), 5))

    def test_sample_set_outside_universe(self):
        for indices in ([0, 5], [-1, 2]):
            with self.assertRaises(AuditError) as raised:
                SampleSet(np.array(indices), 5)
            assert raised.exception.code == AuditErrorCode.UNIVERSE_MISMATCH
        assert SampleSet(np.array([], dtype=np.int64), 0).to_list() == []

    def test_fractional_flags_are_reported(self):
        violations = validate_bundle(small_bundle(labels=(1, 0.7, 0, 0)))
        assert [(v.field, v.index) for v in violations] == [("labels", 1)]
        assert "0.7" in violations[0].message

        violations = validate_bundle(small_bundle(canary_mask=np.array([0.5, 0, 0, 0])))
        assert [(v.field, v.index) for v in violations] == [("canary_mask", 0)]

        assert GroundTruth(np.array([1.0, 0.0])).labels.dtype == np.int64

    def test_restricted_to_keeps_order(self):
        bundle = small_bundle().with_attacks({"loss": ScoreMatrix("loss", [[1, 2, 3, 4]], ["0"])})
        assert bundle.attack_names == ["lira", "loss"]
        assert bundle.restricted_to(["loss"]).attack_names == ["loss"]

    def test_member_balance(self):
        assert member_balance(GroundTruth(np.array([1, 0, 0]))) == {
            "members": 1,
            "non_members": 2,
            "balanced": False,
        }


if __name__ == "__main__":
    unittest.main()
