import unittest

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import norm

from mia.analysis import (
    DEFAULT_COST_TABLE,
    CostTable,
    compute_cost,
    confidence_margin,
    cost_pareto,
    kde,
    pca_project,
    silverman_bandwidth,
)
from mia.util import AuditError, AuditErrorCode


def rotated_data(n: int = 2000, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return (rng.normal(size=(n, 3)) * np.array([3.0, 2.0, 1.0])) @ q.T


class TestPca(unittest.TestCase):
    def test_points_on_a_line(self):
        data = np.zeros((10, 3))
        data[:, 0] = np.arange(10)
        result = pca_project(data, k=1)
        assert abs(result.explained_variance_ratio[0] - 1.0) < 1e-12
        assert np.allclose(result.components[0], [1.0, 0.0, 0.0])
        assert np.allclose(result.projections[:, 0], np.arange(10) - 4.5)

    def test_matches_dense_eigendecomposition(self):
        data = rotated_data()
        result = pca_project(data, k=2)
        centered = data - data.mean(axis=0)
        values, vectors = np.linalg.eigh(centered.T @ centered / (len(data) - 1))
        for i in range(2):
            expected = values[::-1][i]
            assert abs(result.eigenvalues[i] - expected) < 1e-8 * expected
            assert abs(abs(result.components[i] @ vectors[:, ::-1][:, i]) - 1.0) < 1e-8

    def test_components_are_orthonormal_and_signed(self):
        result = pca_project(rotated_data(seed=1), k=3)
        assert np.allclose(result.components @ result.components.T, np.eye(3), atol=1e-8)
        for component in result.components:
            assert component[np.argmax(np.abs(component))] > 0
        assert result.explained_variance_ratio.sum() <= 1.0 + 1e-12
        assert np.all(np.diff(result.eigenvalues) <= 1e-9)

    def test_shift_invariance(self):
        data = rotated_data(n=500, seed=2)
        a = pca_project(data, k=2)
        b = pca_project(data + 100.0, k=2)
        assert np.allclose(a.projections, b.projections, atol=1e-8)

    def test_rank_deficient_data(self):
        data = np.outer(np.arange(20.0), [1.0, 2.0, 2.0])
        result = pca_project(data, k=2)
        assert result.eigenvalues[1] == 0.0
        assert abs(result.components[0] @ result.components[1]) < 1e-8
        assert abs(np.linalg.norm(result.components[1]) - 1.0) < 1e-12

    def test_invalid_input(self):
        with self.assertRaises(AuditError) as ctx:
            pca_project(np.ones((5, 2)), k=3)
        assert ctx.exception.code == AuditErrorCode.INVALID_CONFIG
        with self.assertRaises(AuditError) as ctx:
            pca_project(np.array([[1.0, np.nan], [0.0, 1.0], [2.0, 2.0]]), k=1)
        assert ctx.exception.code == AuditErrorCode.PARSE_ERROR

    def test_non_convergence(self):
        with self.assertRaises(AuditError) as ctx:
            pca_project(rotated_data(n=200, seed=3), k=1, max_iter=1)
        assert ctx.exception.code == AuditErrorCode.NON_CONVERGENCE
        assert ctx.exception.details == {"iterations": 1, "component": 0}


class TestMarginAndDensity(unittest.TestCase):
    def test_confidence_margin(self):
        assert np.allclose(confidence_margin([[0.7, 0.2, 0.1], [0.4, 0.4, 0.2]]), [0.5, 0.0])
        with self.assertRaises(AuditError) as ctx:
            confidence_margin([[1.0], [1.0]])
        assert ctx.exception.code == AuditErrorCode.INVALID_CONFIG

    def test_kde_explicit_bandwidth(self):
        density = kde([0.0, 1.0], [0.0], bandwidth=1.0)
        assert abs(density[0] - (norm.pdf(0.0) + norm.pdf(-1.0)) / 2) < 1e-15

    def test_kde_symmetry(self):
        values = np.array([-2.0, -1.0, -0.5, 0.5, 1.0, 2.0])
        points = np.linspace(0.0, 3.0, 7)
        assert np.allclose(kde(values, points), kde(values, -points), atol=1e-15)

    def test_kde_integrates_to_one(self):
        values = np.random.default_rng(4).normal(size=500)
        grid = np.linspace(-10.0, 10.0, 4001)
        assert trapezoid(kde(values, grid), grid) >= 0.99

    def test_kde_bimodal(self):
        rng = np.random.default_rng(5)
        values = np.concatenate([rng.normal(-5, 1, 300), rng.normal(5, 1, 300)])
        density = kde(values, [-5.0, 0.0, 5.0])
        assert density[1] < density[0] and density[1] < density[2]

    def test_kde_permutation_invariance(self):
        values = np.random.default_rng(6).normal(size=100)
        points = np.linspace(-3, 3, 50)
        assert np.array_equal(kde(values, points), kde(values[::-1], points))
        shuffled = np.random.default_rng(9).permutation(values)
        assert silverman_bandwidth(values) == silverman_bandwidth(shuffled)
        assert np.array_equal(kde(values, points), kde(shuffled, points))

    def test_kde_degenerate(self):
        for values in ([1.0, 1.0, 1.0], [2.0]):
            with self.assertRaises(AuditError) as ctx:
                kde(values, [0.0])
            assert ctx.exception.code == AuditErrorCode.DEGENERATE_SAMPLE

    def test_silverman_bandwidth(self):
        values = np.random.default_rng(7).normal(size=400)
        q75, q25 = np.percentile(values, [75, 25])
        expected = 0.9 * min(np.std(values, ddof=1), (q75 - q25) / 1.34) * 400 ** (-0.2)
        assert abs(silverman_bandwidth(values) - expected) < 1e-12


class TestCost(unittest.TestCase):
    def test_single_attack(self):
        assert compute_cost(DEFAULT_COST_TABLE, ["lira"], 1) == 580.0

    def test_linear_in_instances(self):
        for attacks in (["lira"], ["lira", "reference"], ["calibration", "loss_trajectory"]):
            one = compute_cost(DEFAULT_COST_TABLE, attacks, 1)
            assert compute_cost(DEFAULT_COST_TABLE, attacks, 7) == 7 * one

    def test_shared_shadow_models(self):
        assert compute_cost(DEFAULT_COST_TABLE, ["lira", "reference"], 1) == 580.0
        assert compute_cost(DEFAULT_COST_TABLE, ["reference"], 2) == 1080.0

    def test_unknown_attack(self):
        with self.assertRaises(AuditError) as ctx:
            compute_cost(DEFAULT_COST_TABLE, ["lira", "mystery"], 1)
        assert ctx.exception.code == AuditErrorCode.UNKNOWN_ATTACK

    def test_table_validation(self):
        config = {"per_instance": {"a": 1, "b": 2}, "shared": [{"attacks": ["b", "a"], "deduction": 1}]}
        assert CostTable.from_dict(config).to_dict() == {
            "per_instance": {"a": 1.0, "b": 2.0},
            "shared": [{"attacks": ["a", "b"], "deduction": 1.0}],
        }
        for config in [
            {"per_instance": {"a": -1}},
            {"per_instance": {"a": 1}, "shared": [{"attacks": ["a"], "deduction": 2}]},
            {"shared": []},
        ]:
            with self.assertRaises(AuditError) as ctx:
                CostTable.from_dict(config)
            assert ctx.exception.code == AuditErrorCode.INVALID_CONFIG
        with self.assertRaises(AuditError) as ctx:
            CostTable.from_dict({"per_instance": {"a": 1}, "shared": [{"attacks": ["a", "z"], "deduction": 0}]})
        assert ctx.exception.code == AuditErrorCode.UNKNOWN_ATTACK

    def test_frontier(self):
        performance = {
            (("lira",), 1): 0.7,
            (("lira", "reference"), 1): 0.75,
            (("calibration",), 4): 0.6,
        }
        entries = cost_pareto(DEFAULT_COST_TABLE, performance)
        assert [(e.attacks, e.on_frontier) for e in entries] == [
            (("calibration",), True),
            (("lira",), False),
            (("lira", "reference"), True),
        ]

    def test_frontier_has_no_dominated_entries(self):
        rng = np.random.default_rng(8)
        names = ["lira", "reference", "loss_trajectory", "calibration"]
        performance = {}
        for _ in range(60):
            attacks = tuple(sorted(str(a) for a in rng.choice(names, size=int(rng.integers(1, 5)), replace=False)))
            performance[(attacks, int(rng.integers(1, 9)))] = float(rng.random())
        entries = cost_pareto(DEFAULT_COST_TABLE, performance)

        def dominates(a, b):
            return a.cost <= b.cost and a.performance >= b.performance and (
                a.cost < b.cost or a.performance > b.performance
            )

        for entry in entries:
            dominated = any(dominates(other, entry) for other in entries)
            assert entry.on_frontier == (not dominated)
        assert [e.cost for e in entries] == sorted(e.cost for e in entries)

    def test_candidates_need_performance(self):
        with self.assertRaises(AuditError) as ctx:
            cost_pareto(DEFAULT_COST_TABLE, {(("lira",), 1): 0.7}, [(("lira",), 2)])
        assert ctx.exception.code == AuditErrorCode.INVALID_CONFIG
        with self.assertRaises(AuditError):
            cost_pareto(DEFAULT_COST_TABLE, {})


if __name__ == "__main__":
    unittest.main()
