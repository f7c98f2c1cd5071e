import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy.special import softmax

from .analysis import DEFAULT_COST_TABLE, Candidate, CostTable, confidence_margin, cost_pareto, kde, pca_project
from .disparity import (
    DetectionMode,
    SetBasis,
    basis_set,
    canary_disparity,
    consistency,
    convergence_curves,
    covered_samples,
    detection_frequency,
    method_similarity,
    shuffled_order,
    similarity_trend,
    unique_samples,
)
from .ensemble import (
    EnsembleSpec,
    EnsembleStrategy,
    RocCache,
    combination_sweeps,
    default_fpr_grid,
    ensemble_predictions,
    ensemble_roc_sweep,
    multi_instance_sweeps,
)
from .metrics import (
    auc,
    balanced_accuracy,
    instance_curves,
    precision,
    predict_at_fpr,
    tpr_at_fpr,
    true_positive_rate,
)
from .record import ExperimentBundle, SampleSet, member_balance
from .report import (
    average_reports,
    bundle_fingerprint,
    convergence_dict,
    format_number,
    round_numbers,
    similarity_dict,
    sweep_dict,
)
from .scorers import calibration_threshold
from .store.abstract import AbstractRunStore
from .store.sqlite_store import SqliteRunStore
from .util import AuditError, AuditErrorCode

DEFAULT_FPRS = (0.001, 0.01, 0.1, 0.2)
DEFAULT_READOUT_FPRS = (0.001, 0.01, 0.1)
LOGIT_SIGNAL = "target_logits"
MARGIN_GRID = tuple(float(x) for x in np.linspace(0.0, 1.0, 51))


def _float_list(section: Mapping, key: str, default: Sequence[float]) -> List[float]:
    try:
        values = [float(v) for v in section.get(key, default)]
    except (TypeError, ValueError):
        raise AuditError(AuditErrorCode.INVALID_CONFIG, f"{key} must be a list of numbers")
    if any(not 0 <= v <= 1 for v in values):
        raise AuditError(AuditErrorCode.INVALID_CONFIG, f"{key} entries must lie in [0, 1]")
    return values


def _optional_int(section: Mapping, key: str, minimum: int) -> Optional[int]:
    value = section.get(key)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise AuditError(AuditErrorCode.INVALID_CONFIG, f"{key} must be an integer >= {minimum}")
    return value


def _name_list(section: Mapping, key: str) -> Optional[List[str]]:
    value = section.get(key)
    if value is None:
        return None
    if isinstance(value, str) or not isinstance(value, list) or not all(isinstance(name, str) for name in value):
        raise AuditError(AuditErrorCode.INVALID_CONFIG, f"{key} must be a list of attack names, got {value!r}")
    return value


def _enum(kind, value, key: str):
    try:
        return kind(value)
    except ValueError:
        choices = ", ".join(member.value for member in kind)
        raise AuditError(AuditErrorCode.INVALID_CONFIG, f"{key} must be one of {choices}, got {value!r}")


class Auditor:
    def __init__(self, audit_config: Dict, run_store: Optional[AbstractRunStore] = None):
        self.log = logging.getLogger(__name__)
        analysis_config: Dict = audit_config.get("analysis") or {}
        ensemble_config: Dict = audit_config.get("ensemble") or {}

        # Target FPRs every instance is thresholded at; one report section per value
        self.fprs: List[float] = _float_list(analysis_config, "fprs", DEFAULT_FPRS)
        if len(self.fprs) == 0:
            raise AuditError(AuditErrorCode.INVALID_CONFIG, "fprs must not be empty")

        # Instances per attack; None uses the smallest instance count among the analyzed attacks
        self.n_instances: Optional[int] = _optional_int(analysis_config, "n_instances", 1)

        # tp-only restricts detected sets to true members, all keeps false positives too
        self.mode: DetectionMode = _enum(DetectionMode, analysis_config.get("mode", "tp-only"), "mode")

        # Seed for the instance order of convergence curves; None keeps the file order
        self.order_seed: Optional[int] = _optional_int(analysis_config, "order_seed", 0)

        # Attacks to analyze; None analyzes every attack in the bundle, in bundle order
        self.attacks: Optional[List[str]] = _name_list(analysis_config, "attacks")

        # FPRs at which TPR is read off ROC curves and ensemble envelopes
        self.readout_fprs: List[float] = _float_list(analysis_config, "readout_fprs", DEFAULT_READOUT_FPRS)

        # Ensemble defaults; the cli overrides each of these with its flags
        self.ensemble_strategies: List[EnsembleStrategy] = [
            _enum(EnsembleStrategy, s, "strategy")
            for s in ensemble_config.get("strategies", [s.value for s in EnsembleStrategy])
        ]
        self.ensemble_attacks: Optional[List[str]] = _name_list(ensemble_config, "attacks")
        self.ensemble_n_instances: Optional[int] = _optional_int(ensemble_config, "n_instances", 1)
        grid = ensemble_config.get("grid")
        self.ensemble_grid = default_fpr_grid() if grid is None else parse_grid(grid)

        # Sweeping every attack subset costs 2^m sweeps, so it is opt-in
        self.ensemble_combinations: bool = bool(ensemble_config.get("combinations", False))

        costs = audit_config.get("costs")
        self.cost_table: CostTable = DEFAULT_COST_TABLE if costs is None else CostTable.from_dict(costs)

        store_config: Dict = audit_config.get("store") or {}
        self.store: AbstractRunStore = run_store or SqliteRunStore(Path(store_config.get("db_path", "mia-runs.sqlite")))

    async def start(self):
        await self.store.connect()

    async def stop(self):
        await self.store.close()

    def _analyzed_attacks(self, bundle: ExperimentBundle, attacks: Optional[Sequence[str]]) -> List[str]:
        attacks = list(bundle.attack_names if attacks is None else attacks)
        for attack in attacks:
            if attack not in bundle.attacks:
                raise AuditError(
                    AuditErrorCode.UNKNOWN_ATTACK,
                    f"Unknown attack {attack}; bundle has {', '.join(bundle.attack_names)}.",
                )
        if len(attacks) == 0:
            raise AuditError(AuditErrorCode.INVALID_CONFIG, "no attacks to analyze")
        return attacks

    def _instance_count(self, bundle: ExperimentBundle, attacks: Sequence[str], requested: Optional[int]) -> int:
        available = min(bundle.attacks[attack].n_instances for attack in attacks)
        if requested is None:
            return available
        for attack in attacks:
            if bundle.attacks[attack].n_instances < requested:
                raise AuditError(
                    AuditErrorCode.INSUFFICIENT_INSTANCES,
                    f"Attack {attack} has {bundle.attacks[attack].n_instances} instances, {requested} requested.",
                )
        return requested

    def _bundle_summary(self, bundle: ExperimentBundle) -> Dict:
        return {
            "n_samples": bundle.n_samples,
            "fingerprint": bundle_fingerprint(bundle),
            "attacks": {name: matrix.n_instances for name, matrix in bundle.attacks.items()},
            "member_balance": member_balance(bundle.ground_truth),
            "has_canaries": bundle.canary_mask is not None,
        }

    def _instance_metrics(self, bundle: ExperimentBundle, attack: str, n_instances: int, curves) -> Dict:
        matrix = bundle.attacks[attack]
        instances = []
        for i in range(n_instances):
            curve = curves[i]
            threshold = calibration_threshold(matrix.values[i], bundle.ground_truth.labels)
            hits = (matrix.values[i] >= threshold) == bundle.ground_truth.members
            instances.append(
                {
                    "seed": matrix.seed_labels[i],
                    "auc": auc(curve),
                    "best_balanced_accuracy": float(np.max((curve.tprs + 1.0 - curve.fprs) / 2)),
                    "accuracy_threshold": {"threshold": threshold, "accuracy": float(np.mean(hits))},
                    "tpr_at": {
                        format_number(fpr): tpr_at_fpr(bundle.ground_truth, matrix.values[i], fpr, curve)
                        for fpr in self.readout_fprs
                    },
                }
            )
        aucs = [entry["auc"] for entry in instances]
        return {
            "instances": instances,
            "mean_auc": float(np.mean(aucs)),
            "max_auc": float(np.max(aucs)),
            "best_instance": instances[int(np.argmax(aucs))]["seed"],
        }

    def _target_logits(self, bundle: ExperimentBundle) -> Optional[np.ndarray]:
        logits = bundle.signals.get(LOGIT_SIGNAL)
        if logits is None:
            return None
        if logits.ndim != 2 or logits.shape[1] < 2 or not np.all(np.isfinite(logits)):
            self.log.warning(f"Ignoring {LOGIT_SIGNAL}: expected a finite matrix with at least 2 classes")
            return None
        return logits

    def _unique_pca(self, logits: np.ndarray, unique: SampleSet) -> Optional[Dict]:
        k = min(2, logits.shape[1])
        if len(unique) <= k:
            return None
        selected = logits[unique.indices]
        try:
            pca = pca_project(selected, k)
        except AuditError as e:
            if e.code != AuditErrorCode.NON_CONVERGENCE:
                raise
            self.log.warning(f"PCA of {len(unique)} unique samples skipped: {e.message}")
            return None
        return {
            "n": len(unique),
            "centroid": selected.mean(axis=0).tolist(),
            "components": pca.components.tolist(),
            "eigenvalues": pca.eigenvalues.tolist(),
            "explained_variance_ratio": pca.explained_variance_ratio.tolist(),
        }

    def _margin_density(self, margins: np.ndarray, mask: np.ndarray) -> Dict:
        selected = margins[mask]
        entry: Dict = {"n": int(selected.shape[0]), "mean": float(np.mean(selected)) if selected.size else None}
        try:
            entry["density"] = kde(selected, MARGIN_GRID).tolist()
        except AuditError as e:
            if e.code != AuditErrorCode.DEGENERATE_SAMPLE:
                raise
            entry["density"] = None
        return entry

    def run_analysis(
        self,
        bundle: ExperimentBundle,
        fprs: Optional[Sequence[float]] = None,
        n_instances: Optional[int] = None,
        mode: Optional[DetectionMode] = None,
        attacks: Optional[Sequence[str]] = None,
        order_seed: Optional[int] = None,
    ) -> Dict:
        """
        Thresholds every instance of every analyzed attack at each target FPR and reports consistency,
        convergence of coverage and stability, cross-attack similarity, unique and covered samples, and the
        per-instance metrics they rest on. Bundles carrying target logits also get a PCA of each attack's unique
        samples and confidence-margin densities of its covered and missed members. Arguments override the
        configured values.
        """
        fprs = list(self.fprs if fprs is None else fprs)
        mode = self.mode if mode is None else _enum(DetectionMode, mode, "mode")
        order_seed = self.order_seed if order_seed is None else order_seed
        attacks = self._analyzed_attacks(bundle, self.attacks if attacks is None else attacks)
        n = self._instance_count(bundle, attacks, self.n_instances if n_instances is None else n_instances)
        scoped = bundle.restricted_to(attacks)
        gt = scoped.ground_truth
        order = list(range(n)) if order_seed is None else shuffled_order(n, order_seed)

        curves = {attack: instance_curves(gt, scoped.attacks[attack], n) for attack in attacks}
        logits = self._target_logits(scoped)
        margins = None if logits is None else confidence_margin(softmax(logits, axis=1))
        report: Dict = {
            "kind": "analysis",
            "bundle": self._bundle_summary(scoped),
            "config": {
                "fprs": fprs,
                "n_instances": n,
                "mode": mode.value,
                "attacks": attacks,
                "instance_order": order,
                "readout_fprs": self.readout_fprs,
            },
            "metrics": {attack: self._instance_metrics(scoped, attack, n, curves[attack]) for attack in attacks},
            "fpr_levels": [],
        }
        if margins is not None:
            report["margin_grid"] = list(MARGIN_GRID)

        for beta in fprs:
            level: Dict = {"beta": beta, "attacks": {}, "similarity": {}}
            for attack in attacks:
                pm = predict_at_fpr(gt, scoped.attacks[attack], beta, n, curves[attack])
                coverage = basis_set(pm, gt, SetBasis.COVERAGE, mode)
                stability = basis_set(pm, gt, SetBasis.STABILITY, mode)
                result = {
                    "consistency": consistency(pm, gt, mode) if n > 1 else None,
                    "achieved_fpr": list(pm.achieved_fpr),
                    "thresholds": list(pm.thresholds),
                    "tpr": [true_positive_rate(gt, row) for row in pm.values],
                    "precision": [precision(gt, row) for row in pm.values],
                    "balanced_accuracy": [balanced_accuracy(gt, row) for row in pm.values],
                    "coverage_size": len(coverage),
                    "stability_size": len(stability),
                    "detection_histogram": np.bincount(
                        detection_frequency(pm, gt, mode), minlength=n + 1
                    ).tolist(),
                    "convergence": convergence_dict(convergence_curves(pm, gt, mode, order)),
                    "covered": covered_samples(scoped, attack, n, beta, mode).to_list(),
                }
                if len(attacks) > 1:
                    unique = unique_samples(scoped, attack, SetBasis.STABILITY, n, beta, mode)
                    result["unique"] = unique.to_list()
                    result["unique_size"] = len(unique)
                    if logits is not None:
                        result["unique_pca"] = self._unique_pca(logits, unique)
                if margins is not None:
                    covered = coverage.to_mask() & gt.members
                    result["margin_kde"] = {
                        "covered": self._margin_density(margins, covered),
                        "missed": self._margin_density(margins, gt.members & ~covered),
                    }
                if any(p is None for p in result["precision"]):
                    self.log.warning(f"Precision undefined for {attack} at FPR {beta}: an instance predicts nothing")
                level["attacks"][attack] = result
            for basis in SetBasis:
                level["similarity"][basis.value] = similarity_dict(method_similarity(scoped, basis, n, beta, mode))
            if scoped.canary_mask is not None:
                level["canary"] = {attack: canary_disparity(scoped, attack, beta, n, mode) for attack in attacks}
            report["fpr_levels"].append(level)
            self.log.info(f"Analyzed {len(attacks)} attacks x {n} instances at FPR {beta}")

        if len(attacks) > 1:
            report["similarity_trend"] = {
                basis.value: similarity_trend(scoped, fprs, basis, n, mode)
                for basis in (SetBasis.COVERAGE, SetBasis.STABILITY)
            }
        return report

    def ensemble_spec(
        self,
        bundle: ExperimentBundle,
        attacks: Optional[Sequence[str]] = None,
        n_instances: Optional[int] = None,
        grid: Optional[Sequence[float]] = None,
        strategy: EnsembleStrategy = EnsembleStrategy.STABILITY,
    ) -> EnsembleSpec:
        attacks = self._analyzed_attacks(bundle, self.ensemble_attacks if attacks is None else attacks)
        requested = self.ensemble_n_instances if n_instances is None else n_instances
        n = self._instance_count(bundle, attacks, requested)
        spec = EnsembleSpec(strategy, attacks, n, self.ensemble_grid if grid is None else grid)
        spec.validate_against(bundle)
        return spec

    def _single_instance_baseline(self, bundle: ExperimentBundle, spec: EnsembleSpec) -> Dict:
        baseline = {}
        for attack in spec.attacks:
            curves = instance_curves(bundle.ground_truth, bundle.attacks[attack], spec.n_instances)
            baseline[attack] = self._instance_metrics(bundle, attack, spec.n_instances, curves)
        return baseline

    def _nesting_check(self, bundle: ExperimentBundle, spec: EnsembleSpec, cache: RocCache) -> Dict:
        violations = []
        for beta in spec.fpr_grid:
            predicted = {
                strategy: ensemble_predictions(bundle, replace(spec, strategy=strategy), beta, cache) == 1
                for strategy in EnsembleStrategy
            }
            stability = predicted[EnsembleStrategy.STABILITY]
            majority = predicted[EnsembleStrategy.MAJORITY]
            coverage = predicted[EnsembleStrategy.COVERAGE]
            if np.any(stability & ~majority) or np.any(majority & ~coverage):
                violations.append(beta)
        if violations:
            self.log.error(f"Ensemble nesting violated at {len(violations)} grid points")
        return {"holds": len(violations) == 0, "violations": violations}

    def run_ensemble(
        self,
        bundle: ExperimentBundle,
        spec: EnsembleSpec,
        strategies: Optional[Sequence[EnsembleStrategy]] = None,
        combinations: Optional[bool] = None,
    ) -> Dict:
        """
        Sweeps the ensemble of ``spec`` over its FPR grid once per strategy, next to the per-attack
        multi-instance sweeps and the single-instance baselines they are compared against.
        """
        spec.validate_against(bundle)
        strategies = [EnsembleStrategy(s) for s in (self.ensemble_strategies if strategies is None else strategies)]
        combinations = self.ensemble_combinations if combinations is None else combinations
        cache = RocCache(bundle)

        report: Dict = {
            "kind": "ensemble",
            "bundle": self._bundle_summary(bundle.restricted_to(spec.attacks)),
            "spec": {
                "attacks": list(spec.attacks),
                "n_instances": spec.n_instances,
                "grid": {"low": spec.fpr_grid[0], "high": spec.fpr_grid[-1], "count": len(spec.fpr_grid)},
                "readout_fprs": self.readout_fprs,
            },
            "single_instance": self._single_instance_baseline(bundle, spec),
            "strategies": {},
        }
        for strategy in strategies:
            strategy_spec = replace(spec, strategy=strategy)
            full = ensemble_roc_sweep(bundle, strategy_spec, cache)
            result = {
                "full": sweep_dict(full, self.readout_fprs),
                "multi_instance": {
                    attack: sweep_dict(sweep, self.readout_fprs)
                    for attack, sweep in multi_instance_sweeps(bundle, strategy_spec, cache).items()
                },
            }
            if combinations and len(spec.attacks) > 1:
                result["combinations"] = {
                    "+".join(subset): sweep_dict(sweep, self.readout_fprs)
                    for subset, sweep in combination_sweeps(bundle, strategy_spec, cache).items()
                }
            report["strategies"][strategy.value] = result
            self.log.info(f"{strategy.value} ensemble of {', '.join(spec.attacks)}: AUC {full.auc:.4f}")
        report["nesting"] = self._nesting_check(bundle, spec, cache)
        return report

    def run_cost(
        self, performance: Mapping[Candidate, float], candidates: Optional[Sequence[Candidate]] = None
    ) -> Dict:
        entries = cost_pareto(self.cost_table, performance, candidates)
        return {
            "kind": "cost",
            "cost_table": self.cost_table.to_dict(),
            "candidates": [
                {
                    "attacks": list(entry.attacks),
                    "n_instances": entry.n_instances,
                    "cost": entry.cost,
                    "performance": entry.performance,
                    "on_frontier": entry.on_frontier,
                }
                for entry in entries
            ],
        }

    async def record_run(self, report: Dict, label: str) -> int:
        if report.get("kind") != "analysis":
            raise AuditError(AuditErrorCode.INVALID_CONFIG, "only analysis reports can be recorded")
        run_id = await self.store.add_run(
            label, report["bundle"]["fingerprint"], round_numbers(report), int(time.time())
        )
        self.log.info(f"Recorded run {run_id} under label {label}")
        return run_id

    async def history(self, label: str) -> Dict:
        runs = await self.store.get_runs(label)
        if len(runs) == 0:
            raise AuditError(AuditErrorCode.INVALID_CONFIG, f"No stored runs under label {label}.")
        averaged = average_reports([run.report for run in runs])
        averaged["label"] = label
        averaged["run_ids"] = [run.run_id for run in runs]
        return averaged


def parse_grid(grid) -> tuple:
    """
    ``lo,hi,count`` (string or 3-sequence) into a log-spaced FPR grid.
    """
    parts = grid.split(",") if isinstance(grid, str) else list(grid)
    if len(parts) != 3:
        raise AuditError(AuditErrorCode.INVALID_CONFIG, f"grid must be lo,hi,count, got {grid!r}")
    try:
        low, high, count = float(parts[0]), float(parts[1]), int(parts[2])
    except (TypeError, ValueError):
        raise AuditError(AuditErrorCode.INVALID_CONFIG, f"grid must be lo,hi,count, got {grid!r}")
    return default_fpr_grid(low, high, count)
