import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import combinations
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .metrics import RocCurve, adjust_fpr, instance_curves
from .record import ExperimentBundle, PredictionMatrix
from .util import AuditError, AuditErrorCode

log = logging.getLogger(__name__)

DEFAULT_GRID_LOW = 1e-6
DEFAULT_GRID_HIGH = 1.0
DEFAULT_GRID_COUNT = 100


class EnsembleStrategy(str, Enum):
    STABILITY = "stability"
    COVERAGE = "coverage"
    MAJORITY = "majority"


def default_fpr_grid(
    low: float = DEFAULT_GRID_LOW, high: float = DEFAULT_GRID_HIGH, count: int = DEFAULT_GRID_COUNT
) -> Tuple[float, ...]:
    if not 0 < low < high <= 1 or count < 2:
        raise AuditError(AuditErrorCode.INVALID_CONFIG, f"invalid grid {low},{high},{count}")
    grid = np.logspace(np.log10(low), np.log10(high), count)
    # logspace can land a hair off the exact endpoints
    grid[0], grid[-1] = low, high
    return tuple(float(beta) for beta in grid)


@dataclass(frozen=True)
class EnsembleSpec:
    strategy: EnsembleStrategy
    attacks: Sequence[str]
    n_instances: int
    fpr_grid: Sequence[float] = field(default_factory=default_fpr_grid)

    def __post_init__(self):
        object.__setattr__(self, "strategy", EnsembleStrategy(self.strategy))
        object.__setattr__(self, "attacks", tuple(self.attacks))
        object.__setattr__(self, "fpr_grid", tuple(float(beta) for beta in self.fpr_grid))

    @classmethod
    def from_dict(cls, config: Mapping) -> "EnsembleSpec":
        known = {"strategy", "attacks", "n_instances", "fpr_grid"}
        unknown = sorted(set(config) - known)
        if unknown:
            raise AuditError(AuditErrorCode.INVALID_CONFIG, f"Unknown EnsembleSpec fields: {', '.join(unknown)}")
        attacks = config.get("attacks")
        names_ok = isinstance(attacks, Sequence) and all(isinstance(name, str) for name in attacks)
        if isinstance(attacks, str) or not names_ok:
            raise AuditError(AuditErrorCode.INVALID_CONFIG, f"attacks must be a list of attack names, got {attacks!r}")
        n_instances = config.get("n_instances")
        if isinstance(n_instances, bool) or not isinstance(n_instances, int):
            raise AuditError(AuditErrorCode.INVALID_CONFIG, f"n_instances must be an integer, got {n_instances!r}")
        try:
            return cls(**dict(config))
        except (TypeError, ValueError) as e:
            raise AuditError(AuditErrorCode.INVALID_CONFIG, f"Invalid ensemble spec: {e}")

    def validate(self):
        if self.n_instances < 1:
            raise AuditError(AuditErrorCode.INVALID_CONFIG, "n_instances must be at least 1")
        if len(self.attacks) == 0:
            raise AuditError(AuditErrorCode.INVALID_CONFIG, "an ensemble needs at least one attack")
        grid = np.asarray(self.fpr_grid)
        if len(grid) == 0 or np.any(grid <= 0) or np.any(grid > 1) or np.any(np.diff(grid) <= 0):
            raise AuditError(AuditErrorCode.INVALID_CONFIG, "fpr_grid must be strictly increasing within (0, 1]")
        if self.strategy == EnsembleStrategy.MAJORITY and self.n_instances % 2 == 0:
            log.warning(f"Majority vote over an even number of instances ({self.n_instances}); ties are non-members")

    def validate_against(self, bundle: ExperimentBundle):
        self.validate()
        for attack in self.attacks:
            if attack not in bundle.attacks:
                raise AuditError(
                    AuditErrorCode.UNKNOWN_ATTACK,
                    f"Unknown attack {attack}; bundle has {', '.join(bundle.attack_names)}.",
                )
            if bundle.attacks[attack].n_instances < self.n_instances:
                raise AuditError(
                    AuditErrorCode.INSUFFICIENT_INSTANCES,
                    f"Attack {attack} has {bundle.attacks[attack].n_instances} instances, "
                    f"{self.n_instances} requested.",
                )


def multi_instance_combine(pm, strategy: EnsembleStrategy) -> np.ndarray:
    rows = pm.values if isinstance(pm, PredictionMatrix) else np.asarray(pm)
    if rows.ndim == 1:
        rows = rows.reshape(1, -1)
    if rows.shape[0] < 1:
        raise AuditError(AuditErrorCode.INSUFFICIENT_INSTANCES, "at least one instance is required")
    predicted = rows == 1
    strategy = EnsembleStrategy(strategy)
    if strategy == EnsembleStrategy.STABILITY:
        combined = np.all(predicted, axis=0)
    elif strategy == EnsembleStrategy.COVERAGE:
        combined = np.any(predicted, axis=0)
    else:
        # Strictly more than half: an even split is a non-member
        combined = 2 * np.sum(predicted, axis=0) > rows.shape[0]
    return combined.astype(np.int8)


def multi_attack_union(per_attack_preds: Sequence) -> np.ndarray:
    if len(per_attack_preds) == 0:
        raise AuditError(AuditErrorCode.INSUFFICIENT_INSTANCES, "at least one attack is required")
    lengths = {len(preds) for preds in per_attack_preds}
    if len(lengths) > 1:
        raise AuditError(AuditErrorCode.LENGTH_MISMATCH, f"length mismatch between attacks: {sorted(lengths)}")
    combined = np.zeros(lengths.pop(), dtype=bool)
    for preds in per_attack_preds:
        combined |= np.asarray(preds) == 1
    return combined.astype(np.int8)


@dataclass(frozen=True)
class SweepPoint:
    beta: float
    fpr: float
    tpr: float
    false_positives: int
    true_positives: int


@dataclass(frozen=True)
class EnsembleSweep:
    strategy: EnsembleStrategy
    attacks: Tuple[str, ...]
    n_instances: int
    points: Tuple[SweepPoint, ...]  # raw sweep, in grid order
    envelope: Tuple[Tuple[float, float], ...]  # (fpr, tpr) Pareto staircase with (0,0) and (1,1) anchors
    auc: float  # on the envelope
    raw_auc: float  # on every raw point sorted by fpr, anchored

    def tpr_at(self, fpr: float) -> float:
        """
        Envelope TPR at ``fpr``, linear between envelope points like the AUC trapezoid. Mixing the two
        neighbouring ensemble predictions at random reaches every point on that segment.
        """
        best: Dict[float, float] = {}
        for f, t in self.envelope:
            best[f] = max(t, best.get(f, 0.0))
        fprs = sorted(best)
        return float(np.interp(fpr, fprs, [best[f] for f in fprs]))

    def best_balanced_accuracy(self) -> float:
        return max((p.tpr + 1.0 - p.fpr) / 2 for p in self.points)


def _trapezoid(curve: Sequence[Tuple[float, float]]) -> float:
    xs = np.array([point[0] for point in curve])
    ys = np.array([point[1] for point in curve])
    return float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2))


def pareto_envelope(points: Sequence[Tuple[float, float]]) -> Tuple[Tuple[float, float], ...]:
    """
    Upper-left staircase of (fpr, tpr) pairs: a point survives unless another has fpr <= and tpr >= with one
    strict. The (0, 0) and (1, 1) anchors are always part of it.
    """
    candidates = sorted(set(points) | {(1.0, 1.0)}, key=lambda p: (p[0], -p[1]))
    envelope: List[Tuple[float, float]] = [(0.0, 0.0)]
    best_tpr = 0.0
    for fpr, tpr in candidates:
        if tpr > best_tpr:
            envelope.append((fpr, tpr))
            best_tpr = tpr
    if envelope[-1] != (1.0, 1.0):
        envelope.append((1.0, 1.0))
    return tuple(envelope)


class RocCache:
    """
    ROC curves per attack instance, computed once and reused for every grid point.
    """

    def __init__(self, bundle: ExperimentBundle):
        self.bundle = bundle
        self.curves: Dict[str, Tuple[RocCurve, ...]] = {}

    def predictions(self, attack: str, n_instances: int, beta: float) -> np.ndarray:
        if attack not in self.curves or len(self.curves[attack]) < n_instances:
            self.curves[attack] = instance_curves(self.bundle.ground_truth, self.bundle.attacks[attack], n_instances)
        values = self.bundle.attacks[attack].values
        return np.stack(
            [
                adjust_fpr(self.bundle.ground_truth, values[i], beta, self.curves[attack][i]).predictions
                for i in range(n_instances)
            ]
        )


def ensemble_predictions(
    bundle: ExperimentBundle, spec: EnsembleSpec, beta: float, cache: Optional[RocCache] = None
) -> np.ndarray:
    cache = cache or RocCache(bundle)
    per_attack = [
        multi_instance_combine(cache.predictions(attack, spec.n_instances, beta), spec.strategy)
        for attack in spec.attacks
    ]
    return multi_attack_union(per_attack)


def ensemble_roc_sweep(
    bundle: ExperimentBundle, spec: EnsembleSpec, cache: Optional[RocCache] = None
) -> EnsembleSweep:
    """
    Thresholds every instance at each base FPR of the grid, combines instances then attacks, and records the
    empirical (fpr, tpr) of the ensemble prediction.
    """
    spec.validate_against(bundle)
    cache = cache or RocCache(bundle)
    member = bundle.ground_truth.labels == 1
    n_members, n_non_members = int(np.count_nonzero(member)), int(np.count_nonzero(~member))

    points: List[SweepPoint] = []
    for beta in spec.fpr_grid:
        predicted = ensemble_predictions(bundle, spec, beta, cache) == 1
        tp = int(np.count_nonzero(predicted & member))
        fp = int(np.count_nonzero(predicted & ~member))
        points.append(SweepPoint(beta, fp / n_non_members, tp / n_members, fp, tp))

    pairs = [(p.fpr, p.tpr) for p in points]
    envelope = pareto_envelope(pairs)
    raw = sorted(set(pairs) | {(0.0, 0.0), (1.0, 1.0)})
    log.debug(f"Swept {spec.strategy.value} ensemble over {len(points)} grid points for {', '.join(spec.attacks)}")
    return EnsembleSweep(
        strategy=spec.strategy,
        attacks=tuple(spec.attacks),
        n_instances=spec.n_instances,
        points=tuple(points),
        envelope=envelope,
        auc=_trapezoid(envelope),
        raw_auc=_trapezoid(raw),
    )


def multi_instance_sweeps(
    bundle: ExperimentBundle, spec: EnsembleSpec, cache: Optional[RocCache] = None
) -> Dict[str, EnsembleSweep]:
    """
    Per-attack sweeps without the multi-attack union.
    """
    cache = cache or RocCache(bundle)
    return {
        attack: ensemble_roc_sweep(bundle, replace(spec, attacks=(attack,)), cache)
        for attack in spec.attacks
    }


def combination_sweeps(
    bundle: ExperimentBundle, spec: EnsembleSpec, cache: Optional[RocCache] = None
) -> Dict[Tuple[str, ...], EnsembleSweep]:
    cache = cache or RocCache(bundle)
    sweeps: Dict[Tuple[str, ...], EnsembleSweep] = {}
    for size in range(1, len(spec.attacks) + 1):
        for subset in combinations(spec.attacks, size):
            sweeps[subset] = ensemble_roc_sweep(
                bundle, EnsembleSpec(spec.strategy, subset, spec.n_instances, spec.fpr_grid), cache
            )
    return sweeps
