import logging
from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from typing import Dict, List, Optional, Sequence

import numpy as np

from .metrics import Labels, as_labels, predict_at_fpr
from .record import ExperimentBundle, PredictionMatrix, SampleSet
from .util import AuditError, AuditErrorCode

log = logging.getLogger(__name__)


class DetectionMode(str, Enum):
    TRUE_POSITIVES = "tp-only"
    ALL_POSITIVES = "all"


class SetBasis(str, Enum):
    COVERAGE = "coverage"
    STABILITY = "stability"
    SINGLE_INSTANCE = "single-instance-members"


@dataclass(frozen=True)
class AggregatePoint:
    tpr: float
    fpr: float
    precision: Optional[float]
    set_size: int


@dataclass(frozen=True)
class ConvergencePoint:
    k: int
    coverage: AggregatePoint
    stability: AggregatePoint


@dataclass(frozen=True)
class ConvergenceCurve:
    attack_name: str
    instance_order: Sequence[int]
    points: Sequence[ConvergencePoint]


@dataclass(frozen=True)
class SimilarityMatrix:
    attack_names: Sequence[str]
    values: np.ndarray
    basis: SetBasis

    def mean_off_diagonal(self) -> float:
        n = len(self.attack_names)
        if n < 2:
            return 1.0
        upper = self.values[np.triu_indices(n, k=1)]
        return float(np.mean(upper))


def jaccard(a: SampleSet, b: SampleSet) -> float:
    if a.universe_size != b.universe_size:
        raise AuditError(
            AuditErrorCode.UNIVERSE_MISMATCH, f"universe mismatch: {a.universe_size} vs {b.universe_size}"
        )
    intersection = len(np.intersect1d(a.indices, b.indices, assume_unique=True))
    union = len(a) + len(b) - intersection
    # J(empty, empty) = 1: two sets that detect nothing are identical
    if union == 0:
        return 1.0
    return intersection / union


def _detected_mask(preds, labels: np.ndarray, mode: DetectionMode, subset: Optional[np.ndarray]) -> np.ndarray:
    mask = np.asarray(preds) == 1
    if labels.shape[-1] != mask.shape[-1]:
        raise AuditError(
            AuditErrorCode.LENGTH_MISMATCH, f"length mismatch: gt={labels.shape[-1]}, preds={mask.shape[-1]}"
        )
    if DetectionMode(mode) == DetectionMode.TRUE_POSITIVES:
        mask = mask & (labels == 1)
    if subset is not None:
        mask = mask & np.asarray(subset, dtype=bool)
    return mask


def detected_members(
    preds_row, gt: Labels, mode: DetectionMode = DetectionMode.TRUE_POSITIVES, subset: Optional[np.ndarray] = None
) -> SampleSet:
    return SampleSet.from_mask(_detected_mask(preds_row, as_labels(gt), mode, subset))


def _rows(pm) -> np.ndarray:
    if isinstance(pm, PredictionMatrix):
        return pm.values
    rows = np.asarray(pm)
    return rows.reshape(1, -1) if rows.ndim == 1 else rows


def detected_matrix(
    pm, gt: Labels, mode: DetectionMode = DetectionMode.TRUE_POSITIVES, subset: Optional[np.ndarray] = None
) -> np.ndarray:
    return _detected_mask(_rows(pm), as_labels(gt), mode, subset)


def consistency(
    pm, gt: Labels, mode: DetectionMode = DetectionMode.TRUE_POSITIVES, subset: Optional[np.ndarray] = None
) -> float:
    """
    Mean Jaccard index over all unordered pairs of instances' detected-member sets.
    """
    detected = detected_matrix(pm, gt, mode, subset)
    n = detected.shape[0]
    if n < 2:
        raise AuditError(AuditErrorCode.INSUFFICIENT_INSTANCES, f"consistency needs at least 2 instances, got {n}")
    as_int = detected.astype(np.int64)
    intersections = as_int @ as_int.T
    sizes = np.diag(intersections)
    pairs = np.triu_indices(n, k=1)
    inter = intersections[pairs]
    union = sizes[pairs[0]] + sizes[pairs[1]] - inter
    similarities = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return float(np.mean(similarities))


def coverage_set(
    pm, gt: Labels, mode: DetectionMode = DetectionMode.TRUE_POSITIVES, subset: Optional[np.ndarray] = None
) -> SampleSet:
    return SampleSet.from_mask(np.any(detected_matrix(pm, gt, mode, subset), axis=0))


def stability_set(
    pm, gt: Labels, mode: DetectionMode = DetectionMode.TRUE_POSITIVES, subset: Optional[np.ndarray] = None
) -> SampleSet:
    return SampleSet.from_mask(np.all(detected_matrix(pm, gt, mode, subset), axis=0))


def detection_frequency(pm, gt: Labels, mode: DetectionMode = DetectionMode.TRUE_POSITIVES) -> np.ndarray:
    return np.sum(detected_matrix(pm, gt, mode), axis=0)


def _aggregate_point(predicted: np.ndarray, labels: np.ndarray, mode: DetectionMode) -> AggregatePoint:
    member = labels == 1
    tp = int(np.count_nonzero(predicted & member))
    fp = int(np.count_nonzero(predicted & ~member))
    return AggregatePoint(
        tpr=tp / int(np.count_nonzero(member)),
        fpr=fp / int(np.count_nonzero(~member)),
        precision=None if tp + fp == 0 else tp / (tp + fp),
        set_size=tp if DetectionMode(mode) == DetectionMode.TRUE_POSITIVES else tp + fp,
    )


def convergence_curves(
    pm: PredictionMatrix,
    gt: Labels,
    mode: DetectionMode = DetectionMode.TRUE_POSITIVES,
    instance_order: Optional[Sequence[int]] = None,
) -> ConvergenceCurve:
    """
    Coverage and stability of every prefix of ``instance_order``. FPR and precision always come from the
    all-positives aggregation, since false positives are excluded by the true-positives mode.
    """
    labels = as_labels(gt)
    rows = _rows(pm)
    n = rows.shape[0]
    order = list(range(n)) if instance_order is None else [int(i) for i in instance_order]
    if sorted(order) != list(range(n)):
        raise AuditError(AuditErrorCode.INVALID_CONFIG, f"instance order {order} is not a permutation of {n} rows")

    predicted = rows[order] == 1
    union = np.logical_or.accumulate(predicted, axis=0)
    intersection = np.logical_and.accumulate(predicted, axis=0)
    points = [
        ConvergencePoint(
            k=k + 1,
            coverage=_aggregate_point(union[k], labels, mode),
            stability=_aggregate_point(intersection[k], labels, mode),
        )
        for k in range(n)
    ]
    name = pm.attack_name if isinstance(pm, PredictionMatrix) else ""
    return ConvergenceCurve(attack_name=name, instance_order=tuple(order), points=tuple(points))


def shuffled_order(n_instances: int, seed: int) -> List[int]:
    return [int(i) for i in np.random.default_rng(seed).permutation(n_instances)]


def _require_attack(bundle: ExperimentBundle, attack: str):
    if attack not in bundle.attacks:
        raise AuditError(
            AuditErrorCode.UNKNOWN_ATTACK, f"Unknown attack {attack}; bundle has {', '.join(bundle.attack_names)}."
        )


def _require_instances(bundle: ExperimentBundle, attack: str, n_instances: Optional[int]):
    available = bundle.attacks[attack].n_instances
    if n_instances is not None and n_instances > available:
        raise AuditError(
            AuditErrorCode.INSUFFICIENT_INSTANCES,
            f"Attack {attack} has {available} instances, {n_instances} requested.",
        )


def attack_predictions(
    bundle: ExperimentBundle, attack: str, beta: float, n_instances: Optional[int] = None
) -> PredictionMatrix:
    _require_attack(bundle, attack)
    _require_instances(bundle, attack, n_instances)
    return predict_at_fpr(bundle.ground_truth, bundle.attacks[attack], beta, n_instances)


def basis_set(
    pm: PredictionMatrix,
    gt: Labels,
    basis: SetBasis,
    mode: DetectionMode = DetectionMode.TRUE_POSITIVES,
    subset: Optional[np.ndarray] = None,
) -> SampleSet:
    basis = SetBasis(basis)
    if basis == SetBasis.COVERAGE:
        return coverage_set(pm, gt, mode, subset)
    if basis == SetBasis.STABILITY:
        return stability_set(pm, gt, mode, subset)
    return detected_members(pm.values[0], gt, mode, subset)


def method_similarity(
    bundle: ExperimentBundle,
    basis: SetBasis,
    n_instances: int,
    beta: float,
    mode: DetectionMode = DetectionMode.TRUE_POSITIVES,
    attacks: Optional[Sequence[str]] = None,
    subset: Optional[np.ndarray] = None,
) -> SimilarityMatrix:
    """
    Pairwise Jaccard similarity between the coverage (or stability) sets of every pair of attacks, each set
    built from the first ``n_instances`` instances thresholded at ``beta``.
    """
    attacks = list(bundle.attack_names if attacks is None else attacks)
    for attack in attacks:
        _require_attack(bundle, attack)
        _require_instances(bundle, attack, n_instances)
    sets = [
        basis_set(attack_predictions(bundle, attack, beta, n_instances), bundle.ground_truth, basis, mode, subset)
        for attack in attacks
    ]
    values = np.ones((len(attacks), len(attacks)))
    for i, j in combinations(range(len(attacks)), 2):
        values[i, j] = values[j, i] = jaccard(sets[i], sets[j])
    return SimilarityMatrix(attack_names=tuple(attacks), values=values, basis=SetBasis(basis))


def similarity_trend(
    bundle: ExperimentBundle,
    betas: Sequence[float],
    basis: SetBasis = SetBasis.COVERAGE,
    n_instances: Optional[int] = None,
    mode: DetectionMode = DetectionMode.TRUE_POSITIVES,
    attacks: Optional[Sequence[str]] = None,
) -> Dict:
    """
    Mean off-diagonal similarity at every beta and the least-squares slope of that mean against beta.
    """
    attacks = list(bundle.attack_names if attacks is None else attacks)
    if n_instances is None:
        n_instances = min(bundle.attacks[attack].n_instances for attack in attacks)
    means = [
        method_similarity(bundle, basis, n_instances, beta, mode, attacks).mean_off_diagonal() for beta in betas
    ]
    slope = 0.0
    if len(betas) > 1:
        slope = float(np.polyfit(np.asarray(betas, dtype=np.float64), np.asarray(means), 1)[0])
    return {
        "basis": SetBasis(basis).value,
        "betas": [float(b) for b in betas],
        "mean_similarity": means,
        "slope": slope,
    }


def _stability_sets(
    bundle: ExperimentBundle,
    basis: SetBasis,
    n_instances: Optional[int],
    beta: float,
    mode: DetectionMode,
) -> Dict[str, SampleSet]:
    return {
        name: basis_set(attack_predictions(bundle, name, beta, n_instances), bundle.ground_truth, basis, mode)
        for name in bundle.attack_names
    }


def unique_samples(
    bundle: ExperimentBundle,
    attack: str,
    basis: SetBasis = SetBasis.STABILITY,
    n_instances: Optional[int] = None,
    beta: float = 0.1,
    mode: DetectionMode = DetectionMode.TRUE_POSITIVES,
) -> SampleSet:
    """
    Samples in ``attack``'s stability set that no other attack's stability set contains.
    """
    _require_attack(bundle, attack)
    if len(bundle.attacks) < 2:
        raise AuditError(AuditErrorCode.INSUFFICIENT_INSTANCES, "unique samples need at least 2 attacks")
    sets = _stability_sets(bundle, basis, n_instances, beta, mode)
    own = sets[attack].to_mask()
    others = np.zeros_like(own)
    for name, sample_set in sets.items():
        if name != attack:
            others |= sample_set.to_mask()
    return SampleSet.from_mask(own & ~others)


def covered_samples(
    bundle: ExperimentBundle,
    attack: str,
    n_instances: Optional[int] = None,
    beta: float = 0.1,
    mode: DetectionMode = DetectionMode.TRUE_POSITIVES,
) -> SampleSet:
    pm = attack_predictions(bundle, attack, beta, n_instances)
    return coverage_set(pm, bundle.ground_truth, mode)


def canary_disparity(
    bundle: ExperimentBundle,
    attack: str,
    beta: float,
    n_instances: Optional[int] = None,
    mode: DetectionMode = DetectionMode.TRUE_POSITIVES,
) -> Dict:
    """
    Consistency and set sizes of ``attack`` restricted to canary members and to regular members separately.
    """
    if bundle.canary_mask is None:
        raise AuditError(AuditErrorCode.MISSING_SIGNAL, "bundle has no canary mask")
    pm = attack_predictions(bundle, attack, beta, n_instances)
    canary = bundle.canary_mask == 1
    regular = (bundle.ground_truth.labels == 1) & ~canary
    result = {}
    for name, subset in (("canary", canary), ("regular", regular)):
        detected = detected_matrix(pm, bundle.ground_truth, mode, subset)
        result[name] = {
            "members": int(np.count_nonzero(subset)),
            "consistency": consistency(pm, bundle.ground_truth, mode, subset) if pm.n_instances > 1 else None,
            "coverage_size": int(np.count_nonzero(np.any(detected, axis=0))),
            "stability_size": int(np.count_nonzero(np.all(detected, axis=0))),
            "mean_detection_rate": float(np.mean(detected[:, subset])) if np.any(subset) else None,
        }
    return result
