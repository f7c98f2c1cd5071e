from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from sklearn import metrics as skm

from .record import GroundTruth, PredictionMatrix, ScoreMatrix
from .util import AuditError, AuditErrorCode

Labels = Union[GroundTruth, np.ndarray]


def as_labels(gt: Labels) -> np.ndarray:
    if isinstance(gt, GroundTruth):
        return gt.labels
    return np.asarray(gt, dtype=np.int64)


@dataclass(frozen=True)
class RocCurve:
    fprs: np.ndarray
    tprs: np.ndarray
    thresholds: np.ndarray  # strictly decreasing; thresholds[0] is the "predict nothing" sentinel
    false_positives: np.ndarray  # exact counts behind fprs
    true_positives: np.ndarray  # exact counts behind tprs
    n_members: int
    n_non_members: int


@dataclass(frozen=True)
class FprAdjustment:
    predictions: np.ndarray
    threshold: float
    achieved_fpr: float
    tpr: float
    roc_index: int


def _sentinel(max_score: float) -> float:
    sentinel = max_score + 1.0
    if not sentinel > max_score:
        sentinel = float(np.nextafter(max_score, np.inf))
    return sentinel


def roc_curve(gt: Labels, scores) -> RocCurve:
    """
    One ROC point per distinct score value under the rule ``score >= threshold`` means member, preceded by the
    (0, 0) point whose threshold is ``max(scores) + 1``.
    """
    labels = as_labels(gt)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise AuditError(
            AuditErrorCode.LENGTH_MISMATCH, f"length mismatch: gt={labels.shape[0]}, scores={scores.shape[0]}"
        )
    n_members = int(np.count_nonzero(labels == 1))
    n_non_members = int(labels.shape[0] - n_members)
    if n_members == 0 or n_non_members == 0:
        raise AuditError(AuditErrorCode.DEGENERATE_GROUND_TRUTH, "degenerate ground truth")

    fprs, tprs, thresholds = skm.roc_curve(labels, scores, drop_intermediate=False)
    # Exact counts behind the rates; every distinct score adds at least one sample, so no two points coincide
    false_positives = np.rint(fprs * n_non_members).astype(np.int64)
    true_positives = np.rint(tprs * n_members).astype(np.int64)
    thresholds = np.asarray(thresholds, dtype=np.float64).copy()
    thresholds[0] = _sentinel(float(np.max(scores)))

    return RocCurve(
        fprs=false_positives / n_non_members,
        tprs=true_positives / n_members,
        thresholds=thresholds,
        false_positives=false_positives,
        true_positives=true_positives,
        n_members=n_members,
        n_non_members=n_non_members,
    )


def select_roc_index(curve: RocCurve, beta: float) -> int:
    """
    argmin |fpr - beta|. Equidistant points resolve to the lower FPR; points sharing that FPR resolve to the
    highest TPR (the last of them, since fprs and tprs are nondecreasing).
    """
    distance = np.abs(curve.fprs - beta)
    best = int(np.argmin(distance))
    chosen_fp = curve.false_positives[best]
    return int(np.searchsorted(curve.false_positives, chosen_fp, side="right") - 1)


def adjust_fpr(gt: Labels, scores, beta: float, curve: Optional[RocCurve] = None) -> FprAdjustment:
    labels = as_labels(gt)
    scores = np.asarray(scores, dtype=np.float64)
    if curve is None:
        curve = roc_curve(labels, scores)
    index = select_roc_index(curve, beta)
    threshold = float(curve.thresholds[index])
    predictions = (scores >= threshold).astype(np.int8)
    false_positives = int(np.count_nonzero((predictions == 1) & (labels == 0)))
    true_positives = int(np.count_nonzero((predictions == 1) & (labels == 1)))
    return FprAdjustment(
        predictions=predictions,
        threshold=threshold,
        achieved_fpr=false_positives / curve.n_non_members,
        tpr=true_positives / curve.n_members,
        roc_index=index,
    )


def auc(curve: RocCurve) -> float:
    return float(skm.auc(curve.fprs, curve.tprs))


def confusion_counts(gt: Labels, preds) -> Tuple[int, int, int, int]:
    labels = as_labels(gt)
    preds = np.asarray(preds)
    if labels.shape != preds.shape:
        raise AuditError(
            AuditErrorCode.LENGTH_MISMATCH, f"length mismatch: gt={labels.shape[0]}, preds={preds.shape[0]}"
        )
    matrix = skm.confusion_matrix((labels == 1).astype(np.int8), (preds == 1).astype(np.int8), labels=[0, 1])
    tn, fp, fn, tp = (int(count) for count in matrix.ravel())
    return tp, fp, tn, fn


def true_positive_rate(gt: Labels, preds) -> float:
    tp, _, _, fn = confusion_counts(gt, preds)
    if tp + fn == 0:
        raise AuditError(AuditErrorCode.DEGENERATE_GROUND_TRUTH, "degenerate ground truth")
    return tp / (tp + fn)


def false_positive_rate(gt: Labels, preds) -> float:
    _, fp, tn, _ = confusion_counts(gt, preds)
    if fp + tn == 0:
        raise AuditError(AuditErrorCode.DEGENERATE_GROUND_TRUTH, "degenerate ground truth")
    return fp / (fp + tn)


def balanced_accuracy(gt: Labels, preds) -> float:
    tp, fp, tn, fn = confusion_counts(gt, preds)
    if tp + fn == 0 or fp + tn == 0:
        raise AuditError(AuditErrorCode.DEGENERATE_GROUND_TRUTH, "degenerate ground truth")
    return (tp / (tp + fn) + tn / (tn + fp)) / 2


def tpr_at_fpr(gt: Labels, scores, beta: float, curve: Optional[RocCurve] = None) -> float:
    return adjust_fpr(gt, scores, beta, curve).tpr


def precision(gt: Labels, preds) -> Optional[float]:
    """
    TP / (TP + FP), or ``None`` when nothing is predicted a member.
    """
    tp, fp, _, _ = confusion_counts(gt, preds)
    if tp + fp == 0:
        return None
    return tp / (tp + fp)


def instance_curves(gt: Labels, score_matrix: ScoreMatrix, n_instances: Optional[int] = None) -> Tuple[RocCurve, ...]:
    rows = score_matrix.values if n_instances is None else score_matrix.values[:n_instances]
    return tuple(roc_curve(gt, row) for row in rows)


def predict_at_fpr(
    gt: Labels,
    score_matrix: ScoreMatrix,
    beta: float,
    n_instances: Optional[int] = None,
    curves: Optional[Tuple[RocCurve, ...]] = None,
) -> PredictionMatrix:
    """
    Thresholds every instance (row) of ``score_matrix`` independently at the same target FPR.
    """
    n_instances = score_matrix.n_instances if n_instances is None else n_instances
    if n_instances > score_matrix.n_instances:
        raise AuditError(
            AuditErrorCode.INSUFFICIENT_INSTANCES,
            f"Attack {score_matrix.attack_name} has {score_matrix.n_instances} instances, {n_instances} requested.",
        )
    labels = as_labels(gt)
    adjustments = [
        adjust_fpr(labels, score_matrix.values[i], beta, None if curves is None else curves[i])
        for i in range(n_instances)
    ]
    return PredictionMatrix(
        attack_name=score_matrix.attack_name,
        values=np.stack([a.predictions for a in adjustments]),
        target_fpr=float(beta),
        achieved_fpr=[a.achieved_fpr for a in adjustments],
        thresholds=[a.threshold for a in adjustments],
    )
