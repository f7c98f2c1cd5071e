import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from .metrics import Labels, as_labels
from .record import ExperimentBundle, ScoreMatrix
from .util import AuditError, AuditErrorCode

log = logging.getLogger(__name__)

# Floor for fitted standard deviations; memorized samples can have zero-variance shadow losses
SIGMA_FLOOR = 1e-8

# Per-instance signals are stored as "<name>@<seed label>"
INSTANCE_SEPARATOR = "@"

RAGGED_SIGNALS = ("shadow_in_losses", "shadow_out_losses", "shadow_confidences")
VECTOR_SIGNALS = ("target_loss", "shadow_loss", "target_confidence")


class VarianceMode(str, Enum):
    PER_SAMPLE = "per-sample"
    GLOBAL = "global"


Ragged = Tuple[np.ndarray, ...]


def _ragged(value) -> Optional[Ragged]:
    if value is None:
        return None
    if isinstance(value, np.ndarray) and value.ndim == 2:
        # NaN pads absent entries of a ragged signal stored as a dense matrix
        return tuple(row[~np.isnan(row)] for row in value.astype(np.float64))
    return tuple(np.asarray(row, dtype=np.float64).reshape(-1) for row in value)


@dataclass(frozen=True)
class SignalSet:
    target_loss: Optional[np.ndarray] = None
    shadow_loss: Optional[np.ndarray] = None
    shadow_in_losses: Optional[Ragged] = None
    shadow_out_losses: Optional[Ragged] = None
    shadow_confidences: Optional[Ragged] = None
    target_confidence: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in VECTOR_SIGNALS:
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, np.asarray(value, dtype=np.float64).reshape(-1))
        for name in RAGGED_SIGNALS:
            object.__setattr__(self, name, _ragged(getattr(self, name)))

    @property
    def n_samples(self) -> Optional[int]:
        for name in VECTOR_SIGNALS + RAGGED_SIGNALS:
            value = getattr(self, name)
            if value is not None:
                return len(value)
        return None

    def require(self, *names: str):
        for name in names:
            if getattr(self, name) is None:
                raise AuditError(AuditErrorCode.MISSING_SIGNAL, f"signal {name} is required")
        lengths = {name: len(getattr(self, name)) for name in names}
        if len(set(lengths.values())) > 1:
            raise AuditError(AuditErrorCode.LENGTH_MISMATCH, f"signal lengths differ: {lengths}")

    @classmethod
    def from_bundle(cls, bundle: ExperimentBundle, instance: Optional[str] = None) -> "SignalSet":
        def lookup(name: str):
            if instance is not None:
                key = f"{name}{INSTANCE_SEPARATOR}{instance}"
                if key in bundle.signals:
                    return bundle.signals[key]
            return bundle.signals.get(name)

        return cls(**{name: lookup(name) for name in VECTOR_SIGNALS + RAGGED_SIGNALS})


def minmax_normalize(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise AuditError(AuditErrorCode.MISSING_SIGNAL, "empty input")
    low, high = float(np.min(values)), float(np.max(values))
    if high == low:
        return np.full(values.shape, 0.5)
    return (values - low) / (high - low)


@dataclass(frozen=True)
class LossScores:
    scores: np.ndarray
    threshold: float  # mean training loss on the score scale
    raw_threshold: float  # mean loss


def loss_scorer(signals: SignalSet) -> LossScores:
    signals.require("target_loss")
    losses = signals.target_loss
    if losses.size == 0:
        raise AuditError(AuditErrorCode.MISSING_SIGNAL, "empty input")
    raw_threshold = float(np.mean(losses))
    low, high = float(np.min(losses)), float(np.max(losses))
    threshold = 0.5 if high == low else 1.0 - (raw_threshold - low) / (high - low)
    return LossScores(scores=1.0 - minmax_normalize(losses), threshold=threshold, raw_threshold=raw_threshold)


def loss_predictions(signals: SignalSet) -> np.ndarray:
    """
    Member iff the target loss is strictly below the average loss.
    """
    signals.require("target_loss")
    return (signals.target_loss < np.mean(signals.target_loss)).astype(np.int8)


def calibration_scorer(signals: SignalSet) -> np.ndarray:
    signals.require("target_loss", "shadow_loss")
    calibrated = signals.target_loss - signals.shadow_loss
    return 1.0 - minmax_normalize(calibrated)


def calibration_threshold(scores_aux, gt_aux: Labels, n_thresholds: int = 1000) -> float:
    """
    The threshold, among ``n_thresholds`` evenly spaced over the range of ``scores_aux``, that maximizes accuracy
    of ``score >= threshold`` on the auxiliary split. Ties go to the smallest threshold.
    """
    scores = np.asarray(scores_aux, dtype=np.float64)
    labels = as_labels(gt_aux)
    if scores.shape != labels.shape:
        raise AuditError(
            AuditErrorCode.LENGTH_MISMATCH, f"length mismatch: gt={labels.shape[0]}, scores={scores.shape[0]}"
        )
    low, high = float(np.min(scores)), float(np.max(scores))
    if high == low:
        return low
    grid = np.linspace(low, high, n_thresholds)
    accuracies = np.mean((scores[None, :] >= grid[:, None]) == (labels[None, :] == 1), axis=1)
    return float(grid[int(np.argmax(accuracies))])


def _fit(samples: Ragged, variance_mode: VarianceMode, minimum: int, side: str) -> Tuple[np.ndarray, np.ndarray]:
    counts = np.array([len(s) for s in samples])
    if np.any(counts < minimum):
        bad = int(np.flatnonzero(counts < minimum)[0])
        raise AuditError(
            AuditErrorCode.INSUFFICIENT_INSTANCES,
            f"sample {bad} has {counts[bad]} {side} losses, {variance_mode.value} variance needs at least {minimum}",
        )
    means = np.array([np.mean(s) for s in samples])
    if variance_mode == VarianceMode.GLOBAL:
        stds = np.full(len(samples), np.std(np.concatenate(samples)))
    else:
        stds = np.array([np.std(s) for s in samples])
    return means, np.maximum(stds, SIGMA_FLOOR)


def lira_scorer(signals: SignalSet, variance_mode: VarianceMode = VarianceMode.PER_SAMPLE) -> np.ndarray:
    """
    Log likelihood ratio of the target loss under Gaussians fitted to the IN and OUT shadow losses.
    """
    variance_mode = VarianceMode(variance_mode)
    signals.require("target_loss", "shadow_in_losses", "shadow_out_losses")
    minimum = 2 if variance_mode == VarianceMode.PER_SAMPLE else 1
    mean_in, std_in = _fit(signals.shadow_in_losses, variance_mode, minimum, "in")
    mean_out, std_out = _fit(signals.shadow_out_losses, variance_mode, minimum, "out")
    loss = signals.target_loss
    return norm.logpdf(loss, mean_in, std_in) - norm.logpdf(loss, mean_out, std_out)


def lira_offline_scorer(signals: SignalSet, variance_mode: VarianceMode = VarianceMode.PER_SAMPLE) -> np.ndarray:
    """
    One-sided test against the OUT losses only: log P(out loss >= target loss).
    """
    variance_mode = VarianceMode(variance_mode)
    signals.require("target_loss", "shadow_out_losses")
    minimum = 2 if variance_mode == VarianceMode.PER_SAMPLE else 1
    mean_out, std_out = _fit(signals.shadow_out_losses, variance_mode, minimum, "out")
    return norm.logsf(signals.target_loss, mean_out, std_out)


def reference_scorer(signals: SignalSet) -> np.ndarray:
    """
    Fraction of shadow models whose confidence on the sample does not exceed the target model's.
    """
    signals.require("target_confidence", "shadow_confidences")
    scores = np.empty(len(signals.target_confidence))
    for i, (target, shadows) in enumerate(zip(signals.target_confidence, signals.shadow_confidences)):
        if len(shadows) == 0:
            raise AuditError(AuditErrorCode.MISSING_SIGNAL, f"sample {i} has no shadow confidences")
        scores[i] = int(np.count_nonzero(target >= shadows)) / len(shadows)
    return scores


SCORERS = ("loss", "calibration", "lira", "lira_offline", "reference")


def score_signals(name: str, signals: SignalSet, variance_mode: VarianceMode = VarianceMode.PER_SAMPLE) -> np.ndarray:
    if name == "loss":
        return loss_scorer(signals).scores
    if name == "calibration":
        return calibration_scorer(signals)
    if name == "lira":
        return lira_scorer(signals, variance_mode)
    if name == "lira_offline":
        return lira_offline_scorer(signals, variance_mode)
    if name == "reference":
        return reference_scorer(signals)
    raise AuditError(AuditErrorCode.INVALID_CONFIG, f"Unknown scorer {name}; known scorers: {', '.join(SCORERS)}.")


def instance_labels(bundle: ExperimentBundle) -> List[str]:
    labels: List[str] = []
    for key in bundle.signals:
        if INSTANCE_SEPARATOR in key:
            label = key.split(INSTANCE_SEPARATOR, 1)[1]
            if label not in labels:
                labels.append(label)
    return labels or ["0"]


def score_bundle(
    bundle: ExperimentBundle,
    scorers: Sequence[str] = SCORERS,
    variance_mode: VarianceMode = VarianceMode.PER_SAMPLE,
    prefix: str = "",
) -> ExperimentBundle:
    """
    Runs the analytic scorers over every instance's signals and adds one score matrix per scorer.
    """
    seeds = instance_labels(bundle)
    new_attacks: Dict[str, ScoreMatrix] = {}
    for name in scorers:
        rows = [score_signals(name, SignalSet.from_bundle(bundle, seed), variance_mode) for seed in seeds]
        new_attacks[f"{prefix}{name}"] = ScoreMatrix(f"{prefix}{name}", np.stack(rows), seeds)
        log.info(f"Scored {len(seeds)} instances with the {name} scorer")
    return bundle.with_attacks(new_attacks)
