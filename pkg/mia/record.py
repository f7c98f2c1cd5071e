import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .util import AuditError, AuditErrorCode

log = logging.getLogger(__name__)


def _frozen_array(values, dtype=None) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.flags.writeable = False
    return array


def _flag_array(values) -> np.ndarray:
    # Non-integral flags stay float so validate_bundle can report them
    raw = np.array(values, dtype=np.float64, copy=True)
    integral = bool(np.all(np.isfinite(raw)) and np.all(raw == np.rint(raw)))
    return _frozen_array(raw, dtype=np.int64 if integral else np.float64)


@dataclass(frozen=True)
class GroundTruth:
    labels: np.ndarray  # 1 = member of the target training set, 0 = non-member

    def __post_init__(self):
        object.__setattr__(self, "labels", _flag_array(self.labels))

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def members(self) -> np.ndarray:
        return self.labels == 1

    @property
    def n_members(self) -> int:
        return int(np.count_nonzero(self.labels == 1))

    @property
    def n_non_members(self) -> int:
        return int(np.count_nonzero(self.labels == 0))


@dataclass(frozen=True)
class ScoreMatrix:
    attack_name: str
    values: np.ndarray  # (n_instances, n_samples), higher = more likely member
    seed_labels: Sequence[str]  # one identifier per instance (row)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values.reshape(1, -1)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "seed_labels", tuple(str(label) for label in self.seed_labels))

    @property
    def n_instances(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.values.shape[1])

    def head(self, n_instances: int) -> "ScoreMatrix":
        return ScoreMatrix(self.attack_name, self.values[:n_instances], self.seed_labels[:n_instances])


@dataclass(frozen=True)
class PredictionMatrix:
    attack_name: str
    values: np.ndarray  # (n_instances, n_samples) of {0, 1}
    target_fpr: float
    achieved_fpr: np.ndarray  # exact empirical FPR of each row
    thresholds: np.ndarray  # score threshold chosen for each row

    def __post_init__(self):
        values = np.array(self.values, dtype=np.int8)
        if values.ndim == 1:
            values = values.reshape(1, -1)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "achieved_fpr", _frozen_array(self.achieved_fpr, dtype=np.float64))
        object.__setattr__(self, "thresholds", _frozen_array(self.thresholds, dtype=np.float64))

    @property
    def n_instances(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.values.shape[1])

    def reorder(self, order: Sequence[int]) -> "PredictionMatrix":
        order = list(order)
        return PredictionMatrix(
            self.attack_name, self.values[order], self.target_fpr, self.achieved_fpr[order], self.thresholds[order]
        )


@dataclass(frozen=True)
class SampleSet:
    indices: np.ndarray  # strictly increasing sample indices
    universe_size: int

    def __post_init__(self):
        indices = np.unique(np.asarray(self.indices, dtype=np.int64))
        if len(indices) and (indices[0] < 0 or indices[-1] >= self.universe_size):
            raise AuditError(
                AuditErrorCode.UNIVERSE_MISMATCH,
                f"sample indices must lie in [0, {self.universe_size}), got {indices[0]}..{indices[-1]}",
            )
        indices.flags.writeable = False
        object.__setattr__(self, "indices", indices)

    @classmethod
    def from_mask(cls, mask) -> "SampleSet":
        mask = np.asarray(mask, dtype=bool)
        return cls(np.flatnonzero(mask), int(mask.shape[0]))

    def to_mask(self) -> np.ndarray:
        mask = np.zeros(self.universe_size, dtype=bool)
        mask[self.indices] = True
        return mask

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def __contains__(self, index) -> bool:
        position = np.searchsorted(self.indices, index)
        return bool(position < len(self.indices) and self.indices[position] == index)

    def issubset(self, other: "SampleSet") -> bool:
        return bool(np.all(np.isin(self.indices, other.indices)))

    def to_list(self) -> List[int]:
        return [int(i) for i in self.indices]


@dataclass(frozen=True)
class ExperimentBundle:
    ground_truth: GroundTruth
    attacks: Mapping[str, ScoreMatrix]
    signals: Mapping[str, np.ndarray] = field(default_factory=dict)
    canary_mask: Optional[np.ndarray] = None
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "attacks", dict(self.attacks))
        object.__setattr__(
            self, "signals", {name: _frozen_array(value, dtype=np.float64) for name, value in self.signals.items()}
        )
        if self.canary_mask is not None:
            object.__setattr__(self, "canary_mask", _flag_array(self.canary_mask))
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def n_samples(self) -> int:
        return self.ground_truth.n_samples

    @property
    def attack_names(self) -> List[str]:
        return list(self.attacks.keys())

    def with_attacks(self, attacks: Mapping[str, ScoreMatrix]) -> "ExperimentBundle":
        merged: Dict[str, ScoreMatrix] = dict(self.attacks)
        merged.update(attacks)
        return replace(self, attacks=merged)

    def restricted_to(self, attack_names: Sequence[str]) -> "ExperimentBundle":
        return replace(self, attacks={name: self.attacks[name] for name in attack_names})


@dataclass(frozen=True)
class Violation:
    type_name: str
    field: str
    index: Optional[Any]
    message: str

    def to_dict(self) -> Dict:
        return {"type": self.type_name, "field": self.field, "index": self.index, "message": self.message}


def validate_bundle(bundle: ExperimentBundle) -> List[Violation]:
    """
    Returns every invariant violation of ``bundle``. An empty list means the bundle is valid. Never raises.
    """
    violations: List[Violation] = []
    labels = bundle.ground_truth.labels
    n_samples = int(labels.shape[0]) if labels.ndim == 1 else -1

    if labels.ndim != 1:
        message = f"labels must be a vector, got shape {labels.shape}"
        violations.append(Violation("GroundTruth", "labels", None, message))
    elif n_samples == 0:
        violations.append(Violation("GroundTruth", "labels", None, "ground truth is empty"))
    else:
        bad = np.flatnonzero((labels != 0) & (labels != 1))
        for index in bad:
            violations.append(Violation("GroundTruth", "labels", int(index), f"label {labels[index]} is not 0 or 1"))
        if len(bad) == 0 and (bundle.ground_truth.n_members == 0 or bundle.ground_truth.n_non_members == 0):
            violations.append(Violation("GroundTruth", "labels", None, "both classes must be present"))

    if len(bundle.attacks) == 0:
        violations.append(Violation("ExperimentBundle", "attacks", None, "bundle contains no attacks"))

    for name, matrix in bundle.attacks.items():
        values = matrix.values
        if matrix.attack_name != name:
            violations.append(
                Violation(
                    "ScoreMatrix", "attack_name", name, f"attack {name} holds a matrix named {matrix.attack_name}"
                )
            )
        if values.ndim != 2 or values.shape[0] < 1:
            violations.append(Violation("ScoreMatrix", "values", name, f"attack {name} has no instances"))
            continue
        if values.shape[1] != n_samples:
            violations.append(
                Violation(
                    "ScoreMatrix",
                    "values",
                    name,
                    f"length mismatch: gt={n_samples}, scores={values.shape[1]}",
                )
            )
        for row, column in np.argwhere(~np.isfinite(values)):
            violations.append(
                Violation(
                    "ScoreMatrix",
                    "values",
                    [name, int(row), int(column)],
                    f"non-finite score {values[row, column]} in attack {name} at row {row}, column {column}",
                )
            )
        if len(matrix.seed_labels) != values.shape[0]:
            violations.append(
                Violation(
                    "ScoreMatrix",
                    "seed_labels",
                    name,
                    f"attack {name} has {len(matrix.seed_labels)} seed labels for {values.shape[0]} instances",
                )
            )
        if len(set(matrix.seed_labels)) != len(matrix.seed_labels):
            violations.append(Violation("ScoreMatrix", "seed_labels", name, f"attack {name} has duplicate seed labels"))

    for name, signal in bundle.signals.items():
        if signal.ndim == 0 or signal.shape[0] != n_samples:
            violations.append(
                Violation(
                    "ExperimentBundle",
                    "signals",
                    name,
                    f"length mismatch: gt={n_samples}, signal {name}={signal.shape[0] if signal.ndim else 0}",
                )
            )
        # NaN marks an absent entry of a ragged per-shadow-model signal; infinities are never valid
        if signal.ndim == 1 and not np.all(np.isfinite(signal)):
            violations.append(Violation("ExperimentBundle", "signals", name, f"signal {name} has non-finite entries"))
        elif np.any(np.isinf(signal)):
            violations.append(Violation("ExperimentBundle", "signals", name, f"signal {name} has infinite entries"))

    if bundle.canary_mask is not None:
        mask = bundle.canary_mask
        if mask.ndim != 1 or mask.shape[0] != n_samples:
            violations.append(
                Violation(
                    "ExperimentBundle", "canary_mask", None, f"length mismatch: gt={n_samples}, canary={mask.size}"
                )
            )
        else:
            for index in np.flatnonzero((mask != 0) & (mask != 1)):
                violations.append(
                    Violation("ExperimentBundle", "canary_mask", int(index), f"canary flag {mask[index]} is not 0 or 1")
                )
            if labels.ndim == 1:
                for index in np.flatnonzero((mask == 1) & (labels != 1)):
                    violations.append(
                        Violation(
                            "ExperimentBundle", "canary_mask", int(index), f"canary sample {index} is not a member"
                        )
                    )

    if not violations and bundle.ground_truth.n_members != bundle.ground_truth.n_non_members:
        log.warning(
            f"Unbalanced membership prior: {bundle.ground_truth.n_members} members vs "
            f"{bundle.ground_truth.n_non_members} non-members"
        )
    return violations


def member_balance(gt: GroundTruth) -> Dict:
    return {
        "members": gt.n_members,
        "non_members": gt.n_non_members,
        "balanced": gt.n_members == gt.n_non_members,
    }
