import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from .util import AuditError, AuditErrorCode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PcaResult:
    projections: np.ndarray  # (n_samples, k)
    components: np.ndarray  # (k, n_features), unit rows
    eigenvalues: np.ndarray
    explained_variance_ratio: np.ndarray
    iterations: Tuple[int, ...]


def _power_iteration(
    matrix: np.ndarray, tol: float, max_iter: int, component: int, scale: float
) -> Tuple[float, np.ndarray, int]:
    size = matrix.shape[0]
    # Deterministic start that is not orthogonal to any coordinate axis
    vector = np.linspace(1.0, 2.0, size)
    vector /= np.linalg.norm(vector)
    for iteration in range(1, max_iter + 1):
        product = matrix @ vector
        norm_product = np.linalg.norm(product)
        if norm_product <= 1e-12 * scale:
            # Deflation left only round-off: the remaining spectrum is zero
            return 0.0, vector, iteration
        new_vector = product / norm_product
        if np.dot(new_vector, vector) < 0:
            new_vector = -new_vector
        if np.linalg.norm(new_vector - vector) < tol:
            return float(new_vector @ matrix @ new_vector), new_vector, iteration
        vector = new_vector
    raise AuditError(
        AuditErrorCode.NON_CONVERGENCE,
        f"power iteration for component {component} did not converge after {max_iter} iterations",
        {"iterations": max_iter, "component": component},
    )


def _orthogonal_unit(start: np.ndarray, basis: List[np.ndarray]) -> np.ndarray:
    candidates = [start] + list(np.eye(len(start)))
    for candidate in candidates:
        vector = candidate.astype(np.float64).copy()
        for previous in basis:
            vector -= (vector @ previous) * previous
        norm_vector = np.linalg.norm(vector)
        if norm_vector > 1e-8:
            return vector / norm_vector
    return start


def pca_project(logits, k: int = 2, tol: float = 1e-10, max_iter: int = 1000) -> PcaResult:
    """
    Top-``k`` principal components of ``logits`` by power iteration with deflation on the covariance.
    Each component is signed so its largest-magnitude loading is positive.
    """
    data = np.asarray(logits, dtype=np.float64)
    if data.ndim != 2 or not np.all(np.isfinite(data)):
        raise AuditError(AuditErrorCode.PARSE_ERROR, "logits must be a finite 2-d matrix")
    n_samples, n_features = data.shape
    if not (1 <= k <= n_features and n_samples > k):
        raise AuditError(
            AuditErrorCode.INVALID_CONFIG, f"need n_samples > k >= 1 and k <= n_features, got {data.shape}, k={k}"
        )
    centered = data - data.mean(axis=0)
    covariance = centered.T @ centered / (n_samples - 1)
    trace = float(np.trace(covariance))

    remaining = covariance.copy()
    components, eigenvalues, iterations = [], [], []
    for component in range(k):
        value, vector, used = _power_iteration(remaining, tol, max_iter, component, max(trace, 1e-300))
        if value == 0.0:
            # Any unit vector orthogonal to the earlier components spans the null space
            vector = _orthogonal_unit(vector, components)
        if vector[np.argmax(np.abs(vector))] < 0:
            vector = -vector
        components.append(vector)
        eigenvalues.append(value)
        iterations.append(used)
        remaining = remaining - value * np.outer(vector, vector)

    components = np.array(components)
    eigenvalues = np.array(eigenvalues)
    ratios = eigenvalues / trace if trace > 0 else np.zeros(k)
    return PcaResult(
        projections=centered @ components.T,
        components=components,
        eigenvalues=eigenvalues,
        explained_variance_ratio=ratios,
        iterations=tuple(iterations),
    )


def confidence_margin(confidence_vectors) -> np.ndarray:
    confidences = np.asarray(confidence_vectors, dtype=np.float64)
    if confidences.ndim != 2 or confidences.shape[1] < 2:
        raise AuditError(AuditErrorCode.INVALID_CONFIG, "confidence margin needs at least 2 classes")
    top_two = np.sort(confidences, axis=1)[:, -2:]
    return top_two[:, 1] - top_two[:, 0]


def silverman_bandwidth(values) -> float:
    # Sorted so the floating-point sums do not depend on input order
    values = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    std = float(np.std(values, ddof=1))
    q75, q25 = np.percentile(values, [75, 25])
    iqr = float(q75 - q25)
    spread = min(std, iqr / 1.34) if iqr > 0 else std
    return 0.9 * spread * len(values) ** (-1 / 5)


def kde(values, eval_points, bandwidth: Optional[float] = None) -> np.ndarray:
    """
    Gaussian kernel density estimate of ``values`` at ``eval_points`` (Silverman's rule unless ``bandwidth``).
    """
    # Sorted values make both the bandwidth and the sum independent of input order
    values = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    points = np.asarray(eval_points, dtype=np.float64)
    if len(values) < 2 or float(np.ptp(values)) == 0.0:
        raise AuditError(AuditErrorCode.DEGENERATE_SAMPLE, "degenerate sample")
    h = silverman_bandwidth(values) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise AuditError(AuditErrorCode.DEGENERATE_SAMPLE, "degenerate sample")
    flat = points.reshape(-1)
    densities = np.empty(flat.shape)
    for start in range(0, len(flat), 1024):
        chunk = flat[start : start + 1024]
        densities[start : start + 1024] = norm.pdf((chunk[:, None] - values[None, :]) / h).sum(axis=1)
    return (densities / (len(values) * h)).reshape(points.shape)


@dataclass(frozen=True)
class SharedCost:
    attacks: FrozenSet[str]
    deduction: float


@dataclass(frozen=True)
class CostTable:
    per_instance: Mapping[str, float]  # preparation cost per instance, GPU-minutes
    shared: Tuple[SharedCost, ...] = field(default_factory=tuple)

    @classmethod
    def from_dict(cls, config: Mapping) -> "CostTable":
        try:
            per_instance = {str(name): float(cost) for name, cost in config["per_instance"].items()}
            shared = tuple(
                SharedCost(frozenset(str(a) for a in group["attacks"]), float(group["deduction"]))
                for group in config.get("shared", [])
            )
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise AuditError(AuditErrorCode.INVALID_CONFIG, f"Invalid cost table: {e}")
        table = cls(per_instance, shared)
        table.validate()
        return table

    def to_dict(self) -> Dict:
        return {
            "per_instance": dict(self.per_instance),
            "shared": [{"attacks": sorted(group.attacks), "deduction": group.deduction} for group in self.shared],
        }

    def validate(self):
        if any(cost < 0 for cost in self.per_instance.values()):
            raise AuditError(AuditErrorCode.INVALID_CONFIG, "costs must be non-negative")
        for group in self.shared:
            unknown = sorted(group.attacks - set(self.per_instance))
            if unknown:
                raise AuditError(AuditErrorCode.UNKNOWN_ATTACK, f"shared group names unknown attacks {unknown}")
            if group.deduction < 0 or group.deduction > sum(self.per_instance[a] for a in group.attacks):
                raise AuditError(
                    AuditErrorCode.INVALID_CONFIG, f"deduction for {sorted(group.attacks)} exceeds the group's cost"
                )


# GPU-minutes per instance; LiRA and the Reference attack train the same shadow models
DEFAULT_COST_TABLE = CostTable(
    per_instance={"lira": 580.0, "reference": 540.0, "loss_trajectory": 17.0, "calibration": 5.0},
    shared=(SharedCost(frozenset({"lira", "reference"}), 540.0),),
)


Candidate = Tuple[Tuple[str, ...], int]


def candidate_key(attacks: Iterable[str], n_instances: int) -> Candidate:
    return tuple(sorted(attacks)), int(n_instances)


def compute_cost(table: CostTable, attacks: Iterable[str], n_instances: int) -> float:
    attacks = set(attacks)
    unknown = sorted(attacks - set(table.per_instance))
    if unknown:
        raise AuditError(AuditErrorCode.UNKNOWN_ATTACK, f"No cost defined for {', '.join(unknown)}")
    # Deducted per instance: each instance trains its own shared shadow models once
    per_instance = sum(table.per_instance[a] for a in attacks)
    per_instance -= sum(group.deduction for group in table.shared if group.attacks <= attacks)
    return n_instances * per_instance


@dataclass(frozen=True)
class ParetoEntry:
    attacks: Tuple[str, ...]
    n_instances: int
    cost: float
    performance: float
    on_frontier: bool


def _dominates(a: ParetoEntry, b: ParetoEntry) -> bool:
    return a.cost <= b.cost and a.performance >= b.performance and (a.cost < b.cost or a.performance > b.performance)


def cost_pareto(
    cost_table: CostTable,
    performance: Mapping[Candidate, float],
    candidates: Optional[Sequence[Candidate]] = None,
) -> List[ParetoEntry]:
    """
    Annotates every candidate with its cost and whether it is on the (cost down, performance up) frontier.
    Ordered by (cost, performance); ties are all kept on the frontier.
    """
    candidates = list(performance.keys() if candidates is None else candidates)
    if len(candidates) == 0:
        raise AuditError(AuditErrorCode.INVALID_CONFIG, "no candidates to compare")
    entries = []
    for attacks, n_instances in candidates:
        key = candidate_key(attacks, n_instances)
        if key not in performance:
            raise AuditError(AuditErrorCode.INVALID_CONFIG, f"no performance recorded for {key}")
        entries.append(
            ParetoEntry(key[0], key[1], compute_cost(cost_table, key[0], key[1]), float(performance[key]), False)
        )
    annotated = [
        ParetoEntry(e.attacks, e.n_instances, e.cost, e.performance, not any(_dominates(o, e) for o in entries))
        for e in entries
    ]
    return sorted(annotated, key=lambda e: (e.cost, e.performance, e.attacks, e.n_instances))
