import hashlib
import logging
from dataclasses import asdict, dataclass, fields
from numbers import Integral, Real
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .record import ExperimentBundle, GroundTruth, ScoreMatrix
from .scorers import INSTANCE_SEPARATOR
from .util import AuditError, AuditErrorCode

log = logging.getLogger(__name__)

INTEGER_FIELDS = ("n_samples", "latent_dim", "n_attacks", "n_instances", "n_shadow_models", "n_classes", "seed")
REAL_FIELDS = (
    "member_fraction",
    "angle_spread",
    "member_signal_strength",
    "instance_noise_sigma",
    "canary_fraction",
    "canary_strength",
)


@dataclass(frozen=True)
class SimConfig:
    n_samples: int = 2000
    member_fraction: float = 0.5
    latent_dim: int = 8
    n_attacks: int = 4
    # Angle in degrees between any two attack directions. All attacks lean equally on the membership axis and
    # their off-axis parts form a regular simplex.
    angle_spread: float = 30.0
    # Explicit unit directions (one per attack); overrides angle_spread when given
    directions: Optional[Sequence[Sequence[float]]] = None
    attack_names: Optional[Sequence[str]] = None
    member_signal_strength: float = 1.5
    instance_noise_sigma: float = 0.5
    n_instances: int = 6
    n_shadow_models: int = 8
    n_classes: int = 10
    canary_fraction: float = 0.0
    canary_strength: float = 0.0
    emit_signals: bool = True
    seed: int = 0

    @classmethod
    def from_dict(cls, config: Mapping) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(config) - known)
        if unknown:
            raise AuditError(AuditErrorCode.INVALID_CONFIG, f"Unknown SimConfig fields: {', '.join(unknown)}")
        config = cls(**dict(config))
        config.check_types()
        return config

    def to_dict(self) -> Dict:
        config = asdict(self)
        if config["directions"] is not None:
            config["directions"] = [[float(x) for x in direction] for direction in config["directions"]]
        if config["attack_names"] is not None:
            config["attack_names"] = list(config["attack_names"])
        return config

    def check_types(self):
        problems: List[str] = []
        for name in INTEGER_FIELDS:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, Integral):
                problems.append(f"{name} must be an integer, got {value!r}")
        for name in REAL_FIELDS:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, Real):
                problems.append(f"{name} must be a number, got {value!r}")
        if not isinstance(self.emit_signals, bool):
            problems.append(f"emit_signals must be true or false, got {self.emit_signals!r}")
        if self.attack_names is not None and (
            isinstance(self.attack_names, str) or not all(isinstance(name, str) for name in self.attack_names)
        ):
            problems.append("attack_names must be a list of strings")
        if self.directions is not None:
            try:
                directions = np.asarray(self.directions, dtype=np.float64)
            except (TypeError, ValueError):
                problems.append("directions must be a list of numeric vectors")
            else:
                if directions.ndim != 2:
                    problems.append("directions must be a list of numeric vectors")
        if problems:
            raise AuditError(AuditErrorCode.INVALID_CONFIG, "; ".join(problems))

    def validate(self):
        self.check_types()
        problems: List[str] = []
        if self.n_samples < 2:
            problems.append("n_samples must be at least 2")
        if not 0 <= self.member_fraction <= 1:
            problems.append("member_fraction must be in [0, 1]")
        if not 0 <= self.canary_fraction <= 1:
            problems.append("canary_fraction must be in [0, 1]")
        if self.latent_dim < 1:
            problems.append("latent_dim must be at least 1")
        if self.n_attacks < 1 or self.n_instances < 1 or self.n_shadow_models < 1:
            problems.append("n_attacks, n_instances and n_shadow_models must be at least 1")
        if self.n_classes < 2:
            problems.append("n_classes must be at least 2")
        if min(self.member_signal_strength, self.instance_noise_sigma, self.canary_strength) < 0:
            problems.append("strengths must be non-negative")
        if not 0 <= self.seed < 2**64:
            problems.append("seed must be an unsigned 64-bit integer")
        if self.directions is not None:
            directions = np.asarray(self.directions, dtype=np.float64)
            if directions.shape != (self.n_attacks, self.latent_dim):
                problems.append(f"directions must have shape ({self.n_attacks}, {self.latent_dim})")
            elif not np.allclose(np.linalg.norm(directions, axis=1), 1.0, atol=1e-9):
                problems.append("directions must be unit vectors")
        elif self.n_attacks > 1:
            if self.latent_dim < self.n_attacks + 1:
                problems.append("angle_spread needs latent_dim > n_attacks")
            if _axis_weight(self.n_attacks, self.angle_spread) < 0:
                problems.append(f"{self.n_attacks} attacks cannot be {self.angle_spread} degrees apart pairwise")
        if self.attack_names is not None and len(set(self.attack_names)) != self.n_attacks:
            problems.append("attack_names must hold n_attacks distinct names")
        if problems:
            raise AuditError(AuditErrorCode.INVALID_CONFIG, "; ".join(problems))


def prng_stream(seed: int, stream_id: str) -> np.random.Generator:
    """
    Independent generator for ``stream_id``: the stream name is hashed together with the seed, so regenerating
    one stream never disturbs another.
    """
    digest = hashlib.blake2b(f"{seed}/{stream_id}".encode(), digest_size=16).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, *words]))


def _axis_weight(n_attacks: int, angle_spread: float) -> float:
    # Squared membership-axis component c^2 for which simplex offsets give cos(angle) = c^2 - (1 - c^2) / (m - 1)
    return ((n_attacks - 1) * np.cos(np.deg2rad(angle_spread)) + 1) / n_attacks


def attack_directions(config: SimConfig) -> np.ndarray:
    """
    Unit attack directions, pairwise ``angle_spread`` apart and equally aligned with the membership axis.

    The off-axis parts are the centered basis vectors of dimensions 1..m, so every attack carries the same
    membership signal and the attacks differ only through nuisance latent dimensions.
    """
    if config.directions is not None:
        return np.asarray(config.directions, dtype=np.float64)
    m = config.n_attacks
    directions = np.zeros((m, config.latent_dim))
    directions[:, 0] = 1.0
    if m == 1:
        return directions
    weight = _axis_weight(m, config.angle_spread)
    offsets = np.eye(m) - 1.0 / m
    offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
    directions[:, 0] = np.sqrt(weight)
    directions[:, 1 : m + 1] = np.sqrt(1.0 - weight) * offsets
    return directions


def membership_axis(config: SimConfig) -> np.ndarray:
    axis = np.zeros(config.latent_dim)
    axis[0] = 1.0
    return axis


def softplus(x) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _attack_names(config: SimConfig) -> List[str]:
    if config.attack_names is not None:
        return [str(name) for name in config.attack_names]
    return [f"attack_{k}" for k in range(config.n_attacks)]


def _seed_labels(config: SimConfig) -> List[str]:
    return [f"s{i}" for i in range(config.n_instances)]


def generate(config: SimConfig) -> ExperimentBundle:
    config.validate()
    n, seed = config.n_samples, config.seed

    n_members = int(round(config.member_fraction * n))
    labels = np.zeros(n, dtype=np.int64)
    labels[prng_stream(seed, "membership").permutation(n)[:n_members]] = 1

    canary = np.zeros(n, dtype=np.int64)
    member_indices = np.flatnonzero(labels == 1)
    n_canaries = int(round(config.canary_fraction * len(member_indices)))
    if n_canaries > 0:
        canary[prng_stream(seed, "canary").choice(member_indices, size=n_canaries, replace=False)] = 1

    axis = membership_axis(config)
    shift = config.member_signal_strength * labels + config.canary_strength * canary
    base_latent = prng_stream(seed, "latent").standard_normal((n, config.latent_dim))
    latent = base_latent + shift[:, None] * axis[None, :]

    directions = attack_directions(config)
    seeds = _seed_labels(config)
    attacks: Dict[str, ScoreMatrix] = {}
    for k, name in enumerate(_attack_names(config)):
        projection = latent @ directions[k]
        rows = []
        for i in range(config.n_instances):
            noise = prng_stream(seed, f"attack/{k}/instance/{i}").standard_normal(n)
            rows.append(projection + config.instance_noise_sigma * noise)
        attacks[name] = ScoreMatrix(name, np.stack(rows), seeds)

    # Shadow models trained with a sample shift it like the target does, canary memorization included
    in_shift = (config.member_signal_strength + config.canary_strength * canary) * float(axis @ directions[0])
    signals = _signals(config, base_latent, latent, directions[0], in_shift) if config.emit_signals else {}
    metadata = {
        "generator": "mia.simulator",
        "sim_config": config.to_dict(),
        "members": int(n_members),
        "non_members": int(n - n_members),
    }
    log.info(f"Generated {len(attacks)} attacks x {config.n_instances} instances over {n} samples (seed {seed})")
    return ExperimentBundle(
        ground_truth=GroundTruth(labels),
        attacks=attacks,
        signals=signals,
        canary_mask=canary if config.canary_fraction > 0 else None,
        metadata=metadata,
    )


def _signals(
    config: SimConfig, base_latent: np.ndarray, latent: np.ndarray, direction: np.ndarray, in_shift: np.ndarray
) -> Dict[str, np.ndarray]:
    """
    Loss and confidence signals of a target model whose logit margin is ``direction . latent``.

    Shadow models trained without a sample see only its base latent; shadow models trained with it see
    ``in_shift`` on top. Each instance redraws its shadow models with noise of scale ``instance_noise_sigma``.
    """
    n, sigma, m = config.n_samples, config.instance_noise_sigma, config.n_shadow_models
    margin_out = base_latent @ direction
    margin_in = margin_out + in_shift
    margin = latent @ direction
    target_loss = softplus(-margin)

    signals: Dict[str, np.ndarray] = {
        "target_loss": target_loss,
        "target_confidence": np.exp(-target_loss),
        "target_logits": _target_logits(config, latent, margin),
    }
    for i, seed_label in enumerate(_seed_labels(config)):
        rng = prng_stream(config.seed, f"signals/instance/{i}")
        out_losses = softplus(-(margin_out[:, None] + sigma * rng.standard_normal((n, m))))
        in_losses = softplus(-(margin_in[:, None] + sigma * rng.standard_normal((n, m))))
        shadow_loss = softplus(-(margin_out + sigma * rng.standard_normal(n)))
        signals[f"shadow_loss{INSTANCE_SEPARATOR}{seed_label}"] = shadow_loss
        signals[f"shadow_in_losses{INSTANCE_SEPARATOR}{seed_label}"] = in_losses
        signals[f"shadow_out_losses{INSTANCE_SEPARATOR}{seed_label}"] = out_losses
        signals[f"shadow_confidences{INSTANCE_SEPARATOR}{seed_label}"] = np.exp(-out_losses)
    return signals


def _target_logits(config: SimConfig, latent: np.ndarray, margin: np.ndarray) -> np.ndarray:
    """
    Per-class target logits. Each sample's own class holds ``margin`` and the other classes mix the latent
    linearly, shifted so their log-sum-exp is 0: the softmax confidence of the own class is then
    ``sigmoid(margin)``, equal to ``target_confidence``.
    """
    n, c = config.n_samples, config.n_classes
    classes = prng_stream(config.seed, "classes").integers(0, c, size=n)
    mixing = prng_stream(config.seed, "logits").standard_normal((config.latent_dim, c - 1))
    others = latent @ mixing
    others -= logsumexp(others, axis=1, keepdims=True)
    logits = np.empty((n, c))
    own = np.zeros((n, c), dtype=bool)
    own[np.arange(n), classes] = True
    logits[own] = margin
    logits[~own] = others.reshape(-1)
    return logits
