"""Untargeted poisoning attacks.

Parameter-space attacks work on flat parameter vectors (see
``EvidentialModel.parameter_vector``); ``label_flip`` corrupts data once
before training.  Attack strengths and the colluder set are fixed by the
configuration and the run seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import LabeledDataset
from .special import RngStream

__all__ = [
    "ATTACK_KINDS",
    "PARAMETER_ATTACKS",
    "AttackConfig",
    "AttackError",
    "select_malicious",
    "label_flip",
    "random_update",
    "lie_update",
    "mpaf_update",
    "stat_opt_update",
    "stat_opt_search",
]

ATTACK_KINDS = ("none", "label_flip", "random", "lie", "mpaf", "stat_opt")
PARAMETER_ATTACKS = ("random", "lie", "mpaf", "stat_opt")


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"
    malicious_ratio: float = 0.0
    z: float = 1.5
    lambda_scale: float = 100.0
    noise_sigma: float = 1.0
    gamma_min: float = 0.01
    gamma_max: float = 100.0
    encoder_only: bool = False

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.malicious_ratio < 1.0:
            raise AttackError("malicious_ratio must lie in [0, 1)")
        if self.lambda_scale <= 0 or self.noise_sigma <= 0:
            raise AttackError("lambda_scale and noise_sigma must be positive")
        if not 0 < self.gamma_min <= self.gamma_max:
            raise AttackError("need 0 < gamma_min <= gamma_max")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.malicious_ratio > 0.0


def select_malicious(seed: int, num_clients: int, ratio: float) -> frozenset[int]:
    """The first floor(N * ratio) ids of a seeded permutation of range(N)."""
    count = math.floor(num_clients * ratio + 1e-9)
    if count == 0:
        return frozenset()
    perm = RngStream.for_purpose(seed, "malicious-selection", num_clients).generator.permutation(
        num_clients
    )
    return frozenset(int(i) for i in perm[:count])


def label_flip(data: LabeledDataset) -> LabeledDataset:
    return LabeledDataset(data.features.copy(), data.k - 1 - data.labels, data.k)


def random_update(template: np.ndarray, sigma: float, rng: RngStream) -> np.ndarray:
    if sigma <= 0:
        raise AttackError("sigma must be positive")
    return rng.generator.normal(0.0, sigma, np.shape(template))


def _stack(benign: Sequence[np.ndarray]) -> np.ndarray:
    if len(benign) < 2:
        raise AttackError("need at least two benign updates")
    stacked = np.stack([np.asarray(b, dtype=np.float64) for b in benign])
    return stacked


def lie_update(benign: Sequence[np.ndarray], z: float) -> np.ndarray:
    """Coordinate-wise mean plus z population standard deviations."""
    stacked = _stack(benign)
    return stacked.mean(axis=0) + z * stacked.std(axis=0)


def mpaf_update(global_params: np.ndarray, base_params: np.ndarray, lambda_scale: float) -> np.ndarray:
    """Scaled pull ``lambda * (base - global)`` toward the attacker's base model."""
    g = np.asarray(global_params, dtype=np.float64)
    b = np.asarray(base_params, dtype=np.float64)
    if g.shape != b.shape:
        raise AttackError(f"shape mismatch {g.shape} vs {b.shape}")
    return lambda_scale * (b - g)


def stat_opt_update(benign: Sequence[np.ndarray], gamma: float) -> np.ndarray:
    """Benign mean moved gamma deviations against the sign of the mean."""
    stacked = _stack(benign)
    mean = stacked.mean(axis=0)
    return mean - gamma * np.sign(mean) * stacked.std(axis=0)


def stat_opt_search(
    benign: Sequence[np.ndarray],
    survives: Callable[[np.ndarray], bool],
    gamma_min: float = 0.01,
    gamma_max: float = 100.0,
) -> tuple[float, np.ndarray]:
    """Largest doubling-grid gamma in [gamma_min, gamma_max] whose update survives.

    ``survives`` simulates the deployed defense.  When nothing survives the
    smallest gamma is used.
    """
    best = gamma_min
    gamma = gamma_min
    while gamma <= gamma_max:
        if not survives(stat_opt_update(benign, gamma)):
            break
        best = gamma
        gamma *= 2.0
    return best, stat_opt_update(benign, best)
