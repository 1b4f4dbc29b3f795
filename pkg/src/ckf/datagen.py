"""Synthetic ratings drawn from the state space model.

A single seeded generator is consumed in a fixed order (transition,
item factors, initial states, process noise, sampled triplets, rating
noise), so a config always reproduces the same data bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Dims, ModelParams, ObservationSet, ValidationError


@dataclass(frozen=True)
class GenConfig:
    dims: Dims
    sigma_u2: float = 1.0
    sigma_v2: float = 1.0
    sigma_q2: float = 0.05
    sigma_r2: float = 0.1
    identity_weight: float = 0.9
    sampling_factor: float = 0.005
    seed: int = 0

    def __post_init__(self):
        problems = []
        if not 0.0 <= self.identity_weight <= 1.0:
            problems.append("identity_weight must lie in [0, 1]")
        if not 0.0 < self.sampling_factor <= 1.0:
            problems.append("sampling_factor must lie in (0, 1]")
        elif self.num_observations < 1:
            problems.append("sampling_factor is too small to draw a single observation")
        for name in ("sigma_u2", "sigma_v2", "sigma_q2"):
            if not getattr(self, name) >= 0:
                problems.append(f"{name} must be nonnegative")
        if not self.sigma_r2 >= 0:
            problems.append("sigma_r2 must be nonnegative")
        if not self.sigma_u2 > 0:
            problems.append("sigma_u2 must be positive")
        if self.sigma_q2 >= self.sigma_u2 > 0:
            problems.append("process noise exceeds state power budget")
        if problems:
            raise ValidationError(problems)

    @property
    def num_observations(self) -> int:
        d = self.dims
        return int(round(self.sampling_factor * d.num_users * d.num_items * d.num_steps))


@dataclass(frozen=True, eq=False)
class GroundTruth:
    params: ModelParams
    states: np.ndarray       # (N, T+1, K)
    preferences: np.ndarray  # (N, M, T), entry [i, j, t-1] is <x_{i,t}, V_j>


def build_transition(K: int, identity_weight: float, sigma_u2: float, sigma_q2: float,
                     seed: int | np.random.Generator = 0) -> np.ndarray:
    """Scaled rotation close to a mix of the identity and a Gaussian matrix.

    ``A0 = w I + (1 - w) G`` with ``G`` iid ``N(0, 1/K)`` is replaced by its
    orthogonal polar factor and scaled by ``sqrt(1 - sigma_q2 / sigma_u2)``.
    Then ``A (sigma_u2 I) A^T + sigma_q2 I = sigma_u2 I``: the isotropic
    initial distribution is stationary and the state power stays ``K sigma_u2``
    at every step.  In particular ``sigma_u2 ||A||_F^2 + K sigma_q2 = K sigma_u2``.
    """
    if not 0.0 <= identity_weight <= 1.0:
        raise ValueError("identity_weight must lie in [0, 1]")
    if not sigma_u2 > 0:
        raise ValueError("sigma_u2 must be positive")
    if sigma_q2 >= sigma_u2:
        raise ValueError("process noise exceeds state power budget")
    rng = np.random.default_rng(seed)
    G = rng.normal(0.0, math.sqrt(1.0 / K), size=(K, K))
    A0 = identity_weight * np.eye(K) + (1.0 - identity_weight) * G
    if identity_weight == 1.0:
        rotation = np.eye(K)
    else:
        left, _, right = np.linalg.svd(A0)
        rotation = left @ right
    c = math.sqrt(max(0.0, K * sigma_u2 - K * sigma_q2) / (sigma_u2 * K))
    return c * rotation


def generate(config: GenConfig) -> tuple[GroundTruth, ObservationSet]:
    d = config.dims
    N, M, T, K = d.num_users, d.num_items, d.num_steps, d.num_factors
    rng = np.random.default_rng(config.seed)

    A = build_transition(K, config.identity_weight, config.sigma_u2, config.sigma_q2, rng)
    V = rng.normal(0.0, math.sqrt(config.sigma_v2), size=(M, K))
    states = np.empty((N, T + 1, K))
    states[:, 0] = rng.normal(0.0, math.sqrt(config.sigma_u2), size=(N, K))
    noise = rng.normal(0.0, math.sqrt(config.sigma_q2), size=(T, N, K))
    for t in range(1, T + 1):
        states[:, t] = states[:, t - 1] @ A.T + noise[t - 1]
    preferences = np.einsum("ntk,mk->nmt", states[:, 1:], V)

    flat = np.sort(rng.choice(N * M * T, size=config.num_observations, replace=False))
    users, rest = np.divmod(flat, M * T)
    items, tidx = np.divmod(rest, T)
    clean = preferences[users, items, tidx]
    ratings = clean + rng.normal(0.0, math.sqrt(config.sigma_r2), size=len(flat))

    params = ModelParams(d, A, V, config.sigma_u2, config.sigma_q2, max(config.sigma_r2, 0.0),
                         meta={"seed": config.seed})
    truth = GroundTruth(params, states, preferences)
    obs = ObservationSet(d, users, items, tidx + 1, ratings)
    return truth, obs
