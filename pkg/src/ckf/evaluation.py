"""Prediction, error metrics and the static matrix-factorization baseline."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import orthogonal_procrustes

from .model import Dims, ModelParams, ObservationSet


class BaselineDivergenceError(ArithmeticError):
    pass


def smoothed_means(posteriors) -> np.ndarray:
    """Stack per-user smoothed means into an ``(N, T+1, K)`` array."""
    if isinstance(posteriors, np.ndarray):
        return posteriors
    return np.stack([p.x_smooth for p in posteriors])


def predict(params: ModelParams, posteriors, i: int, j: int, t: int) -> float:
    """Mean rating ``<x_{i,t|T}, V_j>`` of user ``i`` for item ``j`` at time ``t``."""
    d = params.dims
    if not (0 <= i < d.num_users and 0 <= j < d.num_items and 1 <= t <= d.num_steps):
        raise IndexError(f"query (user={i}, item={j}, time={t}) out of range for {d}")
    X = smoothed_means(posteriors)
    return float(X[i, t] @ params.V[j])


def predict_many(params: ModelParams, posteriors, users, items, times) -> np.ndarray:
    X = smoothed_means(posteriors)
    users, items, times = (np.asarray(a, dtype=np.int64) for a in (users, items, times))
    return np.einsum("nk,nk->n", X[users, times], params.V[items])


def predict_tensor(V: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Full ``(N, M, T)`` tensor of mean ratings from ``(N, T+1, K)`` states."""
    return np.einsum("ntk,mk->nmt", states[:, 1:], V)


def align(est_V: np.ndarray, true_V: np.ndarray) -> np.ndarray:
    """Orthogonal ``R`` minimising ``||est_V @ R - true_V||_F``."""
    R, _ = orthogonal_procrustes(est_V, true_V)
    return R


def _rmse(a, b) -> float:
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return math.sqrt(float(np.mean(diff * diff))) if diff.size else 0.0


@dataclass
class Metrics:
    rmse_tensor: float
    rmse_state: float
    rmse_V: float
    rmse_sigma: dict = field(default_factory=dict)
    aligned_rotation: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "rmse_tensor": self.rmse_tensor,
            "rmse_state": self.rmse_state,
            "rmse_V": self.rmse_V,
            "rmse_sigma": dict(self.rmse_sigma),
            "aligned_rotation": None if self.aligned_rotation is None else self.aligned_rotation.tolist(),
        }

    def to_json(self, **extra) -> str:
        return _dump_json({**self.to_dict(), **extra})


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def score(params: ModelParams, posteriors, truth) -> Metrics:
    """Compare an estimated model and its smoothed states against ground truth.

    ``rmse_tensor`` covers every (user, item, time) entry of the noiseless
    preference tensor.  State and item-factor errors are measured after
    rotating the estimate onto the truth with :func:`align`.
    """
    est_X = smoothed_means(posteriors)
    if est_X.shape != truth.states.shape or params.V.shape != truth.params.V.shape:
        raise ValueError(
            f"dimension mismatch: estimate states {est_X.shape}, V {params.V.shape}; "
            f"truth states {truth.states.shape}, V {truth.params.V.shape}"
        )
    R = align(params.V, truth.params.V)
    rmse_tensor = _rmse(predict_tensor(params.V, est_X), truth.preferences)
    rmse_state = _rmse(est_X @ R, truth.states)
    rmse_V = _rmse(params.V @ R, truth.params.V)
    rel = {}
    for name in ("sigma_u2", "sigma_q2", "sigma_r2"):
        est, true = getattr(params, name), getattr(truth.params, name)
        rel[name] = abs(est - true) / true if true > 0 else abs(est - true)
    return Metrics(rmse_tensor, rmse_state, rmse_V, rel, R)


@dataclass(frozen=True)
class BaselineConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    learning_rate: float = 0.01
    epochs: int = 60
    seed: int = 0
    init_scale: float = 0.1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularizers must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")


def baseline_objective(U, V, obs: ObservationSet, lambda1: float, lambda2: float) -> float:
    """Squared error on all ratings plus Frobenius penalties on ``U`` and ``V``."""
    resid = obs.ratings - np.einsum("nk,nk->n", U[obs.users], V[obs.items])
    return float(resid @ resid + lambda1 * np.sum(U * U) + lambda2 * np.sum(V * V))


@dataclass
class BaselineFit:
    U: np.ndarray
    V: np.ndarray
    objective: list

    def __iter__(self):
        return iter((self.U, self.V))

    def states(self, num_steps: int) -> np.ndarray:
        """Static user factors repeated over ``t = 0..T``."""
        return np.repeat(self.U[:, None, :], num_steps + 1, axis=1)


def fit_baseline(obs: ObservationSet, dims: Dims, config: BaselineConfig = BaselineConfig()) -> BaselineFit:
    """Static regularized factorization fit by SGD, ignoring rating times.

    The penalty of each user (item) row is spread over that row's ratings,
    so one epoch is an unbiased pass over the full objective.
    """
    if len(obs) == 0:
        raise ValueError("cannot fit the baseline without observations")
    K = dims.num_factors
    rng = np.random.default_rng(config.seed)
    U = rng.normal(0.0, config.init_scale, size=(dims.num_users, K))
    V = rng.normal(0.0, config.init_scale, size=(dims.num_items, K))
    users, items, ys = obs.users, obs.items, obs.ratings
    user_share = config.lambda1 / np.maximum(np.bincount(users, minlength=dims.num_users), 1)
    item_share = config.lambda2 / np.maximum(np.bincount(items, minlength=dims.num_items), 1)
    lr = config.learning_rate
    history = [baseline_objective(U, V, obs, config.lambda1, config.lambda2)]
    # divergence is detected from the objective below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            for n in rng.permutation(len(ys)):
                i, j = users[n], items[n]
                u, v = U[i], V[j]
                err = ys[n] - u @ v
                du = err * v - user_share[i] * u
                dv = err * u - item_share[j] * v
                U[i] = u + lr * du
                V[j] = v + lr * dv
            history.append(baseline_objective(U, V, obs, config.lambda1, config.lambda2))
            if not math.isfinite(history[-1]):
                raise BaselineDivergenceError(
                    f"baseline objective diverged at epoch {epoch + 1}; lower learning_rate")
    return BaselineFit(U, V, history)


def score_baseline(fit: BaselineFit, truth) -> float:
    """Tensor RMSE of the static baseline against the noiseless preferences."""
    return _rmse(predict_tensor(fit.V, fit.states(truth.states.shape[1] - 1)), truth.preferences)
