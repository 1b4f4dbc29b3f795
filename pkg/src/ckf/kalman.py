"""Per-user Kalman filter and RTS smoother with lag-one covariances.

Each user runs an independent linear-Gaussian smoother; the users are
coupled only through the shared item-factor matrix ``V`` whose rows form
the measurement matrices.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .model import FilterTrace, ModelParams, ObservationSet, SmoothedPosterior

LOG_2PI = math.log(2.0 * math.pi)


class NumericalError(ArithmeticError):
    """A covariance that must be positive definite was not."""


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


@dataclass(frozen=True)
class MeasurementSlice:
    """Ratings of one user at one time step.

    ``H`` holds the rows of ``V`` for ``items``, in the same order.
    """

    items: np.ndarray
    y: np.ndarray
    H: np.ndarray

    @classmethod
    def build(cls, items, y, V: np.ndarray) -> "MeasurementSlice":
        items = np.asarray(items, dtype=np.int64)
        return cls(items, np.asarray(y, dtype=float), V[items])

    def __len__(self) -> int:
        return len(self.items)


def predict_step(x_filt, P_filt, A, Q):
    """Propagate a filtered moment pair one step through ``x' = A x + w``."""
    x_pred = A @ x_filt
    P_pred = symmetrize(A @ P_filt @ A.T + Q)
    return x_pred, P_pred


def update_step(x_pred, P_pred, slice: MeasurementSlice, sigma_r2: float):
    """Condition a predicted state on the ratings in ``slice``.

    Returns ``(x_filt, P_filt, gain, loglik)`` where ``loglik`` is the log
    density of the ratings under the one-step predictive distribution.  An
    empty slice leaves the prediction unchanged and contributes zero.
    """
    K = len(x_pred)
    n = len(slice)
    if n == 0:
        return x_pred, P_pred, np.zeros((K, 0)), 0.0
    if not sigma_r2 > 0:
        raise NumericalError("measurement variance must be positive")
    H = slice.H
    HP = H @ P_pred
    S = HP @ H.T
    S[np.diag_indices(n)] += sigma_r2
    resid = slice.y - H @ x_pred
    try:
        c, lower = cho_factor(S, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise NumericalError("innovation covariance is not positive definite") from exc
    diag = np.diag(c)
    if not np.all(diag > 0) or not np.all(np.isfinite(diag)):
        raise NumericalError("innovation covariance is numerically singular")
    sol = cho_solve((c, lower), np.column_stack([HP, resid]), check_finite=False)
    gain = sol[:, :K].T
    alpha = sol[:, K]
    x_filt = x_pred + gain @ resid
    P_filt = symmetrize(P_pred - gain @ HP)
    loglik = -0.5 * (n * LOG_2PI + 2.0 * np.log(diag).sum() + resid @ alpha)
    return x_filt, P_filt, gain, float(loglik)


def _slices(user: int, params: ModelParams, obs: ObservationSet) -> list[MeasurementSlice]:
    return [MeasurementSlice.build(items, ys, params.V) for items, ys in obs.user_slices(user)]


def filter_user(user: int, params: ModelParams, obs: ObservationSet, slices=None) -> FilterTrace:
    T, K = params.dims.num_steps, params.dims.num_factors
    if slices is None:
        slices = _slices(user, params, obs)
    A, Q = params.A, params.process_cov()
    x_pred = np.zeros((T + 1, K))
    P_pred = np.zeros((T + 1, K, K))
    x_filt = np.zeros((T + 1, K))
    P_filt = np.zeros((T + 1, K, K))
    P_pred[0] = P_filt[0] = params.prior_cov()
    gain = np.zeros((K, 0))
    total = 0.0
    for t in range(1, T + 1):
        x_pred[t], P_pred[t] = predict_step(x_filt[t - 1], P_filt[t - 1], A, Q)
        x_filt[t], P_filt[t], gain, ll = update_step(x_pred[t], P_pred[t], slices[t], params.sigma_r2)
        total += ll
    return FilterTrace(user, x_pred, P_pred, x_filt, P_filt, gain, total)


def _smoother_gain(P_filt, A, P_pred_next):
    # J = P_filt A^T P_pred_next^{-1}, via a solve on the symmetric P_pred_next
    rhs = A @ P_filt
    try:
        c = cho_factor(P_pred_next, lower=True, check_finite=False)
        if np.all(np.diag(c[0]) > 0):
            return cho_solve(c, rhs, check_finite=False).T
    except LinAlgError:
        pass
    K = len(P_pred_next)
    ridge = 1e-12 * np.trace(P_pred_next) / K
    if ridge > 0:
        try:
            c = cho_factor(P_pred_next + ridge * np.eye(K), lower=True, check_finite=False)
            return cho_solve(c, rhs, check_finite=False).T
        except LinAlgError:
            pass
    return (np.linalg.pinv(P_pred_next) @ rhs).T


def smooth_user(trace: FilterTrace, params: ModelParams, obs: ObservationSet, slices=None) -> SmoothedPosterior:
    """Backward RTS pass plus lag-one covariances for one user."""
    T, K = params.dims.num_steps, params.dims.num_factors
    A = params.A
    x_s = trace.x_filt.copy()
    P_s = trace.P_filt.copy()
    J = np.zeros((T, K, K))
    for t in range(T - 1, -1, -1):
        J[t] = _smoother_gain(trace.P_filt[t], A, trace.P_pred[t + 1])
        x_s[t] = trace.x_filt[t] + J[t] @ (x_s[t + 1] - trace.x_pred[t + 1])
        P_s[t] = symmetrize(trace.P_filt[t] + J[t] @ (P_s[t + 1] - trace.P_pred[t + 1]) @ J[t].T)

    P_lag = np.zeros((T + 1, K, K))
    if slices is None:
        H_last = params.V[obs.group(trace.user, T)[0]]
    else:
        H_last = slices[T].H
    KH = trace.gain_last @ H_last if trace.gain_last.shape[1] else np.zeros((K, K))
    P_lag[T] = (np.eye(K) - KH) @ A @ trace.P_filt[T - 1]
    for t in range(T - 1, 0, -1):
        P_lag[t] = (trace.P_filt[t] @ J[t - 1].T
                    + J[t] @ (P_lag[t + 1] - A @ trace.P_filt[t]) @ J[t - 1].T)
    return SmoothedPosterior(trace.user, x_s, P_s, P_lag)


def run_user(user: int, params: ModelParams, obs: ObservationSet) -> tuple[SmoothedPosterior, float]:
    slices = _slices(user, params, obs)
    trace = filter_user(user, params, obs, slices)
    return smooth_user(trace, params, obs, slices), trace.loglik


def smooth_all(params: ModelParams, obs: ObservationSet, threads: int = 1):
    """Smooth every user independently.

    Returns ``(posteriors, total_loglik)`` with posteriors ordered by user
    index.  The log-likelihood is summed in user order, so results do not
    depend on ``threads``.
    """
    users = range(params.dims.num_users)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda i: run_user(i, params, obs), users))
    else:
        results = [run_user(i, params, obs) for i in users]
    posteriors = [r[0] for r in results]
    total = math.fsum(r[1] for r in results)
    return posteriors, total
