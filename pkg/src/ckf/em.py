"""EM learning of the collaborative Kalman filter parameters.

The E-step smooths every user and reduces the posteriors to a handful of
moment sums; the M-step is closed form in those sums.  All reductions use
exactly-rounded summation (``math.fsum``), so learned parameters do not
depend on user labelling or on the number of worker threads.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .kalman import smooth_all, symmetrize
from .model import FULL, ISOTROPIC, Dims, ModelParams, ObservationSet, SmoothedPosterior

log = logging.getLogger(__name__)

PARAM_NAMES = ("sigma_u2", "sigma_q2", "sigma_r2", "A", "V")
VARIANCE_FLOOR = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


class EmDivergenceError(ArithmeticError):
    def __init__(self, message: str, trace: "EmTrace"):
        super().__init__(message)
        self.trace = trace


def _exact_sum(terms: np.ndarray) -> np.ndarray:
    """Sum over the leading axis with correctly rounded ``fsum`` per entry."""
    terms = np.asarray(terms, dtype=float)
    flat = terms.reshape(len(terms), -1)
    return np.array([math.fsum(col) for col in flat.T.tolist()]).reshape(terms.shape[1:])


def _grouped_exact_sum(keys: np.ndarray, terms: np.ndarray, num_groups: int) -> np.ndarray:
    out = np.zeros((num_groups,) + terms.shape[1:])
    if len(keys) == 0:
        return out
    order = np.argsort(keys, kind="stable")
    keys, terms = keys[order], terms[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    stops = np.r_[starts[1:], len(keys)]
    for a, b in zip(starts, stops):
        out[keys[a]] = _exact_sum(terms[a:b])
    return out


@dataclass(frozen=True, eq=False)
class SufficientStats:
    """Posterior moment sums feeding the M-step.

    ``S_t`` sums second moments over ``t = 1..T``, ``A1`` over ``t = 0..T-1``
    and ``A2`` the lagged cross moments.  ``V1[j]`` and ``V2[j]`` only
    collect (user, time) pairs where item ``j`` was rated.
    """

    Gamma1: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    S_t: np.ndarray
    V1: np.ndarray
    V2: np.ndarray
    r_yy: float
    obs_count: int
    num_users: int
    num_steps: int

    @property
    def r_yx(self) -> np.ndarray:
        # the rating/state cross term of the sigma_r2 update is the same sum as V2
        return self.V2


def accumulate_stats(posteriors: list[SmoothedPosterior], obs: ObservationSet, dims: Dims) -> SufficientStats:
    N, M, T, K = dims.num_users, dims.num_items, dims.num_steps, dims.num_factors
    X = np.stack([p.x_smooth for p in posteriors])
    P = np.stack([p.P_smooth for p in posteriors])
    L = np.stack([p.P_lag for p in posteriors])
    E = P + np.einsum("ntk,ntl->ntkl", X, X)
    cross = L[:, 1:] + np.einsum("ntk,ntl->ntkl", X[:, 1:], X[:, :-1])

    users, times, items, y = obs.users, obs.times, obs.items, obs.ratings
    return SufficientStats(
        Gamma1=_exact_sum(E[:, 0]),
        A1=_exact_sum(E[:, :-1].reshape(N * T, K, K)),
        A2=_exact_sum(cross.reshape(N * T, K, K)),
        S_t=_exact_sum(E[:, 1:].reshape(N * T, K, K)),
        V1=_grouped_exact_sum(items, E[users, times], M),
        V2=_grouped_exact_sum(items, y[:, None] * X[users, times], M),
        r_yy=math.fsum((y * y).tolist()),
        obs_count=len(y),
        num_users=N,
        num_steps=T,
    )


def e_step(params: ModelParams, obs: ObservationSet, threads: int = 1) -> tuple[SufficientStats, float]:
    posteriors, loglik = smooth_all(params, obs, threads=threads)
    return accumulate_stats(posteriors, obs, params.dims), loglik


def gamma2(stats: SufficientStats, A: np.ndarray) -> np.ndarray:
    """Expected process-noise scatter for transition matrix ``A``."""
    cross = A @ stats.A2.T
    return symmetrize(stats.S_t - cross - cross.T + A @ stats.A1 @ A.T)


def gamma3_trace(stats: SufficientStats, V: np.ndarray) -> float:
    """``tr(Gamma3)``: expected squared measurement residual summed over ratings."""
    quad = np.einsum("jk,jkl,jl->", V, stats.V1, V)
    return stats.r_yy - 2.0 * float(np.sum(stats.V2 * V)) + float(quad)


class VarianceUpdate(NamedTuple):
    sigma_u2: float
    sigma_q2: float
    sigma_r2: float | None  # None when there were no ratings to learn from


def m_step_variances(stats: SufficientStats, A: np.ndarray, V: np.ndarray, dims: Dims) -> VarianceUpdate:
    N, T, K = dims.num_users, dims.num_steps, dims.num_factors
    su2 = np.trace(stats.Gamma1) / (N * K)
    sq2 = np.trace(gamma2(stats, A)) / (N * K * T)
    sr2 = None
    if stats.obs_count > 0:
        sr2 = max(gamma3_trace(stats, V) / stats.obs_count, VARIANCE_FLOOR)
    return VarianceUpdate(max(float(su2), VARIANCE_FLOOR), max(float(sq2), VARIANCE_FLOOR), sr2)


def _floor_eigenvalues(S: np.ndarray, floor: float = VARIANCE_FLOOR) -> np.ndarray:
    S = symmetrize(S)
    w, U = np.linalg.eigh(S)
    if w.min() >= floor:
        return S
    return symmetrize((U * np.maximum(w, floor)) @ U.T)


def m_step_full_cov(stats: SufficientStats, A: np.ndarray, dims: Dims) -> tuple[np.ndarray, np.ndarray]:
    N, T = dims.num_users, dims.num_steps
    Sigma0 = _floor_eigenvalues(stats.Gamma1 / N)
    Q = _floor_eigenvalues(gamma2(stats, A) / (N * T))
    return Sigma0, Q


def _solve_spd_right(B: np.ndarray, S: np.ndarray, what: str) -> np.ndarray:
    """Solve ``X S = B`` for symmetric PSD ``S``, adding a small ridge if needed."""
    K = len(S)
    try:
        c = cho_factor(S, lower=True, check_finite=False)
        if np.all(np.diag(c[0]) > 0) and np.all(np.isfinite(c[0])):
            return cho_solve(c, B.T, check_finite=False).T
    except LinAlgError:
        pass
    ridge = 1e-10 * np.trace(S) / K
    warnings.warn(f"{what} is rank deficient; adding ridge {ridge:.3g}", RuntimeWarning, stacklevel=3)
    if ridge <= 0:
        return B @ np.linalg.pinv(S)
    c = cho_factor(S + ridge * np.eye(K), lower=True, check_finite=False)
    return cho_solve(c, B.T, check_finite=False).T


def m_step_A(stats: SufficientStats) -> np.ndarray:
    """Transition matrix solving ``A @ A1 = A2``."""
    return _solve_spd_right(stats.A2, stats.A1, "A1")


def m_step_V(stats: SufficientStats, prev_V: np.ndarray) -> np.ndarray:
    """Row-wise least squares ``V_j @ V1[j] = V2[j]``.

    Items that were never rated keep their previous row.
    """
    V = np.array(prev_V, dtype=float, copy=True)
    for j in range(len(V)):
        V1j = stats.V1[j]
        if not np.any(V1j):
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            V[j] = _solve_spd_right(stats.V2[j][None, :], V1j, f"V1({j})")[0]
    return V


def expected_loglik(params: ModelParams, stats: SufficientStats) -> tuple[float, float, float]:
    """Expected complete-data log-likelihood split into prior, dynamics and rating terms."""
    N, T, K = stats.num_users, stats.num_steps, params.dims.num_factors
    n = stats.obs_count
    if params.cov_mode == FULL:
        Sigma0, Q = params.prior_cov(), params.process_cov()
        L1 = (-0.5 * N * K * LOG_2PI - 0.5 * N * np.linalg.slogdet(Sigma0)[1]
              - 0.5 * np.trace(np.linalg.solve(Sigma0, stats.Gamma1)))
        L2 = (-0.5 * N * T * K * LOG_2PI - 0.5 * N * T * np.linalg.slogdet(Q)[1]
              - 0.5 * np.trace(np.linalg.solve(Q, gamma2(stats, params.A))))
    else:
        su2, sq2 = params.sigma_u2, params.sigma_q2
        L1 = -0.5 * N * K * (LOG_2PI + math.log(su2)) - np.trace(stats.Gamma1) / (2 * su2)
        L2 = (-0.5 * N * T * K * (LOG_2PI + math.log(sq2))
              - np.trace(gamma2(stats, params.A)) / (2 * sq2))
    sr2 = params.sigma_r2
    L3 = -0.5 * n * (LOG_2PI + math.log(sr2)) - gamma3_trace(stats, params.V) / (2 * sr2)
    return float(L1), float(L2), float(L3)


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 50
    rel_tol: float = 1e-5
    update_set: frozenset = frozenset(PARAM_NAMES)
    init: str = "moment"
    seed: int = 0
    cov_mode: str = ISOTROPIC
    threads: int = 1
    balance_scale: bool = True

    def __post_init__(self):
        object.__setattr__(self, "update_set", frozenset(self.update_set))
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if not self.update_set:
            raise ValueError("update_set must name at least one parameter")
        unknown = self.update_set - set(PARAM_NAMES)
        if unknown:
            raise ValueError(f"unknown parameters in update_set: {sorted(unknown)}")
        if self.init not in INIT_POLICIES:
            raise ValueError(f"unknown init policy {self.init!r}; expected one of {sorted(INIT_POLICIES)}")
        if self.cov_mode not in (ISOTROPIC, FULL):
            raise ValueError(f"unknown cov_mode {self.cov_mode!r}")


@dataclass
class EmTraceRow:
    iter: int
    loglik: float
    sigma_u2: float
    sigma_q2: float
    sigma_r2: float
    normA: float
    normV: float
    rmse_state: float | None = None
    rmse_tensor: float | None = None


@dataclass
class EmTrace:
    rows: list[EmTraceRow] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, k):
        return self.rows[k]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    @property
    def logliks(self) -> np.ndarray:
        return self.column("loglik")

    def write_csv(self, path) -> None:
        cols = ["iter", "loglik", "sigma_u2", "sigma_q2", "sigma_r2", "normA", "normV"]
        if any(r.rmse_state is not None for r in self.rows):
            cols += ["rmse_state", "rmse_tensor"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r.iter] + [format(getattr(r, c), ".17g") for c in cols[1:]])


def _rating_variance(obs: ObservationSet) -> float:
    var = float(np.var(obs.ratings)) if len(obs) > 1 else 1.0
    return var if var > 0 else 1.0


def _moment_init(obs: ObservationSet, dims: Dims, config: EmConfig) -> ModelParams:
    """Identity dynamics, random ``V``, rating variance split between signal and noise.

    ``V`` entries are ``N(0, 1/K)`` so rows have unit expected squared norm;
    with ``sigma_u2 = sigma_r2 = var/2`` the prior predictive variance of a
    rating equals the sample variance.
    """
    K = dims.num_factors
    rng = np.random.default_rng(config.seed)
    half = 0.5 * _rating_variance(obs)
    V = rng.normal(0.0, math.sqrt(1.0 / K), size=(dims.num_items, K))
    return ModelParams(dims, np.eye(K), V, half, 0.1 * half, half)


def _sample_variance_init(obs: ObservationSet, dims: Dims, config: EmConfig) -> ModelParams:
    # every variance started at the full rating variance
    K = dims.num_factors
    rng = np.random.default_rng(config.seed)
    var = _rating_variance(obs)
    V = rng.normal(0.0, math.sqrt(1.0 / K), size=(dims.num_items, K))
    return ModelParams(dims, np.eye(K), V, var, 0.1 * var, var)


INIT_POLICIES = {"moment": _moment_init, "sample_variance": _sample_variance_init}


def initial_params(obs: ObservationSet, dims: Dims, config: EmConfig) -> ModelParams:
    params = INIT_POLICIES[config.init](obs, dims, config)
    if config.cov_mode == FULL:
        K = dims.num_factors
        params = params.replace(cov_mode=FULL, Sigma0=params.sigma_u2 * np.eye(K),
                                Q=params.sigma_q2 * np.eye(K))
    return params


def m_step(stats: SufficientStats, params: ModelParams, update_set) -> ModelParams:
    """One closed-form maximisation from shared statistics: V, then A, then noise."""
    dims = params.dims
    V = m_step_V(stats, params.V) if "V" in update_set else params.V
    A = m_step_A(stats) if "A" in update_set else params.A
    var = m_step_variances(stats, A, V, dims)
    changes = dict(A=A, V=V)
    if "sigma_r2" in update_set and var.sigma_r2 is not None:
        changes["sigma_r2"] = var.sigma_r2
    if params.cov_mode == FULL:
        Sigma0, Q = m_step_full_cov(stats, A, dims)
        K = dims.num_factors
        if "sigma_u2" in update_set:
            changes.update(Sigma0=Sigma0, sigma_u2=np.trace(Sigma0) / K)
        if "sigma_q2" in update_set:
            changes.update(Q=Q, sigma_q2=np.trace(Q) / K)
    else:
        if "sigma_u2" in update_set:
            changes["sigma_u2"] = var.sigma_u2
        if "sigma_q2" in update_set:
            changes["sigma_q2"] = var.sigma_q2
    return params.replace(**changes)


def balance_scale(params: ModelParams) -> ModelParams:
    """Rescale the latent space so the mean-square entry of ``V`` equals ``sigma_u2``.

    ``x -> c x`` with ``V -> V / c`` and state variances times ``c**2`` leaves
    the rating distribution unchanged, so the marginal likelihood is the same
    before and after; this only pins down the otherwise arbitrary scale.
    """
    K = params.dims.num_factors
    prior_var = np.trace(params.prior_cov()) / K
    v_ms = float(np.mean(params.V * params.V))
    if not (prior_var > 0 and v_ms > 0):
        return params
    c2 = math.sqrt(v_ms / prior_var)
    changes = dict(V=params.V / math.sqrt(c2), sigma_u2=params.sigma_u2 * c2, sigma_q2=params.sigma_q2 * c2)
    if params.cov_mode == FULL:
        changes.update(Sigma0=params.Sigma0 * c2, Q=params.Q * c2)
    return params.replace(**changes)


GAUGE_PARAMS = frozenset({"V", "sigma_u2", "sigma_q2"})


@dataclass
class EmResult:
    params: ModelParams
    posteriors: list[SmoothedPosterior]
    trace: EmTrace
    converged: bool

    def __iter__(self):
        return iter((self.params, self.posteriors, self.trace))


Diagnostics = Callable[[ModelParams, list], tuple[float, float]]


def run_em(
    obs: ObservationSet,
    dims: Dims,
    config: EmConfig = EmConfig(),
    init_params: ModelParams | None = None,
    diagnostics: Diagnostics | None = None,
) -> EmResult:
    """Fit parameters by EM.

    Trace row 0 describes the initial parameters; row ``k`` the parameters
    after ``k`` M-steps, with the marginal log-likelihood evaluated at
    those parameters.  Stops after ``config.max_iters`` M-steps or once the
    relative log-likelihood gain drops below ``config.rel_tol``.  The
    returned posteriors are those of the returned parameters.
    """
    if len(obs) == 0:
        raise ValueError("cannot fit a model without observations")
    params = init_params if init_params is not None else initial_params(obs, dims, config)
    trace = EmTrace()

    def record(k, params, posteriors, loglik):
        row = EmTraceRow(k, loglik, params.sigma_u2, params.sigma_q2, params.sigma_r2,
                         float(np.linalg.norm(params.A)), float(np.linalg.norm(params.V)))
        if diagnostics is not None:
            row.rmse_state, row.rmse_tensor = diagnostics(params, posteriors)
        trace.rows.append(row)
        if not math.isfinite(loglik):
            raise EmDivergenceError(f"log-likelihood became non-finite at iteration {k}", trace)
        log.info("iter %d loglik %.6f sigma2=(%.4g, %.4g, %.4g)", k, loglik,
                 params.sigma_u2, params.sigma_q2, params.sigma_r2)

    posteriors, loglik = smooth_all(params, obs, threads=config.threads)
    record(0, params, posteriors, loglik)
    converged = False
    for k in range(1, config.max_iters + 1):
        stats = accumulate_stats(posteriors, obs, dims)
        params = m_step(stats, params, config.update_set)
        if config.balance_scale and GAUGE_PARAMS <= config.update_set:
            params = balance_scale(params)
        prev = loglik
        posteriors, loglik = smooth_all(params, obs, threads=config.threads)
        record(k, params, posteriors, loglik)
        if (loglik - prev) / abs(prev) < config.rel_tol:
            converged = True
            break
    return EmResult(params, posteriors, trace, converged)
