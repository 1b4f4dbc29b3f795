"""Domain types shared by the filter, EM, generator and evaluation code.

Time convention: latent states exist at ``t = 0..T`` and ratings at
``t = 1..T``.  ``x_{i,0}`` carries the prior ``N(0, Sigma0)``; in the
default isotropic mode ``Sigma0 = sigma_u2 * I`` and the process noise is
``sigma_q2 * I``.  The number of latent factors ``K`` is a free modelling
choice and is not tied to ``N`` or ``M``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

ISOTROPIC = "isotropic"
FULL = "full"
COV_MODES = (ISOTROPIC, FULL)


class ValidationError(ValueError):
    """Raised when model parameters or observations break an invariant.

    ``violations`` holds one message per problem found.
    """

    def __init__(self, violations: Iterable[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dims:
    num_users: int
    num_items: int
    num_steps: int
    num_factors: int

    def __post_init__(self):
        bad = [
            f"{name} must be a positive integer (got {value!r})"
            for name, value in self.as_dict().items()
            if not isinstance(value, (int, np.integer)) or value < 1
        ]
        if bad:
            raise ValidationError(bad)

    def as_dict(self) -> dict:
        return {
            "num_users": self.num_users,
            "num_items": self.num_items,
            "num_steps": self.num_steps,
            "num_factors": self.num_factors,
        }

    def with_factors(self, k: int) -> "Dims":
        return Dims(self.num_users, self.num_items, self.num_steps, k)


def _observation_violations(dims: Dims, users, items, times, ratings) -> list[str]:
    out = []
    n = len(users)
    if not (len(items) == len(times) == len(ratings) == n):
        return ["observation columns have different lengths"]
    if n == 0:
        return out
    checks = [
        ("user", users, 0, dims.num_users - 1),
        ("item", items, 0, dims.num_items - 1),
        ("time", times, 1, dims.num_steps),
    ]
    for name, col, lo, hi in checks:
        bad = np.flatnonzero((col < lo) | (col > hi))
        for k in bad[:10]:
            out.append(f"{name} index {int(col[k])} out of range [{lo}, {hi}] at row {int(k)}")
        if len(bad) > 10:
            out.append(f"... {len(bad) - 10} more {name} indices out of range")
    if not np.all(np.isfinite(ratings)):
        out.append("ratings must be finite")
    keys = np.stack([users, times, items], axis=1)
    uniq, counts = np.unique(keys, axis=0, return_counts=True)
    for (u, t, j) in uniq[counts > 1][:10]:
        out.append(f"duplicate observation (user={int(u)}, item={int(j)}, time={int(t)})")
    return out


class ObservationSet:
    """Sparse ratings grouped by (user, time).

    Rows are stored in canonical order: sorted by user, then time, then item,
    so the grouping does not depend on the order the ratings were supplied.
    """

    def __init__(self, dims: Dims, users, items, times, ratings, *, check: bool = True):
        users = np.asarray(users, dtype=np.int64).reshape(-1)
        items = np.asarray(items, dtype=np.int64).reshape(-1)
        times = np.asarray(times, dtype=np.int64).reshape(-1)
        ratings = np.asarray(ratings, dtype=float).reshape(-1)
        if check:
            problems = _observation_violations(dims, users, items, times, ratings)
            if problems:
                raise ValidationError(problems)
        order = np.lexsort((items, times, users))
        self.dims = dims
        self.users = _frozen(users[order], np.int64)
        self.items = _frozen(items[order], np.int64)
        self.times = _frozen(times[order], np.int64)
        self.ratings = _frozen(ratings[order])
        self._groups = None

    @classmethod
    def empty(cls, dims: Dims) -> "ObservationSet":
        return cls(dims, [], [], [], [])

    @classmethod
    def from_triplets(cls, dims: Dims, rows: Iterable[tuple]) -> "ObservationSet":
        rows = list(rows)
        if not rows:
            return cls.empty(dims)
        u, j, t, r = zip(*rows)
        return cls(dims, u, j, t, r)

    def __len__(self) -> int:
        return len(self.ratings)

    def __repr__(self) -> str:
        return f"ObservationSet({self.dims}, count={len(self)})"

    @property
    def count(self) -> int:
        return len(self.ratings)

    def _build_groups(self):
        # user -> list over t = 0..T of (items, ratings); entry 0 is always empty
        T = self.dims.num_steps
        empty_i = _frozen(np.empty(0, dtype=np.int64), np.int64)
        empty_r = _frozen(np.empty(0))
        groups = {}
        if len(self):
            key = self.users * (T + 1) + self.times
            starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
            stops = np.r_[starts[1:], len(key)]
            for a, b in zip(starts, stops):
                u, t = int(self.users[a]), int(self.times[a])
                per_user = groups.setdefault(u, [(empty_i, empty_r)] * (T + 1))
                per_user[t] = (self.items[a:b], self.ratings[a:b])
        self._groups = groups

    def user_slices(self, user: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-time ``(items, ratings)`` pairs for one user, indexed ``0..T``."""
        if self._groups is None:
            self._build_groups()
        got = self._groups.get(int(user))
        if got is None:
            e = (np.empty(0, dtype=np.int64), np.empty(0))
            return [e] * (self.dims.num_steps + 1)
        return got

    def group(self, user: int, time: int) -> tuple[np.ndarray, np.ndarray]:
        return self.user_slices(user)[time]

    def index(self) -> dict[tuple[int, int], list[tuple[int, float]]]:
        """Mapping ``(user, time) -> [(item, rating), ...]`` for observed pairs."""
        if self._groups is None:
            self._build_groups()
        out = {}
        for u, per_t in self._groups.items():
            for t, (items, ys) in enumerate(per_t):
                if len(items):
                    out[(u, t)] = list(zip(items.tolist(), ys.tolist()))
        return out

    def triplets(self) -> list[tuple[int, int, int, float]]:
        return list(zip(self.users.tolist(), self.items.tolist(),
                        self.times.tolist(), self.ratings.tolist()))


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Parameter set ``{A, V, sigma_u2, sigma_q2, sigma_r2}``.

    In ``full`` mode ``Sigma0`` and ``Q`` replace the isotropic prior and
    process covariances; measurement noise stays ``sigma_r2 * I``.
    """

    dims: Dims
    A: np.ndarray
    V: np.ndarray
    sigma_u2: float
    sigma_q2: float
    sigma_r2: float
    cov_mode: str = ISOTROPIC
    Sigma0: np.ndarray | None = None
    Q: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "A", _frozen(self.A))
        object.__setattr__(self, "V", _frozen(self.V))
        for name in ("sigma_u2", "sigma_q2", "sigma_r2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("Sigma0", "Q"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _frozen(value))

    @property
    def K(self) -> int:
        return self.dims.num_factors

    def prior_cov(self) -> np.ndarray:
        if self.cov_mode == FULL and self.Sigma0 is not None:
            return np.array(self.Sigma0)
        return self.sigma_u2 * np.eye(self.K)

    def process_cov(self) -> np.ndarray:
        if self.cov_mode == FULL and self.Q is not None:
            return np.array(self.Q)
        return self.sigma_q2 * np.eye(self.K)

    def replace(self, **changes) -> "ModelParams":
        fields = dict(
            dims=self.dims, A=self.A, V=self.V, sigma_u2=self.sigma_u2,
            sigma_q2=self.sigma_q2, sigma_r2=self.sigma_r2, cov_mode=self.cov_mode,
            Sigma0=self.Sigma0, Q=self.Q, meta=dict(self.meta),
        )
        fields.update(changes)
        return ModelParams(**fields)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            self.dims == other.dims
            and same(self.A, other.A) and same(self.V, other.V)
            and self.sigma_u2 == other.sigma_u2
            and self.sigma_q2 == other.sigma_q2
            and self.sigma_r2 == other.sigma_r2
            and self.cov_mode == other.cov_mode
            and same(self.Sigma0, other.Sigma0) and same(self.Q, other.Q)
        )

    __hash__ = None


def _psd_violations(name: str, M: np.ndarray, K: int) -> list[str]:
    if M is None:
        return [f"{name} is required in full covariance mode"]
    if M.shape != (K, K):
        return [f"{name} must be {K}x{K} (got {M.shape[0]}x{M.shape[1] if M.ndim > 1 else 1})"]
    out = []
    scale = max(np.abs(M).max(), 1e-300)
    if np.abs(M - M.T).max() > 1e-10 * scale:
        out.append(f"{name} is not symmetric")
    else:
        lo = np.linalg.eigvalsh((M + M.T) / 2).min()
        if lo < -1e-10 * np.linalg.norm(M, 2):
            out.append(f"{name} is not positive semidefinite (min eigenvalue {lo:.3g})")
    return out


def param_violations(params: ModelParams) -> list[str]:
    dims, K = params.dims, params.dims.num_factors
    out = []
    if params.A.shape != (K, K):
        out.append(f"A must be {K}x{K} (got shape {params.A.shape})")
    if params.V.shape != (dims.num_items, K):
        out.append(f"V must be {dims.num_items}x{K} (got shape {params.V.shape})")
    for name in ("A", "V"):
        if not np.all(np.isfinite(getattr(params, name))):
            out.append(f"{name} contains non-finite entries")
    if not params.sigma_u2 > 0:
        out.append("initial-state variance must be positive")
    if not params.sigma_q2 >= 0:
        out.append("process noise variance must be nonnegative")
    if not params.sigma_r2 > 0:
        out.append("measurement variance must be positive")
    if params.cov_mode not in COV_MODES:
        out.append(f"unknown cov_mode {params.cov_mode!r}")
    elif params.cov_mode == FULL:
        out += _psd_violations("Sigma0", params.Sigma0, K)
        out += _psd_violations("Q", params.Q, K)
    return out


def validate(params: ModelParams, obs: ObservationSet) -> tuple[ModelParams, ObservationSet]:
    """Check every invariant of a (params, observations) pair.

    Returns the pair unchanged, or raises :class:`ValidationError` listing
    all violations at once.
    """
    problems = param_violations(params)
    if obs.dims.num_users != params.dims.num_users or obs.dims.num_items != params.dims.num_items \
            or obs.dims.num_steps != params.dims.num_steps:
        problems.append(f"dimension mismatch: params {params.dims} vs observations {obs.dims}")
    problems += _observation_violations(params.dims, obs.users, obs.items, obs.times, obs.ratings)
    if problems:
        raise ValidationError(problems)
    return params, obs


@dataclass(frozen=True, eq=False)
class FilterTrace:
    """Forward-pass moments for one user.

    Arrays are indexed by time ``0..T``.  Slot 0 of ``x_pred``/``P_pred``
    holds the prior, which is also what ``x_filt[0]``/``P_filt[0]`` contain.
    ``gain_last`` is ``K_{i,T}`` (shape ``K x n_T``, possibly ``K x 0``).
    """

    user: int
    x_pred: np.ndarray
    P_pred: np.ndarray
    x_filt: np.ndarray
    P_filt: np.ndarray
    gain_last: np.ndarray
    loglik: float


@dataclass(frozen=True, eq=False)
class SmoothedPosterior:
    """Smoothed moments for one user.

    ``x_smooth``: ``(T+1, K)``, ``P_smooth``: ``(T+1, K, K)``.
    ``P_lag[t]`` is ``Cov(x_t, x_{t-1} | y_{1:T})`` for ``t = 1..T``;
    ``P_lag[0]`` is unused and left at zero.
    """

    user: int
    x_smooth: np.ndarray
    P_smooth: np.ndarray
    P_lag: np.ndarray
