import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ckf.model import Dims, ModelParams, ObservationSet  # noqa: E402


def random_instance(seed, N=1, M=4, T=3, K=2, density=0.5, sigma_q2=0.3, sigma_r2=0.5,
                    cov_mode="isotropic"):
    """Small random parameters and observations (no generator involved)."""
    rng = np.random.default_rng(seed)
    dims = Dims(N, M, T, K)
    A = 0.8 * np.eye(K) + 0.3 * rng.standard_normal((K, K))
    V = rng.standard_normal((M, K))
    extra = {}
    if cov_mode == "full":
        B = rng.standard_normal((K, K))
        C = rng.standard_normal((K, K))
        extra = dict(Sigma0=B @ B.T + 0.5 * np.eye(K), Q=0.2 * C @ C.T + 0.1 * np.eye(K))
    params = ModelParams(dims, A, V, 1.0 + rng.random(), sigma_q2, sigma_r2, cov_mode=cov_mode, **extra)
    rows = []
    for i in range(N):
        for t in range(1, T + 1):
            for j in range(M):
                if rng.random() < density:
                    rows.append((i, j, t, float(rng.normal(0, 2))))
    if not rows:
        rows.append((0, 0, 1, 0.7))
    return params, ObservationSet.from_triplets(dims, rows)


@pytest.fixture
def small_instance():
    return random_instance(0)
