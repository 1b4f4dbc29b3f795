import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from ckf.datagen import GenConfig, build_transition, generate
from ckf.model import Dims, ValidationError


def test_identity_limit():
    for K in (1, 3, 7):
        assert np.array_equal(build_transition(K, 1.0, 1.3, 0.0, seed=K), np.eye(K))


@settings(max_examples=60, deadline=None)
@given(K=st.integers(1, 8), w=st.floats(0, 1), su2=st.floats(0.01, 100),
       frac=st.floats(0, 0.99), seed=st.integers(0, 2**32 - 1))
def test_power_budget_identity(K, w, su2, frac, seed):
    sq2 = frac * su2
    A = build_transition(K, w, su2, sq2, seed)
    assert su2 * np.sum(A * A) + K * sq2 == pytest.approx(K * su2, rel=1e-12, abs=1e-12)


def test_process_noise_budget_error():
    with pytest.raises(ValueError, match="state power budget"):
        build_transition(2, 0.9, 1.0, 1.0)
    with pytest.raises(ValidationError, match="state power budget"):
        GenConfig(Dims(2, 2, 2, 2), sigma_q2=2.0)


def test_power_constant_over_time():
    K, T, N = 5, 20, 10_000
    su2, sq2 = 1.0, 0.05
    rng = np.random.default_rng(0)
    A = build_transition(K, 0.9, su2, sq2, rng)
    x = rng.normal(0, np.sqrt(su2), size=(N, K))
    for t in range(T + 1):
        power = np.sum(x * x, axis=1)
        se = power.std(ddof=1) / np.sqrt(N)
        assert abs(power.mean() - K * su2) < 3 * se, t
        x = x @ A.T + rng.normal(0, np.sqrt(sq2), size=(N, K))


def test_figure_configuration_count():
    cfg = GenConfig(Dims(500, 500, 20, 5), 1.0, 1.0, 0.05, 0.1, sampling_factor=0.005)
    assert cfg.num_observations == 25_000
    _, obs = generate(cfg)
    assert len(obs) == 25_000


def test_full_sampling():
    _, obs = generate(GenConfig(Dims(2, 2, 2, 1), sampling_factor=1.0))
    assert len(obs) == 8


def test_deterministic():
    cfg = GenConfig(Dims(20, 15, 4, 3), sampling_factor=0.1, seed=42)
    (t1, o1), (t2, o2) = generate(cfg), generate(cfg)
    assert np.array_equal(t1.states, t2.states) and t1.params == t2.params
    assert o1.triplets() == o2.triplets()
    _, o3 = generate(GenConfig(Dims(20, 15, 4, 3), sampling_factor=0.1, seed=43))
    assert o3.triplets() != o1.triplets()


def test_indices_unique_and_in_range():
    d = Dims(30, 20, 5, 2)
    _, obs = generate(GenConfig(d, sampling_factor=0.3, seed=2))
    keys = set(zip(obs.users.tolist(), obs.items.tolist(), obs.times.tolist()))
    assert len(keys) == len(obs)
    assert obs.users.max() < d.num_users and obs.items.max() < d.num_items
    assert obs.times.min() >= 1 and obs.times.max() <= d.num_steps


def test_noiseless_rigid_dynamics():
    cfg = GenConfig(Dims(6, 4, 5, 2), sigma_q2=0.0, sigma_r2=0.0, identity_weight=1.0,
                    sampling_factor=0.8, seed=3)
    truth, obs = generate(cfg)
    x0 = truth.states[:, 0]
    seen = {}
    for i, j, t, y in obs.triplets():
        assert y == pytest.approx(x0[i] @ truth.params.V[j], abs=1e-12)
        seen.setdefault((i, j), set()).add(y)
    assert all(len(v) == 1 for v in seen.values())


def test_rating_variance_moment():
    cfg = GenConfig(Dims(500, 500, 1, 5), 1.0, 1.0, 0.05, 0.1, sampling_factor=0.2, seed=0)
    _, obs = generate(cfg)
    expected = 5 * 1.0 * 1.0 + 0.1
    assert np.var(obs.ratings) == pytest.approx(expected, rel=0.05)


def test_rating_noise_is_gaussian():
    cfg = GenConfig(Dims(100, 100, 5, 3), sigma_r2=0.3, sampling_factor=0.2, seed=7)
    truth, obs = generate(cfg)
    resid = obs.ratings - truth.preferences[obs.users, obs.items, obs.times - 1]
    assert sps.kstest(resid, "norm", args=(0.0, np.sqrt(0.3))).pvalue > 0.01


def test_preferences_match_states():
    truth, _ = generate(GenConfig(Dims(4, 3, 3, 2), sampling_factor=0.5, seed=1))
    i, j, t = 2, 1, 3
    assert truth.preferences[i, j, t - 1] == pytest.approx(truth.states[i, t] @ truth.params.V[j])


@pytest.mark.parametrize("kwargs", [dict(identity_weight=1.5), dict(sampling_factor=0.0),
                                    dict(sampling_factor=1e-9), dict(sigma_r2=-1.0)])
def test_config_errors(kwargs):
    with pytest.raises(ValidationError):
        GenConfig(Dims(3, 3, 3, 1), **kwargs)
