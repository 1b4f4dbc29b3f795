import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ckf.datagen import GenConfig, generate
from ckf.io import FormatError, deserialize_model, serialize_model
from ckf.model import Dims, ModelParams, ObservationSet, ValidationError, validate

from conftest import random_instance


def test_dims_reject_nonpositive():
    with pytest.raises(ValidationError) as err:
        Dims(0, 3, 2, 1)
    assert "num_users" in str(err.value)


def test_dims_allow_more_factors_than_users():
    assert Dims(2, 2, 1, 10).num_factors == 10


def test_validate_accepts_well_formed():
    dims = Dims(2, 3, 2, 2)
    params = ModelParams(dims, np.eye(2), np.ones((3, 2)), 1.0, 0.1, 0.5)
    obs = ObservationSet.from_triplets(dims, [(0, 1, 1, 0.5), (1, 2, 2, -1.0)])
    assert validate(params, obs) == (params, obs)


def test_validate_rejects_zero_measurement_variance():
    dims = Dims(1, 3, 1, 2)
    params = ModelParams(dims, np.eye(2), np.ones((3, 2)), 1.0, 0.1, 0.0)
    with pytest.raises(ValidationError) as err:
        validate(params, ObservationSet.empty(dims))
    assert "measurement variance must be positive" in err.value.violations


def test_duplicate_observation_names_triple():
    dims = Dims(2, 3, 2, 1)
    with pytest.raises(ValidationError) as err:
        ObservationSet.from_triplets(dims, [(1, 2, 2, 0.1), (0, 0, 1, 1.0), (1, 2, 2, 0.3)])
    assert "duplicate observation (user=1, item=2, time=2)" in str(err.value)


def test_validate_reports_every_violation():
    dims = Dims(1, 2, 1, 1)
    params = ModelParams(dims, np.eye(1), np.ones((2, 1)), -1.0, -0.1, 0.0)
    with pytest.raises(ValidationError) as err:
        validate(params, ObservationSet.empty(dims))
    assert len(err.value.violations) == 3


def test_out_of_range_observation():
    dims = Dims(1, 2, 2, 1)
    with pytest.raises(ValidationError, match="time index 3"):
        ObservationSet.from_triplets(dims, [(0, 0, 3, 1.0)])
    with pytest.raises(ValidationError, match="time index 0"):
        ObservationSet.from_triplets(dims, [(0, 0, 0, 1.0)])


def test_full_mode_requires_psd():
    dims = Dims(1, 2, 1, 2)
    bad = ModelParams(dims, np.eye(2), np.ones((2, 2)), 1.0, 0.1, 0.5, cov_mode="full",
                      Sigma0=np.diag([1.0, -1.0]), Q=np.eye(2))
    with pytest.raises(ValidationError, match="Sigma0 is not positive semidefinite"):
        validate(bad, ObservationSet.empty(dims))


def test_grouping_partitions_observations():
    params, obs = random_instance(3, N=3, M=5, T=4, density=0.6)
    d = obs.dims
    seen = 0
    for i in range(d.num_users):
        slices = obs.user_slices(i)
        assert len(slices) == d.num_steps + 1 and len(slices[0][0]) == 0
        for t in range(1, d.num_steps + 1):
            items, ys = slices[t]
            assert np.all(np.diff(items) > 0)
            seen += len(items)
    assert seen == len(obs) == obs.count


def test_grouping_stable_under_permutation():
    _, obs = random_instance(4, N=3, M=5, T=4, density=0.6)
    rows = obs.triplets()
    rng = np.random.default_rng(0)
    shuffled = [rows[k] for k in rng.permutation(len(rows))]
    again = ObservationSet.from_triplets(obs.dims, shuffled)
    assert again.triplets() == rows
    for i in range(obs.dims.num_users):
        for (a_items, a_y), (b_items, b_y) in zip(obs.user_slices(i), again.user_slices(i)):
            assert np.array_equal(a_items, b_items) and np.array_equal(a_y, b_y)


def test_arrays_are_read_only():
    params, obs = random_instance(0)
    with pytest.raises(ValueError):
        obs.ratings[0] = 1.0
    with pytest.raises(ValueError):
        params.V[0, 0] = 1.0


def test_round_trip_identity_zero_v():
    dims = Dims(3, 4, 2, 2)
    params = ModelParams(dims, np.eye(2), np.zeros((4, 2)), 1.0, 0.05, 0.1)
    assert deserialize_model(serialize_model(params)) == params


def test_round_trip_generated_params_exact():
    truth, _ = generate(GenConfig(Dims(5, 7, 3, 3), sampling_factor=0.2, seed=11))
    back = deserialize_model(serialize_model(truth.params))
    for name in ("A", "V"):
        assert np.max(np.abs(getattr(back, name) - getattr(truth.params, name))) == 0.0
    for name in ("sigma_u2", "sigma_q2", "sigma_r2"):
        assert getattr(back, name) == getattr(truth.params, name)
    assert back.meta == truth.params.meta


def test_round_trip_full_mode():
    params, _ = random_instance(2, cov_mode="full")
    back = deserialize_model(serialize_model(params))
    assert back == params and back.cov_mode == "full"


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=4, max_size=4),
       st.floats(min_value=1e-300, max_value=1e300))
def test_round_trip_any_finite_values(vals, var):
    dims = Dims(1, 2, 1, 1)
    params = ModelParams(dims, [[vals[0]]], [[vals[1]], [vals[2]]], var, abs(vals[3]), var)
    assert deserialize_model(serialize_model(params)) == params


@pytest.mark.parametrize("cut", [0, 1, 10, 0.5, -3])
def test_truncated_stream_is_rejected(cut):
    data = serialize_model(random_instance(1)[0])
    n = int(len(data) * cut) if isinstance(cut, float) else cut
    with pytest.raises(FormatError):
        deserialize_model(data[:n])


def test_wrong_version_rejected():
    data = serialize_model(random_instance(1)[0]).replace(b'"format_version": 1', b'"format_version": 9')
    with pytest.raises(FormatError, match="format_version"):
        deserialize_model(data)
