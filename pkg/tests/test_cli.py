import json

import numpy as np
import pytest

from ckf.cli import main
from ckf.io import read_model, read_states, read_tensor

TINY = {"seed": 3, "dims": {"num_users": 12, "num_items": 8, "num_steps": 4, "num_factors": 2},
        "generate": {"sampling_factor": 0.4}, "fit": {"max_iters": 5}}


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def tiny_run(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", TINY)
    out = tmp_path / "run"
    assert main(["generate", "--config", cfg, "--out-dir", str(out), "--tensor"]) == 0
    return cfg, out


def test_generate_full_tensor(tmp_path, capsys):
    code = main(["generate", "--dims", "2", "2", "2", "1", "--sampling-factor", "1",
                 "--out-dir", str(tmp_path)])
    assert code == 0
    lines = (tmp_path / "observations.csv").read_text().splitlines()
    assert len(lines) == 1 + 8
    assert "observations=8" in capsys.readouterr().out


def test_generate_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", TINY)
    for name in ("a", "b"):
        assert main(["generate", "--config", cfg, "--out-dir", str(tmp_path / name), "--tensor"]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "preferences.bin" in files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_flags_override_config(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", TINY)
    main(["generate", "--config", cfg, "--seed", "99", "--out-dir", str(tmp_path)])
    record = json.loads((tmp_path / "generate.json").read_text())
    assert record["seed"] == 99
    assert read_model(tmp_path / "truth_model.json").meta["seed"] == 99


def test_tensor_file_matches_states(tiny_run):
    _, out = tiny_run
    model = read_model(out / "truth_model.json")
    states = read_states(out / "truth_states.csv", model.dims)
    prefs = read_tensor(out / "preferences.bin")
    np.testing.assert_allclose(prefs, np.einsum("ntk,mk->nmt", states[:, 1:], model.V), atol=1e-12)


def test_fit_writes_reloadable_outputs(tiny_run):
    cfg, out = tiny_run
    code = main(["fit", "--config", cfg, "--out-dir", str(out), "--truth", str(out)])
    assert code in (0, 4)
    model = read_model(out / "model.json")
    assert model.dims.num_factors == 2 and model.meta["seed"] == 3
    assert read_states(out / "states.csv", model.dims).shape == (12, 5, 2)
    header = (out / "trace.csv").read_text().splitlines()[0]
    assert header.endswith("rmse_state,rmse_tensor")


def test_fit_restricted_keeps_identity(tiny_run):
    cfg, out = tiny_run
    main(["fit", "--config", cfg, "--out-dir", str(out), "--update-set", "V", "--max-iters", "3"])
    assert np.array_equal(read_model(out / "model.json").A, np.eye(2))


def test_fit_not_converged_exit_code(tiny_run):
    cfg, out = tiny_run
    assert main(["fit", "--config", cfg, "--out-dir", str(out), "--max-iters", "1", "--tol", "1e-15"]) == 4
    assert (out / "model.json").exists()


def test_predict_empty_queries(tiny_run, tmp_path):
    _, out = tiny_run
    q = tmp_path / "q.csv"
    q.write_text("user,item,time\n")
    dest = tmp_path / "pred.csv"
    assert main(["predict", "--out-dir", str(out), "--model", str(out / "truth_model.json"),
                 "--states", str(out / "truth_states.csv"), "--queries", str(q),
                 "--output", str(dest)]) == 0
    assert dest.read_text() == "user,item,time,prediction\n"


def test_predict_matches_truth_with_exact_model(tiny_run, tmp_path):
    _, out = tiny_run
    prefs = read_tensor(out / "preferences.bin")
    q = tmp_path / "q.csv"
    q.write_text("user,item,time\n0,0,1\n11,7,4\n5,3,2\n")
    dest = tmp_path / "pred.csv"
    main(["predict", "--out-dir", str(out), "--model", str(out / "truth_model.json"),
          "--states", str(out / "truth_states.csv"), "--queries", str(q), "--output", str(dest)])
    rows = [line.split(",") for line in dest.read_text().splitlines()[1:]]
    for u, j, t, p in rows:
        assert float(p) == pytest.approx(prefs[int(u), int(j), int(t) - 1], abs=1e-8)


def test_predict_rejects_forecast(tiny_run, tmp_path, capsys):
    _, out = tiny_run
    q = tmp_path / "q.csv"
    q.write_text("user,item,time\n0,0,1\n0,0,5\n")
    code = main(["predict", "--out-dir", str(out), "--model", str(out / "truth_model.json"),
                 "--states", str(out / "truth_states.csv"), "--queries", str(q)])
    assert code == 2
    assert "line 3: user=0 item=0 time=5" in capsys.readouterr().err


def test_evaluate_truth_against_itself(tiny_run):
    _, out = tiny_run
    assert main(["evaluate", "--out-dir", str(out), "--model", str(out / "truth_model.json"),
                 "--states", str(out / "truth_states.csv")]) == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert doc["rmse_tensor"] == 0.0
    assert doc["rmse_state"] < 1e-12 and doc["rmse_V"] < 1e-12
    assert all(v == 0.0 for v in doc["rmse_sigma"].values())


def test_evaluate_writes_rmse_curve(tiny_run):
    cfg, out = tiny_run
    main(["fit", "--config", cfg, "--out-dir", str(out), "--truth", str(out)])
    assert main(["evaluate", "--out-dir", str(out)]) == 0
    curve = (out / "rmse_curve.csv").read_text().splitlines()
    assert curve[0] == "iter,rmse_state,rmse_tensor" and len(curve) >= 3


def test_baseline_rigid_noiseless(tmp_path):
    doc = {"seed": 0, "dims": {"num_users": 8, "num_items": 6, "num_steps": 2, "num_factors": 2},
           "generate": {"sigma_q2": 0.0, "sigma_r2": 0.0, "identity_weight": 1.0, "sampling_factor": 1.0},
           "baseline": {"lambda1": 1e-9, "lambda2": 1e-9, "learning_rate": 0.02, "epochs": 3000,
                        "init_scale": 0.5}}
    cfg = write_config(tmp_path / "cfg.json", doc)
    assert main(["generate", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    assert main(["baseline", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    metrics = json.loads((tmp_path / "baseline_metrics.json").read_text())
    assert metrics["rmse_tensor"] < 1e-3 and metrics["seed"] == 0
    assert json.loads((tmp_path / "baseline_model.json").read_text())["dims"]["num_items"] == 6


def test_baseline_divergence_is_numerical_failure(tiny_run, capsys):
    cfg, out = tiny_run
    doc = dict(TINY, baseline={"learning_rate": 1e3, "init_scale": 10.0, "epochs": 5})
    cfg2 = write_config(out / "bad.json", doc)
    assert main(["baseline", "--config", cfg2, "--out-dir", str(out)]) == 3
    assert "numerical failure" in capsys.readouterr().err


@pytest.mark.parametrize("body", ["{not json", '{"sed": 1}', '{"dims": {"num_users": 0}}'])
def test_bad_config_is_usage_error(tmp_path, body, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(body)
    assert main(["generate", "--config", str(path), "--out-dir", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("ckf: error")


def test_bad_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["fit", "--no-such-flag"])
    assert exc.value.code == 1


def test_missing_input_is_data_error(tmp_path):
    assert main(["fit", "--out-dir", str(tmp_path), "--k", "2"]) == 2


def test_malformed_observations_is_data_error(tmp_path):
    (tmp_path / "observations.csv").write_text("user,item,time,rating\n0,0,1,1.0\n0,0,1,2.0\n")
    assert main(["fit", "--out-dir", str(tmp_path), "--k", "1"]) == 2
