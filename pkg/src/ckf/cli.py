"""``ckf`` command-line interface.

Subcommands: ``generate``, ``fit``, ``predict``, ``evaluate``, ``baseline``.
Settings come from an optional JSON config file; command-line flags win.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure, 4 fit stopped at ``max_iters`` without converging.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .datagen import GenConfig, GroundTruth, generate
from .em import PARAM_NAMES, EmConfig, EmDivergenceError, run_em
from .evaluation import (
    BaselineConfig,
    BaselineDivergenceError,
    fit_baseline,
    predict_many,
    score,
    score_baseline,
)
from .kalman import NumericalError
from .model import Dims, ValidationError

log = logging.getLogger("ckf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_NOT_CONVERGED = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    """Merged settings for every subcommand (config file, then flag overrides)."""

    seed: int = 0
    threads: int = 1
    out_dir: str = "."
    dims: dict = field(default_factory=dict)
    generate: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def get_dims(self, required: bool = True) -> Dims | None:
        if not self.dims:
            if required:
                raise UsageError("dims are required (config 'dims' or --dims N M T K)")
            return None
        try:
            return Dims(**self.dims)
        except (TypeError, ValidationError) as exc:
            raise UsageError(f"invalid dims: {exc}")

    def gen_config(self) -> GenConfig:
        opts = {k: v for k, v in self.generate.items() if k != "write_tensor"}
        try:
            return GenConfig(dims=self.get_dims(), seed=self.seed, **opts)
        except (TypeError, ValidationError) as exc:
            raise UsageError(f"invalid generate config: {exc}")

    def em_config(self) -> EmConfig:
        opts = dict(self.fit)
        opts.setdefault("seed", self.seed)
        opts["threads"] = self.threads
        try:
            return EmConfig(**opts)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid fit config: {exc}")

    def baseline_config(self) -> BaselineConfig:
        opts = dict(self.baseline)
        opts.setdefault("seed", self.seed)
        try:
            return BaselineConfig(**opts)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid baseline config: {exc}")

    def record(self) -> dict:
        out = asdict(self)
        out.pop("out_dir")
        return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}")
    return out


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"input file not found: {p}")
    return p


def _load_truth(model_path, states_path) -> GroundTruth:
    params = io.read_model(_need(model_path))
    states = io.read_states(_need(states_path), params.dims)
    prefs = np.einsum("ntk,mk->nmt", states[:, 1:], params.V)
    return GroundTruth(params, states, prefs)


def cmd_generate(cfg: RunConfig, args) -> int:
    gen = cfg.gen_config()
    out = _out_dir(cfg)
    truth, obs = generate(gen)
    io.write_observations(out / "observations.csv", obs)
    io.write_model(out / "truth_model.json", truth.params)
    io.write_states(out / "truth_states.csv", truth.states)
    if cfg.generate.get("write_tensor") or args.tensor:
        io.write_tensor(out / "preferences.bin", truth.preferences)
    _write_json(out / "generate.json", {"command": "generate", **cfg.record(), "num_observations": len(obs)})
    d = gen.dims
    print(f"generated N={d.num_users} M={d.num_items} T={d.num_steps} K={d.num_factors} "
          f"observations={len(obs)} seed={gen.seed}")
    return EXIT_OK


def _fit_dims(cfg: RunConfig, obs_path: Path, k: int | None):
    dims = cfg.get_dims(required=False)
    if dims is not None:
        if k is not None:
            dims = dims.with_factors(k)
        return io.read_observations(obs_path, dims), dims
    obs = io.read_observations(obs_path, None, k or 5)
    return obs, obs.dims


def cmd_fit(cfg: RunConfig, args) -> int:
    em_cfg = cfg.em_config()
    out = _out_dir(cfg)
    obs_path = _need(args.obs or out / "observations.csv")
    obs, dims = _fit_dims(cfg, obs_path, args.k)
    if len(obs) == 0:
        raise DataError(f"{obs_path}: no observations to fit")

    diagnostics = None
    if args.truth:
        truth = _load_truth(Path(args.truth) / "truth_model.json", Path(args.truth) / "truth_states.csv")

        def diagnostics(params, posteriors):
            m = score(params, posteriors, truth)
            return m.rmse_state, m.rmse_tensor

    result = run_em(obs, dims, em_cfg, diagnostics=diagnostics)
    params = result.params.replace(meta={"seed": em_cfg.seed})
    io.write_model(out / "model.json", params)
    io.write_states(out / "states.csv", np.stack([p.x_smooth for p in result.posteriors]))
    trace_path = Path(args.trace) if args.trace else out / "trace.csv"
    result.trace.write_csv(trace_path)
    _write_json(out / "fit.json", {
        "command": "fit", **cfg.record(), "dims": dims.as_dict(),
        "iterations": len(result.trace) - 1, "converged": result.converged,
        "loglik": result.trace[-1].loglik,
    })
    print(f"fit iterations={len(result.trace) - 1} converged={result.converged} "
          f"loglik={result.trace[-1].loglik:.6f} seed={em_cfg.seed}")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_predict(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    params = io.read_model(_need(args.model or out / "model.json"))
    states = io.read_states(_need(args.states or out / "states.csv"), params.dims)
    queries = io.read_queries(_need(args.queries))
    d = params.dims
    bad = [(ln, u, j, t) for ln, u, j, t in queries
           if not (0 <= u < d.num_users and 0 <= j < d.num_items and 1 <= t <= d.num_steps)]
    if bad:
        lines = [f"  line {ln}: user={u} item={j} time={t}" for ln, u, j, t in bad]
        raise DataError("queries out of range for " f"{d}:\n" + "\n".join(lines))
    q = np.array([row[1:] for row in queries], dtype=np.int64).reshape(-1, 3)
    preds = predict_many(params, states, q[:, 0], q[:, 1], q[:, 2])
    out_path = Path(args.output) if args.output else out / "predictions.csv"
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(io.QUERY_HEADER + ["prediction"])
        for (u, j, t), p in zip(q.tolist(), preds):
            w.writerow([u, j, t, io.fmt(p)])
    print(f"predicted {len(q)} queries -> {out_path}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    truth_dir = Path(args.truth or out)
    truth = _load_truth(truth_dir / "truth_model.json", truth_dir / "truth_states.csv")
    params = io.read_model(_need(args.model or out / "model.json"))
    if params.dims.as_dict() != truth.params.dims.as_dict():
        raise DataError(f"dimension mismatch: estimate {params.dims} vs truth {truth.params.dims}")
    states = io.read_states(_need(args.states or out / "states.csv"), params.dims)
    metrics = score(params, states, truth)
    metrics_path = Path(args.metrics) if args.metrics else out / "metrics.json"
    metrics_path.write_text(metrics.to_json(seed=params.meta.get("seed", cfg.seed)))

    trace_path = Path(args.trace) if args.trace else out / "trace.csv"
    if trace_path.exists():
        with open(trace_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and "rmse_state" in rows[0]:
            with open(out / "rmse_curve.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["iter", "rmse_state", "rmse_tensor"])
                for r in rows:
                    w.writerow([r["iter"], r["rmse_state"], r["rmse_tensor"]])
    print(f"rmse_tensor={metrics.rmse_tensor:.6g} rmse_state={metrics.rmse_state:.6g} "
          f"rmse_V={metrics.rmse_V:.6g} -> {metrics_path}")
    return EXIT_OK


def cmd_baseline(cfg: RunConfig, args) -> int:
    bcfg = cfg.baseline_config()
    out = _out_dir(cfg)
    obs_path = _need(args.obs or out / "observations.csv")
    obs, dims = _fit_dims(cfg, obs_path, args.k)
    fit = fit_baseline(obs, dims, bcfg)
    doc = {
        "format_version": io.FORMAT_VERSION,
        "dims": dims.as_dict(),
        "seed": bcfg.seed,
        "config": asdict(bcfg),
        "U": fit.U.tolist(),
        "V": fit.V.tolist(),
    }
    _write_json(out / "baseline_model.json", doc)
    with open(out / "baseline_objective.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "objective"])
        for e, v in enumerate(fit.objective):
            w.writerow([e, io.fmt(v)])
    summary = {"seed": bcfg.seed, "objective": fit.objective[-1]}
    truth_dir = Path(args.truth) if args.truth else out
    if (truth_dir / "truth_model.json").exists() and (truth_dir / "truth_states.csv").exists():
        truth = _load_truth(truth_dir / "truth_model.json", truth_dir / "truth_states.csv")
        summary["rmse_tensor"] = score_baseline(fit, truth)
    _write_json(out / "baseline_metrics.json", summary)
    print("baseline " + " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                                 for k, v in summary.items()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--config", help="JSON run configuration")
    shared.add_argument("--seed", type=int, help="random seed (overrides config)")
    shared.add_argument("--threads", type=int, help="worker threads for smoothing")
    shared.add_argument("--out-dir", help="directory for outputs (and default inputs)")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ckf", description="Collaborative Kalman filtering toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[shared], help="draw a synthetic dataset")
    g.add_argument("--dims", type=int, nargs=4, metavar=("N", "M", "T", "K"))
    g.add_argument("--sampling-factor", type=float)
    g.add_argument("--tensor", action="store_true", help="also write the dense preference tensor")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", parents=[shared], help="learn parameters by EM")
    f.add_argument("--obs", help="observations CSV (default OUT_DIR/observations.csv)")
    f.add_argument("--dims", type=int, nargs=4, metavar=("N", "M", "T", "K"))
    f.add_argument("--k", type=int, help="number of latent factors")
    f.add_argument("--max-iters", type=int)
    f.add_argument("--tol", type=float, help="relative log-likelihood tolerance")
    f.add_argument("--update-set", help=f"comma-separated subset of {','.join(PARAM_NAMES)}")
    f.add_argument("--trace", help="EM trace CSV path (default OUT_DIR/trace.csv)")
    f.add_argument("--truth", help="directory with truth_model.json/truth_states.csv for RMSE curves")
    f.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", parents=[shared], help="predict ratings for queries")
    p.add_argument("--model")
    p.add_argument("--states")
    p.add_argument("--queries", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", parents=[shared], help="score a fit against ground truth")
    e.add_argument("--model")
    e.add_argument("--states")
    e.add_argument("--truth", help="directory with truth_model.json and truth_states.csv")
    e.add_argument("--trace")
    e.add_argument("--metrics", help="metrics output path (default OUT_DIR/metrics.json)")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("baseline", parents=[shared], help="fit the static factorization baseline")
    b.add_argument("--obs")
    b.add_argument("--dims", type=int, nargs=4, metavar=("N", "M", "T", "K"))
    b.add_argument("--k", type=int)
    b.add_argument("--truth")
    b.set_defaults(func=cmd_baseline)
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be positive")
        cfg.threads = args.threads
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    if getattr(args, "dims", None):
        cfg.dims = dict(zip(("num_users", "num_items", "num_steps", "num_factors"), args.dims))
    if getattr(args, "sampling_factor", None) is not None:
        cfg.generate = {**cfg.generate, "sampling_factor": args.sampling_factor}
    fit = dict(cfg.fit)
    if getattr(args, "max_iters", None) is not None:
        fit["max_iters"] = args.max_iters
    if getattr(args, "tol", None) is not None:
        fit["rel_tol"] = args.tol
    if getattr(args, "update_set", None):
        fit["update_set"] = [s.strip() for s in args.update_set.split(",") if s.strip()]
    cfg.fit = fit
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(RunConfig.load(args.config), args)
        if "update_set" in cfg.fit:
            cfg.fit["update_set"] = sorted(cfg.fit["update_set"])
        return args.func(cfg, args)
    except UsageError as exc:
        print(f"ckf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, io.FormatError, ValidationError, OSError) as exc:
        print(f"ckf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, EmDivergenceError, BaselineDivergenceError, FloatingPointError) as exc:
        print(f"ckf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
