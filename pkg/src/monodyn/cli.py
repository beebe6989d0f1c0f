"""Command-line runner: ``monodyn --config run.cfg [--seed N] [--out DIR] [--overwrite]``.

Exit codes: 0 success, 1 configuration error, 2 numeric failure, 3 I/O error.
When a command fails after it started writing, ``<out>/.incomplete`` records
the reason.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, bound_check_spec, load_config, model_config_text
from .dynamics import generate_dataset, make_model, read_trajectory_csv, write_trajectory_csv
from .network import MonotoneNet
from .training import alternating_train, write_history_csv
from .windows import initial_window, meta_step, rollout

log = logging.getLogger("monodyn")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
INCOMPLETE = ".incomplete"


def _csv_writer(fh):
    return csv.writer(fh, lineterminator="\n")


def _fmt(v: float) -> str:
    return repr(float(v))


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #


def cmd_simulate(cfg: RunConfig, out: Path, overwrite: bool) -> int:
    params = cfg.build_model()
    model = make_model(params)
    for i, tr in enumerate(generate_dataset(model, cfg.dataset_spec())):
        write_trajectory_csv(out / f"traj_{i:03d}.csv", tr.states)
    (out / "model.cfg").write_text(model_config_text(params))
    return EXIT_OK


def _train_one(cfg: RunConfig, **overrides):
    model = make_model(cfg.build_model())
    data = generate_dataset(model, cfg.dataset_spec())
    return alternating_train(data, cfg.train_config(**overrides))


def cmd_train(cfg: RunConfig, out: Path, overwrite: bool) -> int:
    f_path, v_path = out / "f.ckpt", out / "V.ckpt"
    for p in (f_path, v_path):
        if p.exists() and not overwrite:
            raise FileExistsError(f"{p} exists; rerun with --overwrite to replace it")
    tc = cfg.train_config()
    res = _train_one(cfg)
    extra = {"q": tc.q, "method": tc.method}
    save_checkpoint(f_path, res.f, step=tc.epochs, extra=extra)
    if res.V is not None:
        save_checkpoint(v_path, res.V, step=tc.epochs, extra=extra)
    write_history_csv(out / "loss.csv", res)
    return EXIT_OK


def _load_f(cfg: RunConfig, out: Path):
    path = Path(cfg.paths["checkpoint"] or out / "f.ckpt")
    net, _, extra = load_checkpoint(path)
    q = int(extra.get("q", cfg.values["train"]["q"]))
    return net, q


def _test_trajectories(cfg: RunConfig):
    return generate_dataset(make_model(cfg.build_model()), cfg.test_spec())


def _write_series(path: Path, pred: np.ndarray, truth: np.ndarray, t0: int) -> None:
    """Long-format plot data: ``t, dim, truth, prediction``."""
    with open(path, "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["t", "dim", "truth", "prediction"])
        for k in range(pred.shape[0]):
            for d in range(pred.shape[1]):
                w.writerow([t0 + k, d, _fmt(truth[k, d]), _fmt(pred[k, d])])


def cmd_predict(cfg: RunConfig, out: Path, overwrite: bool) -> int:
    net, q = _load_f(cfg, out)
    tr = _test_trajectories(cfg)[0]
    T = cfg.horizons[-1]
    pred = rollout(initial_window(tr, q), meta_step(net), T)
    write_trajectory_csv(out / "prediction.csv", pred, t0=q)
    write_trajectory_csv(out / "truth.csv", tr.states[q:q + T], t0=q)
    return EXIT_OK


def _write_errors(out: Path, horizons, totals: dict, per_dim: np.ndarray, extras: dict) -> None:
    with open(out / "errors.csv", "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["T", "total_norm_error"])
        for T in horizons:
            w.writerow([T, _fmt(totals[T])])
    analysis.write_per_dim_table(out / "per_dim_errors.csv", per_dim, horizons)
    if extras:
        with open(out / "summary.csv", "w", newline="") as fh:
            w = _csv_writer(fh)
            w.writerow(["metric", "value"])
            for k, v in extras.items():
                w.writerow([k, _fmt(v)])


def cmd_evaluate(cfg: RunConfig, out: Path, overwrite: bool) -> int:
    pred_path, truth_path = cfg.paths["pred"], cfg.paths["truth"]
    if pred_path or truth_path:
        if not (pred_path and truth_path):
            raise ConfigError("paths.pred and paths.truth must be given together")
        pred, truth = read_trajectory_csv(pred_path).states, read_trajectory_csv(truth_path).states
        horizons = [T for T in cfg.horizons if T <= truth.shape[0]] or [truth.shape[0]]
        totals = {T: analysis.normalized_l2_error(pred[:T], truth[:T]) for T in horizons}
        per_dim = np.stack([analysis.per_dimension_errors(pred[:T], truth[:T]) for T in horizons], axis=1)
        _write_errors(out, horizons, totals, per_dim, {})
        return EXIT_OK
    net, q = _load_f(cfg, out)
    tests = _test_trajectories(cfg)
    report = analysis.evaluate_model(net, tests, q, cfg.horizons)
    extras = {}
    high = np.max([tr.states.max(axis=0) for tr in tests], axis=0)
    extras["monotonicity_violation_rate"] = analysis.monotonicity_scan(
        net, 0.0, np.tile(high, q), n_pairs=cfg.values["eval"]["scan_pairs"], seed=cfg.seed)
    v_path = Path(cfg.paths["v_checkpoint"] or out / "V.ckpt")
    if v_path.exists():
        V, _, _ = load_checkpoint(v_path)
        extras["descent_fraction"] = analysis.lyapunov_descent_check(V, net, tests, q)
    _write_errors(out, report.horizons, report.total_norm_error, report.per_dim_errors, extras)
    return EXIT_OK


def run_bound_checks(cfg: RunConfig) -> list:
    checks = []
    trials = cfg.values["verify"]["trials"]
    for name, kind, kw in cfg.bound_specs():
        if kind == "window":
            expect = kw.pop("expect")
            got = analysis.window_condition(**kw)
            lhs = analysis.window_condition_lhs(kw["q"], kw["b"], kw["epsilon"])
            rhs = sum(kw["a"] ** (2 * (i - 1)) for i in range(1, kw["T"] + 1))
            checks.append(analysis.BoundCheck(name, lhs, rhs, got == expect))
            continue
        spec = bound_check_spec(kw, trials, cfg.seed)
        fn = analysis.lemma2_monte_carlo if kind == "lemma2" else analysis.theorem1_monte_carlo
        var, bound, passed = fn(spec)
        checks.append(analysis.BoundCheck(name, float(np.max(var) if kind == "theorem1" else np.min(var)),
                                          bound, passed))
    return checks


def run_property_scans(cfg: RunConfig) -> list:
    """Scans of freshly initialised constrained networks (expected rate 0)."""
    n_pairs = cfg.values["eval"]["scan_pairs"]
    rng = np.random.default_rng(cfg.seed)
    mono = MonotoneNet([4, 32, 32, 4], constraint_mode="hard_zero", batch_norm=False, rng=rng)
    convex = MonotoneNet([4, 32, 32, 4], min_fraction=0.0, constraint_mode="hard_zero",
                         batch_norm=False, rng=rng)
    for net in (mono, convex):
        for layer in net.layers:
            layer.b[...] = rng.uniform(-0.05, 0.05, size=layer.b.shape)
    rates = [
        ("monotonicity_scan", analysis.monotonicity_scan(mono, 0.0, 1.0, n_pairs, seed=cfg.seed)),
        ("convexity_midpoint_test", analysis.convexity_midpoint_test(convex, 0.0, 1.0, n_pairs, seed=cfg.seed)),
    ]
    return [analysis.BoundCheck(name, r, 0.0, r == 0.0) for name, r in rates]


def cmd_verify(cfg: RunConfig, out: Path, overwrite: bool) -> int:
    checks = run_bound_checks(cfg) + run_property_scans(cfg)
    analysis.write_bound_checks(out / "verify.csv", checks)
    for c in checks:
        print(f"{'pass' if c.passed else 'FAIL'}  {c.name}: empirical={c.empirical:.6g} bound={c.bound:.6g}")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_NUMERIC


def run_comparison(cfg: RunConfig, methods=None, windows=None, seeds=None, keep_models=False):
    """Train every (method, q, seed) combination and score it on held-out trajectories.

    Returns a dict keyed by ``(method, q)`` with the per-trajectory errors
    (``errors[T]`` pooled over seeds), the mean per-dimension error matrix and,
    when ``keep_models`` is set, the trained results per seed.
    """
    ev = cfg.values["eval"]
    methods = methods or ev["methods"]
    windows = windows or ev["windows"] or (cfg.values["train"]["q"],)
    seeds = seeds if seeds is not None else ev["seeds"]
    tests = _test_trajectories(cfg)
    base_mode = cfg.values["train"]["constraint_mode"]
    out = {}
    for method in methods:
        mode = "none" if method == "baseline" else base_mode
        for q in windows:
            errs = {T: [] for T in cfg.horizons}
            per_dim, models = [], []
            for seed in seeds:
                res = _train_one(cfg.with_overrides(seed=seed), method=method, q=q, constraint_mode=mode)
                rep = analysis.evaluate_model(res.f, tests, q, cfg.horizons)
                for T in cfg.horizons:
                    errs[T].extend(rep.trajectory_errors[T])
                per_dim.append(rep.per_dim_errors)
                if keep_models:
                    models.append(res)
            out[(method, q)] = {"errors": errs, "per_dim": np.mean(per_dim, axis=0),
                                "models": models, "tests": tests}
    return out


def cmd_report(cfg: RunConfig, out: Path, overwrite: bool) -> int:
    results = run_comparison(cfg, keep_models=True)
    table = {k: {T: float(np.median(v["errors"][T])) for T in cfg.horizons} for k, v in results.items()}
    analysis.write_error_table(out / "table1.csv", table, cfg.horizons)
    T = cfg.horizons[-1]
    for (method, q), v in results.items():
        tag = f"{method}_q{q}"
        analysis.write_per_dim_table(out / f"per_dim_{tag}.csv", v["per_dim"], cfg.horizons)
        tr = v["tests"][0]
        pred = rollout(initial_window(tr, q), meta_step(v["models"][0].f), T)
        _write_series(out / f"series_{tag}.csv", pred, tr.states[q:q + T], t0=q)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "verify": cmd_verify,
    "report": cmd_report,
}


# --------------------------------------------------------------------------- #
# entry point
# --------------------------------------------------------------------------- #


def run(cfg: RunConfig, overwrite: bool = False) -> int:
    """Execute ``cfg.command``; returns the process exit status."""
    out = Path(cfg.paths["out"])
    marker = out / INCOMPLETE
    try:
        out.mkdir(parents=True, exist_ok=True)
        if marker.exists():
            marker.unlink()
    except OSError as exc:
        log.error("cannot prepare output directory %s: %s", out, exc)
        return EXIT_IO
    try:
        return COMMANDS[cfg.command](cfg, out, overwrite)
    except ConfigError as exc:
        status, msg = EXIT_CONFIG, f"config error: {exc}"
    except (ArithmeticError, FloatingPointError) as exc:
        status, msg = EXIT_NUMERIC, f"numeric failure: {exc}"
    except (OSError, CheckpointError) as exc:
        status, msg = EXIT_IO, f"I/O error: {exc}"
    except ValueError as exc:
        status, msg = EXIT_NUMERIC, f"error: {exc}"
    log.error(msg)
    try:
        marker.write_text(msg + "\n")
    except OSError:
        pass
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="monodyn", description="Monotone neural dynamics experiments.")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--seed", type=int, default=None, help="override run.seed")
    p.add_argument("--out", default=None, help="override paths.out")
    p.add_argument("--overwrite", action="store_true", help="replace existing checkpoints")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, out=args.out)
    except ConfigError as exc:
        log.error("config error in %s: %s", args.config, exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("cannot read config %s: %s", args.config, exc)
        return EXIT_IO
    return run(cfg, overwrite=args.overwrite)


if __name__ == "__main__":
    sys.exit(main())
