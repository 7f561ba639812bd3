"""Config-driven command line: simulate, fit, coes, tailbound, cv.

Every run writes a manifest echoing the resolved configuration and the
tool version; data outputs are deterministic given (config, seed), also
across worker counts (timestamps live only in the manifest).  Exit codes:
0 success, 1 numerical failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import es as es_mod
from . import model_selection as ms
from . import quantile as q_mod
from . import tailbound as tb
from .coes import (
    evaluate_out_of_sample,
    fit_coes,
    coes_predict,
    load_panel,
    report_to_csv,
    synthetic_panel,
)
from .features import DesignMatrix, build_dictionary, load_matrix_csv
from .simulation import SimulationConfig, run_monte_carlo


class ConfigError(ValueError):
    pass


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        config = _load_config(args.config)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        threads = _resolve_threads(args.threads)
        handler = {
            "simulate": cmd_simulate,
            "fit": cmd_fit,
            "coes": cmd_coes,
            "tailbound": cmd_tailbound,
            "cv": cmd_cv,
        }[args.command]
        handler(config, out_dir, seed=args.seed, threads=threads, verbose=args.verbose)
    except (ConfigError, FileNotFoundError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (q_mod.QuantileConvergenceError, es_mod.ESConvergenceError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    _write_manifest(out_dir, args.command, config, args.seed, threads)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eslasso",
        description="Penalized two-stage tail-risk estimation toolkit",
    )
    sub = parser.add_subparsers(dest="command")
    for name, text in [
        ("simulate", "Monte Carlo study of the two-stage estimator"),
        ("fit", "fit a quantile or shortfall model to a CSV data set"),
        ("coes", "run the co-shortfall pipeline on a panel CSV"),
        ("tailbound", "empirical tail-probability bound experiment"),
        ("cv", "blocked cross-validation for a penalty grid"),
    ]:
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", required=True, help="JSON config path")
        cmd.add_argument("--out", default=".", help="output directory")
        cmd.add_argument("--seed", type=int, default=None, help="seed override")
        cmd.add_argument("--threads", type=int, default=None,
                         help="worker count (falls back to ESLASSO_THREADS, then 1)")
        cmd.add_argument("--verbose", action="store_true")
    return parser


def _resolve_threads(threads) -> int:
    if threads is None:
        threads = int(os.environ.get("ESLASSO_THREADS", "1"))
    if threads < 1:
        raise ConfigError(f"thread count must be positive, got {threads}")
    return threads


def _load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with path.open(encoding="utf-8") as fh:
            config = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    return config


def _write_manifest(out_dir: Path, command: str, config: dict, seed, threads: int):
    manifest = {
        "tool": "eslasso",
        "version": __version__,
        "command": command,
        "config": config,
        "seed_override": seed,
        "threads": threads,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    with (out_dir / "manifest.json").open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)


def cmd_simulate(config: dict, out_dir: Path, *, seed=None, threads=1, verbose=False):
    sim_keys = {f.name for f in SimulationConfig.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    params = {k: v for k, v in config.get("simulation", {}).items() if k in sim_keys}
    unknown = set(config.get("simulation", {})) - sim_keys
    if unknown:
        raise ConfigError(f"unknown simulation parameters: {sorted(unknown)}")
    if seed is not None:
        params["seed"] = seed
    reps = int(config.get("reps", 100))
    mc_kwargs = dict(
        cv_folds=int(config.get("cv_folds", 5)),
        grid_size=int(config.get("grid_size", 20)),
        grid_ratio=float(config.get("grid_ratio", 1e-3)),
        threads=threads,
    )

    if "grid" in config:
        # full study: one row per (K, sigma_nu, T) cell and estimator, the
        # layout of the headline simulation tables
        grid = config["grid"]
        rows = []
        for k_deg in grid.get("K", [params.get("K", 3)]):
            for sigma in grid.get("sigma_nu", [params.get("sigma_nu", 1.0)]):
                for t_size in grid.get("T", [params.get("T", 500)]):
                    for penalized in (True, False):
                        cfg = SimulationConfig(**{
                            **params, "K": int(k_deg),
                            "sigma_nu": float(sigma), "T": int(t_size),
                        })
                        summary = run_monte_carlo(cfg, reps, penalized, **mc_kwargs)
                        if summary.failures:
                            raise RuntimeError(
                                f"{summary.failures} replication(s) failed in cell "
                                f"K={k_deg} sigma_nu={sigma} T={t_size}"
                            )
                        rows.append({
                            "K": int(k_deg), "sigma_nu": float(sigma),
                            "T": int(t_size), **summary.to_dict(),
                        })
        with (out_dir / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(rows[0].keys())
            for row in rows:
                writer.writerow([
                    repr(v) if isinstance(v, float) else v for v in row.values()
                ])
        if verbose:
            print(json.dumps(rows, indent=2))
        return

    cfg = SimulationConfig(**params)
    penalized = bool(config.get("penalized", True))
    summary = run_monte_carlo(cfg, reps, penalized, **mc_kwargs)
    if summary.failures:
        raise RuntimeError(f"{summary.failures} replication(s) failed to converge")
    summary.to_csv(out_dir / "summary.csv")
    if config.get("write_records", False):
        summary.records_to_csv(out_dir / "records.csv")
    if verbose:
        print(json.dumps(summary.to_dict(), indent=2))


def cmd_fit(config: dict, out_dir: Path, *, seed=None, threads=1, verbose=False):
    task = config.get("task")
    if task not in ("quantile", "es"):
        raise ConfigError("config key 'task' must be 'quantile' or 'es'")
    data_path = config.get("data")
    if data_path is None:
        raise ConfigError("config key 'data' (CSV path) is required")
    matrix, names = load_matrix_csv(data_path)
    if matrix.shape[1] < 2:
        raise ConfigError("data must have a response column plus regressors")
    y, raw = matrix[:, 0], matrix[:, 1:]
    tau = float(config.get("tau", 0.025))
    degree = config.get("chebyshev_degree")
    if degree is not None:
        _, design = build_dictionary(raw, int(degree))
    elif config.get("add_intercept", True):
        design = DesignMatrix(np.column_stack([np.ones(len(y)), raw]))
    else:
        design = DesignMatrix(raw)

    penalty = config.get("penalty", "cv")
    if penalty == "cv":
        plan = ms.blocked_folds(len(y), int(config.get("cv_folds", 5)))
        grid = _penalty_grid(config, design, y, tau, task)
        if task == "quantile":
            penalty = ms.cv_quantile_penalty(design, y, tau, grid, plan).chosen
        else:
            q_pen = float(config.get("quantile_penalty", 0.0))
            penalty = ms.cv_es_penalty(design, y, tau, q_pen, grid, plan).chosen
    penalty = float(penalty)

    if task == "quantile":
        fit = q_mod.fit_penalized_quantile(design, y, tau, penalty)
        predictions = design.values @ fit.coefficients
    else:
        q_pen = float(config.get("quantile_penalty", 0.0))
        q_fit = q_mod.fit_penalized_quantile(design, y, tau, q_pen)
        aux = es_mod.auxiliary_response(y, design.values @ q_fit.coefficients, tau)
        if penalty == 0.0:
            fit = es_mod.fit_es_least_squares(design, aux)
        else:
            fit = es_mod.fit_es_lasso(design, aux, penalty)
        predictions = design.values @ fit.coefficients

    (out_dir / "fit.json").write_text(fit.to_json(), encoding="utf-8")
    with (out_dir / "predictions.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["prediction"])
        for v in predictions:
            writer.writerow([repr(float(v))])
    if verbose:
        print(fit.to_json())


def _penalty_grid(config, design, y, tau, task):
    n_points = int(config.get("grid_size", 20))
    ratio = float(config.get("grid_ratio", 1e-3))
    if task == "quantile":
        top = q_mod.nu_max(design, y, tau)
    else:
        q_pen = float(config.get("quantile_penalty", 0.0))
        q_fit = q_mod.fit_penalized_quantile(design, y, tau, q_pen)
        aux = es_mod.auxiliary_response(y, design.values @ q_fit.coefficients, tau)
        top = es_mod.lambda_max(design, aux)
    if top <= 0:
        raise ConfigError("cannot build a penalty grid: zero penalty already optimal")
    return top * ratio ** (np.arange(n_points) / max(n_points - 1, 1))


def cmd_coes(config: dict, out_dir: Path, *, seed=None, threads=1, verbose=False):
    tau = float(config.get("tau", 0.025))
    degrees = [int(k) for k in config.get("k_values", [1, 3])]
    if not degrees:
        raise ConfigError("config key 'k_values' must be a nonempty list")

    if "panel" in config:
        panel = load_panel(config["panel"], config.get("column_map", {}))
    elif "synthetic" in config:
        syn = dict(config["synthetic"])
        if seed is not None:
            syn["seed"] = seed
        panel = synthetic_panel(
            seed=int(syn.get("seed", 0)),
            n_periods=int(syn.get("n_periods", 600)),
            n_state=int(syn.get("n_state", 3)),
            degree_true=int(syn.get("degree_true", 3)),
        )
    else:
        raise ConfigError("config needs either 'panel' (CSV path) or 'synthetic'")

    train_size = int(config.get("train_size", len(panel) // 2))
    test_size = int(config.get("test_size", len(panel) - train_size))
    if train_size + test_size > len(panel):
        raise ConfigError("train_size + test_size exceeds the panel length")
    train_idx = np.arange(train_size)
    test_idx = np.arange(train_size, train_size + test_size)

    reports = []
    for degree in degrees:
        penalties = config.get("penalties", "cv")
        if penalties == "benchmark":
            penalties = 0.0 if degree == 1 else "cv"
        model = fit_coes(
            panel, tau, degree, penalties,
            train_idx=train_idx,
            cv_folds=int(config.get("cv_folds", 5)),
            grid_size=int(config.get("grid_size", 15)),
            grid_ratio=float(config.get("grid_ratio", 1e-3)),
        )
        reports.append(evaluate_out_of_sample(model, panel, test_idx, train_idx))
        pred = coes_predict(model, panel, test_idx)
        pred.to_csv(out_dir / f"series_k{degree}.csv")
        if verbose:
            print(reports[-1].to_json())
    report_to_csv(reports, out_dir / "report.csv")


def cmd_tailbound(config: dict, out_dir: Path, *, seed=None, threads=1, verbose=False):
    u_grid = config.get("u_grid")
    if u_grid is None:
        rng_spec = config.get("u_range")
        if not rng_spec:
            raise ConfigError("config needs 'u_grid' (list) or 'u_range' [lo, hi, n]")
        lo, hi, n = float(rng_spec[0]), float(rng_spec[1]), int(rng_spec[2])
        u_grid = np.linspace(lo, hi, n)
    else:
        u_grid = np.asarray([float(u) for u in u_grid])
    if u_grid.size == 0:
        raise ConfigError("u grid is empty")
    rho = float(config.get("rho", 0.5))
    experiment = tb.empirical_tail_experiment(
        tb.ar1_generator(rho),
        p=int(config.get("p", 10)),
        T=int(config.get("T", 2000)),
        u_grid=u_grid,
        reps=int(config.get("reps", 2000)),
        seed=int(config.get("seed", 0)) if seed is None else seed,
        q=float(config.get("q", 2.0)),
        mu_prime=float(config.get("mu_prime", 1.0)),
        rho_for_mixing=rho,
        threads=threads,
    )
    experiment.to_csv(out_dir / "tailbound.csv")
    with (out_dir / "constants.json").open("w", encoding="utf-8") as fh:
        json.dump(
            {k: float(v) for k, v in experiment.constants.items()},
            fh, indent=2,
        )
    if verbose:
        print(json.dumps({k: float(v) for k, v in experiment.constants.items()}, indent=2))


def cmd_cv(config: dict, out_dir: Path, *, seed=None, threads=1, verbose=False):
    task = config.get("task")
    if task not in ("quantile", "es"):
        raise ConfigError("config key 'task' must be 'quantile' or 'es'")
    data_path = config.get("data")
    if data_path is None:
        raise ConfigError("config key 'data' (CSV path) is required")
    matrix, _ = load_matrix_csv(data_path)
    y, raw = matrix[:, 0], matrix[:, 1:]
    tau = float(config.get("tau", 0.025))
    degree = config.get("chebyshev_degree")
    if degree is not None:
        _, design = build_dictionary(raw, int(degree))
    else:
        design = DesignMatrix(np.column_stack([np.ones(len(y)), raw]))
    plan = ms.blocked_folds(len(y), int(config.get("cv_folds", 5)))
    grid = config.get("grid")
    if grid is None:
        grid = _penalty_grid(config, design, y, tau, task)
    else:
        grid = np.asarray([float(g) for g in grid])
    if task == "quantile":
        result = ms.cv_quantile_penalty(design, y, tau, grid, plan)
    else:
        q_pen = float(config.get("quantile_penalty", 0.0))
        result = ms.cv_es_penalty(design, y, tau, q_pen, grid, plan)
    result.to_csv(out_dir / "loss_table.csv")
    with (out_dir / "chosen.json").open("w", encoding="utf-8") as fh:
        json.dump({"chosen_penalty": result.chosen, "task": task, "tau": tau}, fh, indent=2)
    if verbose:
        print(f"chosen penalty: {result.chosen}")


if __name__ == "__main__":
    sys.exit(main())
