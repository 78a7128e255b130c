"""Command-line driver: estimate, monitor, benchmark and reconstruct workflows.

Exit codes: 0 success, 1 configuration/validation error, 2 numerical failure.
All numeric CSV/JSON fields are written with full repr precision so that
identical config + seed reproduces outputs bit-identically (timing excepted).
Outputs are held in memory and written only after the workflow finished, so a
failing run leaves no partial files.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError

from .config import ConfigError, RunConfig, load_config
from .gengk import gengk_bidiag, truncate_factorization
from .marginal import (
    HyperParams,
    Hyperprior,
    MarginalModel,
    objective_exact,
    objective_gengk,
)
from .monitor import err_indicator, mc_xi_estimate, normal_matrix_apply, prop2_bound, xi_recurrence
from .operators import dense_matrix
from .estimate import OptimizeOptions, map_reconstruct, optimize_hyperparams
from .problems import build_heat_problem, build_ray_tomo_problem, relative_error

__all__ = ["main", "cmd_estimate", "cmd_monitor", "cmd_benchmark", "cmd_reconstruct",
           "read_csv", "read_theta_star"]


def _fmt(x) -> str:
    return repr(float(x))


def _render_csv(header: list[str], rows: list[list]) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def _write_outputs(out_dir: Path, outputs: dict[str, str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in outputs.items():
        (out_dir / name).write_text(text)


def read_csv(path) -> dict[str, np.ndarray]:
    """Read one of this package's CSV outputs into named columns."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    data = np.atleast_1d(data)
    return {name: np.asarray(data[name], dtype=float) for name in data.dtype.names}


def read_theta_star(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _build_problem(cfg: RunConfig):
    pc = cfg.problem
    if pc.name == "heat1d":
        prob = build_heat_problem(n=pc.n, noise_level=pc.noise_level,
                                  seed=cfg.seed, kappa=pc.kappa)
    else:
        prob = build_ray_tomo_problem(g=pc.grid, n_rays=pc.n_rays,
                                      noise_level=pc.noise_level, seed=cfg.seed,
                                      nu=cfg.kernel.nu, prior_std=pc.prior_std,
                                      ell=pc.ell)
    hyperprior = Hyperprior(cfg.hyperprior.kind, cfg.hyperprior.gamma)
    model = MarginalModel(forward=prob.forward, data=prob.data,
                          geometry=prob.geometry, nu=cfg.kernel.nu,
                          hyperprior=hyperprior, dense_cap=cfg.dense_cap)
    return prob, model


def _reconstruction_csv(s_true, s_hat) -> str:
    re = relative_error(s_true, s_hat)
    rows = [[t, h, re] for t, h in zip(s_true, s_hat)]
    return _render_csv(["s_true", "s_hat", "re"], rows)


def cmd_estimate(cfg: RunConfig, out_dir: Path) -> int:
    prob, model = _build_problem(cfg)
    ec = cfg.estimate
    opts = OptimizeOptions(k=ec.k, max_iters=ec.max_iters, grad_tol=ec.grad_tol,
                           bounds=np.asarray(ec.bounds, dtype=float),
                           parameterization=ec.parameterization)
    theta0 = HyperParams(np.asarray(ec.theta0, dtype=float))
    theta_star, trace = optimize_hyperparams(model, theta0, opts)
    s_hat = map_reconstruct(model, theta_star, k=ec.k)
    re = relative_error(prob.s_true, s_hat)

    summary = {
        "theta_star": [float(v) for v in theta_star.values],
        "objective": trace.values[int(np.argmin(trace.values))],
        "relative_error": re,
        "converged": trace.converged,
        "reason": trace.reason,
        "iterations": trace.iterations,
        "func_count": trace.func_count,
        "k": ec.k,
        "seed": cfg.seed,
        "trace": [
            {"theta": [float(v) for v in th], "objective": val, "grad_norm": gn}
            for th, val, gn in zip(trace.thetas, trace.values, trace.grad_norms)
        ],
    }
    iterate_rows = [
        [i, *trace.thetas[i], trace.values[i], trace.grad_norms[i]]
        for i in range(trace.func_count)
    ]
    theta_cols = [f"theta{i + 1}" for i in range(len(theta_star))]
    outputs = {
        "theta_star.json": json.dumps(summary, indent=2) + "\n",
        "reconstruction.csv": _reconstruction_csv(prob.s_true, s_hat),
        "iterates.csv": _render_csv(["eval", *theta_cols, "objective", "grad_norm"],
                                    iterate_rows),
    }
    _write_outputs(out_dir, outputs)
    return 0


def cmd_monitor(cfg: RunConfig, out_dir: Path) -> int:
    prob, model = _build_problem(cfg)
    mc = cfg.monitor
    theta = HyperParams(np.asarray(mc.theta, dtype=float))
    noise = model.noise_cov(theta)
    q_op = model.prior_cov(theta)
    k_max = min(mc.k_max, min(model.nrows, model.ncols))
    fact = gengk_bidiag(model.forward, noise, q_op, model.prior_mean,
                        model.data, k_max)
    k_max = fact.k

    xi_hat = mc_xi_estimate(normal_matrix_apply(model.forward, noise), q_op,
                            fact, mc.n_mc, seed=cfg.seed, k_max=k_max,
                            probe_kind=mc.probe_kind)
    err_mc = np.array([err_indicator(x, fact.beta1) for x in xi_hat])

    dense_ok = model.nrows <= model.dense_cap
    if dense_ok:
        exact = objective_exact(model, theta)
        a_d = dense_matrix(model.forward)
        q_d = dense_matrix(model.prior_cov(theta))
        xi0 = float(np.sum((a_d.T @ a_d / theta.noise_var) * q_d.T))
        xi_exact = xi_recurrence(fact.alphas, fact.betas, xi0)

    rows = []
    for k in range(1, k_max + 1):
        approx = objective_gengk(model, theta, k, fact=truncate_factorization(fact, k))
        if dense_ok:
            abs_err = abs(exact.value - approx.value)
            re_obj = abs_err / abs(exact.value)
            re_logdet = abs(exact.logdet_term - approx.logdet_term) / abs(exact.logdet_term)
            re_quad = abs(exact.quad_term - approx.quad_term) / abs(exact.quad_term)
            bound = prop2_bound(max(xi_exact[k - 1], 0.0), fact.beta1)
        else:
            abs_err = re_obj = re_logdet = re_quad = bound = float("nan")
        rows.append([k, re_obj, abs_err, re_logdet, re_quad,
                     xi_hat[k - 1], err_mc[k - 1], bound])

    outputs = {
        "error_vs_k.csv": _render_csv(
            ["k", "re_objective", "abs_err_objective", "re_logdet", "re_quad",
             "xi_hat", "err_mc", "prop2_bound"],
            rows,
        )
    }
    _write_outputs(out_dir, outputs)
    return 0


def _time_call(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cmd_benchmark(cfg: RunConfig, out_dir: Path) -> int:
    bc = cfg.benchmark
    if cfg.problem.name != "heat1d":
        raise ValueError("the timing benchmark sweeps heat1d problem sizes")
    theta = HyperParams(np.asarray(bc.theta, dtype=float))
    rows = []
    for n in bc.sizes:
        cfg_n = replace(cfg, problem=replace(cfg.problem, n=int(n)))
        prob, model = _build_problem(cfg_n)
        k = min(bc.k, min(model.nrows, model.ncols))
        t_gengk = _time_call(lambda: objective_gengk(model, theta, k), bc.repeats)
        if model.nrows <= model.dense_cap:
            t_exact = _time_call(lambda: objective_exact(model, theta), max(1, bc.repeats // 3))
            speedup = t_exact / t_gengk
        else:
            t_exact = float("nan")
            speedup = float("nan")
        rows.append([int(n), t_exact, t_gengk, speedup])
    outputs = {"timing.csv": _render_csv(["n", "exact_seconds", "gengk_seconds", "speedup"], rows)}
    _write_outputs(out_dir, outputs)
    return 0


def cmd_reconstruct(cfg: RunConfig, out_dir: Path) -> int:
    prob, model = _build_problem(cfg)
    rc = cfg.reconstruct
    theta = HyperParams(np.asarray(rc.theta, dtype=float))
    s_hat = map_reconstruct(model, theta, k=rc.k)
    outputs = {"reconstruction.csv": _reconstruction_csv(prob.s_true, s_hat)}
    _write_outputs(out_dir, outputs)
    return 0


_COMMANDS = {
    "estimate": cmd_estimate,
    "monitor": cmd_monitor,
    "benchmark": cmd_benchmark,
    "reconstruct": cmd_reconstruct,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gkhyper",
        description="Hyperparameter estimation workflows for linear-Gaussian "
                    "inverse problems",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be nonnegative")
            cfg.seed = args.seed
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1

    try:
        return _COMMANDS[args.command](cfg, Path(args.out))
    except (FloatingPointError, LinAlgError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"invalid run: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
