"""Command line entry point: ``mfsmp <subcommand> --config <path>``.

Each subcommand writes ``<out>/<experiment_id>_<subcommand>.csv`` with columns
experiment_id, quantity, index, value, stderr and a JSON summary next to it.
Exit code 0 when every check passes, 2 when a check fails, 1 on error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .adjoint import duality_check, solve_first_adjoint, solve_second_adjoint
from .config import ExperimentConfig, parse_config
from .core import BlockPolicy, ConstantPolicy, Mode, TimeGrid
from .errors import MfsmpError
from .forward import fkk_filter, kalman_bucy_mean, picard_forward
from .noise import default_threads, make_plan
from .presets import get_preset
from .smp import brute_force_control, smp_scan, weighted_mean_se
from .variation import ladder, solve_first_variation, taylor_orders

SUBCOMMANDS = ("forward", "filter-check", "taylor", "duality", "smp-scan", "brute-force", "all")
CSV_COLUMNS = ("experiment_id", "quantity", "index", "value", "stderr")


@dataclass
class Results:
    experiment_id: str
    subcommand: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)

    def add(self, quantity, index, value, stderr=0.0):
        self.rows.append((quantity, index, float(value), float(stderr)))

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


# ---------------------------------------------------------------------------
# pipelines


class _Ctx:
    def __init__(self, cfg: ExperimentConfig, threads: int):
        self.cfg = cfg
        self.threads = threads
        self.grid = TimeGrid(cfg.T, cfg.K)
        self.plan = make_plan(cfg.seed, cfg.M_outer, cfg.N_inner, self.grid, threads=threads)
        self.coeffs = get_preset(cfg.preset, mode=cfg.mode, **cfg.preset_params)
        self.U_set = tuple(sorted(set(cfg.U_set)))
        if len(cfg.policy) == 1:
            self.policy = ConstantPolicy(cfg.policy[0], self.U_set)
        else:
            self.policy = BlockPolicy(tuple(cfg.policy), self.U_set)
        self.alt = ConstantPolicy(cfg.alt, self.U_set)

    def forward(self, policy=None, coeffs=None, tol=None):
        cfg = self.cfg
        return picard_forward(
            coeffs or self.coeffs,
            policy or self.policy,
            self.plan,
            tol=tol or cfg.picard_tol,
            max_iter=cfg.picard_max_iter,
            scheme=cfg.scheme,
        )


def _path_mean_se(per_path):
    M = per_path.size
    return float(per_path.mean()), float(per_path.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0


def run_forward(ctx: _Ctx, res: Results):
    fw = ctx.forward()
    res.add("cost", 0, fw.cost, fw.cost_stderr)
    ok = True
    for k in range(ctx.grid.steps + 1):
        m, se = _path_mean_se(fw.L[:, :, k].mean(axis=1))
        res.add("L_martingale", k, m, se)
        ok &= abs(m - 1.0) <= ctx.cfg.n_stderr * se + 1e-12
    U = fw.U if fw.U.ndim == 2 else fw.U.mean(axis=1)
    for k in range(ctx.grid.steps + 1):
        m, se = weighted_mean_se(U[:, k], fw.Lbar[:, k])
        res.add("U_mean", k, m, se)
    for m, gap in enumerate(fw.history, 1):
        res.add("picard_gap", m, gap)
    res.summary["forward"] = {"cost": fw.cost, "cost_stderr": fw.cost_stderr, "picard_iterations": fw.iterations}
    res.checks["forward.L_martingale"] = bool(ok)
    return fw


def _filter_errors(ctx, K, N):
    cfg = ctx.cfg
    grid = TimeGrid(cfg.T, K)
    plan = make_plan(cfg.seed, cfg.M_outer, N, grid, threads=ctx.threads)
    fw = picard_forward(ctx.coeffs, ctx.policy, plan, tol=cfg.picard_tol, max_iter=cfg.picard_max_iter, scheme="log")
    fkk = fkk_filter(ctx.coeffs, ctx.policy, fw, plan)
    ref = kalman_bucy_mean(plan.dY, grid, ctx.coeffs.x0) if cfg.preset == "linear-filtering" else fw.U
    return np.abs(fkk - ref).max(axis=0), plan.content_hash


def run_filter_check(ctx: _Ctx, res: Results):
    """FKK Euler filter against the Kalman-Bucy mean (linear-filtering) or the ratio filter."""
    if ctx.coeffs.mode is not Mode.CONDITIONAL_LAW:
        res.summary["filter_check"] = {"skipped": "needs conditional-law mode"}
        return
    cfg = ctx.cfg
    e1, h1 = _filter_errors(ctx, cfg.K, cfg.N_inner)
    e2, h2 = _filter_errors(ctx, 2 * cfg.K, 2 * cfg.N_inner)
    for k, v in enumerate(e1):
        res.add("fkk_error", k, v)
    for k, v in enumerate(e2):
        res.add("fkk_error_refined", k, v)
    s1, s2 = float(e1.max()), float(e2.max())
    ratio = s2 / s1 if s1 > 0 else 0.0
    res.add("fkk_sup_error", 0, s1)
    res.add("fkk_sup_error", 1, s2)
    res.add("fkk_halving_ratio", 0, ratio)
    reference = "kalman-bucy" if cfg.preset == "linear-filtering" else "ratio-filter"
    res.summary["filter_check"] = {
        "reference": reference,
        "sup_error": s1,
        "sup_error_refined": s2,
        "halving_ratio": ratio,
        "refined_plan_hash": h2,
    }
    if reference == "kalman-bucy":
        res.checks["filter.sup_error"] = s1 <= 0.1
        res.checks["filter.halving"] = 0.35 <= ratio <= 0.65


def run_taylor(ctx: _Ctx, res: Results):
    cfg = ctx.cfg
    out = taylor_orders(ctx.coeffs, ctx.policy, ladder(cfg.t0, cfg.eps_ladder, ctx.alt), ctx.plan, scheme=cfg.scheme)
    for i, row in enumerate(out["rows"]):
        for key, val in row.items():
            res.add(f"taylor_{key}", i, val)
    slopes = out["slopes"]
    for key, val in slopes.items():
        res.add(f"slope_{key}", 0, val)
    res.summary["taylor"] = {
        "slopes": slopes,
        "slope_e0": slopes["X_e0"],
        "slope_e1": slopes["X_e1"],
        "slope_e2": slopes["X_e2"],
    }
    for var in ("X", "L", "U"):
        e0, e1, e2 = slopes[f"{var}_e0"], slopes[f"{var}_e1"], slopes[f"{var}_e2"]
        res.checks[f"taylor.{var}"] = e0 >= 0.4 and e1 >= 0.85 and e2 >= e1 + 0.1


def count_inversions(values) -> int:
    """Adjacent pairs that fail to decrease strictly."""
    return sum(1 for a, b in zip(values, values[1:]) if not b < a)


def run_duality(ctx: _Ctx, res: Results):
    cfg = ctx.cfg
    fw = ctx.forward()
    adj = solve_first_adjoint(ctx.coeffs, fw, sweeps=cfg.sweeps, ridge=cfg.ridge)
    reports = []
    for i, spike in enumerate(ladder(cfg.t0, cfg.eps_ladder, ctx.alt)):
        var = solve_first_variation(ctx.coeffs, fw, ctx.policy, spike, ctx.plan)
        d = duality_check(ctx.coeffs, fw, var, adj)
        reports.append(d)
        res.add("duality_lhs", i, d["lhs"], d["lhs_stderr"])
        res.add("duality_rhs", i, d["rhs"], d["rhs_stderr"])
        res.add("duality_residual", i, d["residual"], d["residual_stderr"])
        res.add("duality_relative", i, d["relative"])
        res.add("duality_residual_over_eps", i, d["residual_over_eps"])
        res.add("duality_residual_cv", i, d["residual_cv"], d["residual_cv_stderr"])
        res.add("duality_relative_cv", i, d["relative_cv"])
        res.add("duality_residual_cv_over_eps", i, d["residual_cv_over_eps"])
        res.add("duality_eps_effective", i, d["eps"])
    at = int(np.argmin([abs(e - cfg.duality_eps) for e in cfg.eps_ladder]))
    ratio = [d["residual_over_eps"] for d in reports]
    inv = count_inversions(ratio)
    res.summary["duality"] = {
        "relative_at_eps": reports[at]["relative"],
        "relative_cv_at_eps": reports[at]["relative_cv"],
        "residual_over_eps": ratio,
        "residual_cv_over_eps": [d["residual_cv_over_eps"] for d in reports],
        "inversions": inv,
        "generator_identity_gap": max(d["generator_identity_gap"] for d in reports),
    }
    res.checks["duality.relative"] = reports[at]["relative"] <= 0.1
    res.checks["duality.monotone"] = inv <= 1


def _scan_at(ctx, policy, coeffs=None):
    coeffs = coeffs or ctx.coeffs
    fw = ctx.forward(policy, coeffs)
    a = solve_first_adjoint(coeffs, fw, sweeps=ctx.cfg.sweeps, ridge=ctx.cfg.ridge)
    a = solve_second_adjoint(coeffs, fw, policy, a, ridge=ctx.cfg.ridge)
    return smp_scan(coeffs, fw, a, ctx.U_set)


def run_brute_force(ctx: _Ctx, res: Results):
    cfg = ctx.cfg
    pol, table = brute_force_control(
        ctx.coeffs,
        ctx.plan,
        ctx.U_set,
        cfg.blocks,
        tol=cfg.picard_tol,
        max_iter=cfg.picard_max_iter,
        scheme=cfg.scheme,
        threads=ctx.threads,
    )
    for i, (combo, (c, se)) in enumerate(table.items()):
        res.add("policy_cost", i, c, se)
    res.summary["brute_force"] = {
        "argmin": list(pol.values),
        "argmin_cost": table[tuple(pol.values)][0],
        "table": {",".join(repr(v) for v in combo): list(cs) for combo, cs in table.items()},
        "label": "optimum within block-constant deterministic policies",
    }
    return pol


def run_smp_scan(ctx: _Ctx, res: Results, optimum=None):
    cfg = ctx.cfg
    if optimum is None:
        optimum = run_brute_force(ctx, res)
    tol, nse = cfg.tol_smp, cfg.n_stderr
    rep = _scan_at(ctx, optimum)
    for c, v in enumerate(rep.candidates):
        for k in range(rep.gap.shape[1]):
            res.add(f"gap[v={v!r}]", k, rep.gap[c, k], rep.gap_stderr[c, k])
    if rep.M is not None:
        for k in range(rep.M.shape[1]):
            res.add("M", k, *weighted_mean_se(rep.M[:, k], np.ones(rep.M.shape[0])))
            res.add("R", k, *weighted_mean_se(rep.R[:, k], np.ones(rep.R.shape[0])))
    res.add("verdict", 0, rep.verdict)
    # one block at a time moved to the next value of U_set
    teeth = {}
    for b in range(len(optimum.values) if len(ctx.U_set) > 1 else 0):
        vals = list(optimum.values)
        vals[b] = ctx.U_set[(ctx.U_set.index(vals[b]) + 1) % len(ctx.U_set)]
        r2 = _scan_at(ctx, BlockPolicy(tuple(vals), ctx.U_set))
        excess = float(np.max(r2.gap - (tol + nse * r2.gap_stderr)))
        teeth[b] = excess
        res.add("perturbed_max_excess", b, excess)
    summary = {
        "policy": list(optimum.values),
        "verdict": rep.verdict,
        "verdict_at": list(rep.verdict_at),
        "max_excess": float(np.max(rep.gap - (tol + nse * rep.gap_stderr))),
        "perturbed_max_excess": [teeth[b] for b in sorted(teeth)],
        "label": rep.label,
    }
    res.checks["smp.optimum"] = rep.passes(tol, nse)
    if teeth:
        res.checks["smp.teeth"] = all(v > 0 for v in teeth.values())
    if ctx.coeffs.mode is Mode.STATE_FUNCTIONAL and ctx.coeffs.has_h3:
        main = _scan_at(ctx, optimum, ctx.coeffs.with_mode(Mode.CONDITIONAL_LAW))
        se = np.sqrt(main.gap_stderr**2 + rep.gap_stderr**2)
        diff = np.abs(main.gap - rep.gap)
        for c in range(diff.shape[0]):
            for k in range(diff.shape[1]):
                res.add(f"mode_gap_diff[v={rep.candidates[c]!r}]", k, diff[c, k], se[c, k])
        summary["mode_agreement_max_ratio"] = float(np.max(diff / np.where(se > 0, se, np.inf)))
        res.checks["smp.mode_agreement"] = bool(np.all(diff <= nse * se))
    res.summary["smp_scan"] = summary


def run_experiment(cfg: ExperimentConfig, subcommand: str, threads: int | None = None) -> Results:
    if subcommand not in SUBCOMMANDS:
        raise MfsmpError(f"unknown subcommand {subcommand!r}", module="mfcli")
    threads = threads or default_threads()
    ctx = _Ctx(cfg, threads)
    res = Results(cfg.experiment_id, subcommand)
    steps = {
        "forward": lambda: run_forward(ctx, res),
        "filter-check": lambda: run_filter_check(ctx, res),
        "taylor": lambda: run_taylor(ctx, res),
        "duality": lambda: run_duality(ctx, res),
        "brute-force": lambda: run_brute_force(ctx, res),
        "smp-scan": lambda: run_smp_scan(ctx, res),
    }
    if subcommand == "all":
        for name in ("forward", "filter-check", "taylor", "duality", "smp-scan"):
            steps[name]()
    else:
        steps[subcommand]()
    res.summary.update(
        experiment_id=cfg.experiment_id,
        subcommand=subcommand,
        config=cfg.echo(),
        plan_hash=ctx.plan.content_hash,
        checks=dict(sorted(res.checks.items())),
        passed=res.passed,
        version=__version__,
    )
    return res


# ---------------------------------------------------------------------------
# output


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def emit_report(results: Results, out_dir: str) -> tuple[str, str]:
    """Write the CSV and JSON summary atomically; returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.join(out_dir, f"{results.experiment_id}_{results.subcommand}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for q, i, v, se in results.rows:
        w.writerow((results.experiment_id, q, i, repr(v), repr(se)))
    csv_path, json_path = stem + ".csv", stem + ".json"
    _atomic_write(csv_path, buf.getvalue())
    _atomic_write(json_path, json.dumps(_jsonable(results.summary), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfsmp", description="Mean-field partially observed control: simulation and maximum-principle checks.")
    p.add_argument("--version", action="version", version=f"mfsmp {__version__}")
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="experiment config file")
        s.add_argument("--out", help="output directory (overrides output.out)")
        s.add_argument("--seed", type=int, help="noise seed (overrides ensemble.seed)")
        s.add_argument("--threads", type=int, help="worker threads (default: MFSMP_THREADS or 1)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = parse_config(fh.read())
        if args.seed is not None:
            if args.seed < 0:
                raise MfsmpError("--seed must be non-negative", module="mfcli")
            cfg = cfg.replace(seed=args.seed)
        if args.out is not None:
            cfg = cfg.replace(out=args.out)
        if args.threads is not None and args.threads < 1:
            raise MfsmpError("--threads must be >= 1", module="mfcli")
        res = run_experiment(cfg, args.subcommand, threads=args.threads)
        paths = emit_report(res, cfg.out)
    except MfsmpError as exc:
        print(f"error [{exc.module or 'mfsmp'}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error [mfcli]: {exc}", file=sys.stderr)
        return 1
    for name, ok in sorted(res.checks.items()):
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    for p in paths:
        print(p)
    return 0 if res.passed else 2


if __name__ == "__main__":
    sys.exit(main())
