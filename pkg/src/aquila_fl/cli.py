"""Experiment runner: single runs, policy comparisons, and beta sweeps.

Usage:
  aquila-fl run <config> [--strict] [--out DIR] [--dump-dataset]
  aquila-fl compare <config> --policies aquila,fixed:8,fixed:32-full [--tol T] [--out DIR]
  aquila-fl sweep-beta <config> --betas 0,0.1,0.25,1.25 [--out DIR]

`run` writes rounds.csv, summary.json, and certificates.json into the output
directory. `compare` re-runs the same (problem, seed) under each policy and
writes compare.csv; `sweep-beta` does the same across skip factors into
sweep.csv. Output is byte-deterministic for a fixed (config, seed): floats
are printed with 17 significant digits and JSON keys are sorted.

Exit codes: 0 done, 2 bad config, 3 numeric abort or I/O failure,
4 any FAIL certificate under --strict.

The default output directory is "out", overridable by --out or the
AQUILA_FL_OUT environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from pathlib import Path

from .config import RunConfig, config_dict, load_config
from .errors import ConfigError, SimulationError
from .fl_core import RoundReport, RunResult, run_experiment
from .problems import dataset_rows, reference_descent

CSV_COLUMNS = ("round", "device_id", "uploaded", "bits", "level", "range",
               "innovation_norm2", "eps_norm2", "global_loss", "grad_norm2",
               "theta_diff_norm2", "gamma_est", "descent_lhs", "descent_rhs",
               "deviation_lhs", "deviation_rhs")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "%.17g" % value
    return str(value)


def emit_round_csv(reports: list[RoundReport], path: Path) -> None:
    """One row per (round, device); globals repeat on each device row."""
    lines = [",".join(CSV_COLUMNS)]
    for rep in reports:
        for rec in rep.records:
            lines.append(",".join(_fmt(v) for v in (
                rep.round, rec.device_id, rec.uploaded, rec.bits, rec.level,
                rec.range, rec.innovation_norm2, rec.eps_norm2,
                rep.global_loss, rep.grad_norm2, rep.theta_diff_norm2,
                rep.gamma_est, rep.descent_lhs, rep.descent_rhs,
                rep.deviation_lhs, rep.deviation_rhs)))
    path.write_text("\n".join(lines) + "\n")


def _totals(reports: list[RoundReport]) -> tuple[int, int]:
    bits = sum(rep.bits_total for rep in reports)
    uploads = sum(rep.uploads for rep in reports)
    return bits, uploads


def write_summary(cfg: RunConfig, result: RunResult, path: Path) -> None:
    bits, uploads = _totals(result.reports)
    summary = {
        "config": config_dict(cfg),
        "rounds_completed": len(result.reports),
        "total_bits": bits,
        "uploads_total": uploads,
        "final_loss": result.final_loss,
        "final_grad_norm2": result.final_grad_norm,
        "gamma_max": result.gamma_max,
        "smoothness_l": result.smooth_l,
        "pl_mu": result.pl_mu,
        "f_star": result.f_star,
        "aborted": result.aborted,
        "certificate_status": {name: cert["status"]
                               for name, cert in sorted(result.certificates.items())},
        "per_device": [{"id": dev.id, "uploads": dev.uploads, "bits_sent": dev.bits_sent}
                       for dev in result.devices],
    }
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def write_certificates(result: RunResult, path: Path) -> None:
    path.write_text(json.dumps(result.certificates, indent=2, sort_keys=True) + "\n")


def _rounds_to_tol(result: RunResult, f_star: float, tol: float) -> int | None:
    for rep in result.reports:
        if rep.global_loss - f_star <= tol:
            return rep.round
    return None


def _bits_to_tol(result: RunResult, f_star: float, tol: float) -> int | None:
    """Cumulative bits uploaded by the time the gap first reaches tol."""
    total = 0
    for rep in result.reports:
        if rep.global_loss - f_star <= tol:
            return total
        total += rep.bits_total
    return None


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("AQUILA_FL_OUT") or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _operational_f_star(result: RunResult, cfg: RunConfig) -> float:
    """Closed form when the problem has one, else a long full-precision run."""
    if result.f_star is not None:
        return result.f_star
    steps = max(10 * cfg.rounds, 100)
    _, loss = reference_descent(result.problem, cfg.alpha, steps)
    return loss


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = _out_dir(args)
    result = run_experiment(cfg)
    try:
        emit_round_csv(result.reports, out / "rounds.csv")
        write_summary(cfg, result, out / "summary.json")
        write_certificates(result, out / "certificates.json")
        if args.dump_dataset:
            _dump_dataset(result, out / "dataset.csv")
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    if result.aborted:
        print(f"numeric abort: {result.aborted} (partial telemetry written)",
              file=sys.stderr)
        return 3
    if args.strict:
        failed = [name for name, cert in sorted(result.certificates.items())
                  if cert["status"] == "FAIL"]
        if failed:
            print(f"certificate FAIL: {', '.join(failed)}", file=sys.stderr)
            return 4
    return 0


def _dump_dataset(result: RunResult, path: Path) -> None:
    problem = result.problem
    if not hasattr(problem, "dataset"):
        print("dataset dump skipped: problem has no dataset", file=sys.stderr)
        return
    n_features = problem.dataset.features.shape[1]
    header = [f"feature_{i}" for i in range(n_features)] + ["label", "device_id"]
    lines = [",".join(header)]
    for x, label, device_id in dataset_rows(problem.dataset, problem.shards):
        lines.append(",".join([_fmt(float(v)) for v in x] + [str(label), str(device_id)]))
    path.write_text("\n".join(lines) + "\n")


def cmd_compare(args) -> int:
    try:
        cfg = load_config(args.config)
        policies = [p.strip() for p in args.policies.split(",") if p.strip()]
        if len(policies) < 2:
            raise ConfigError("compare needs at least 2 policies")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = _out_dir(args)
    tol = args.tol if args.tol is not None else cfg.tol

    rows = []
    f_star = None
    for policy in policies:
        run_cfg = dataclasses.replace(cfg, level_policy=policy)
        try:
            run_cfg.validate()
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        result = run_experiment(run_cfg)
        if result.aborted:
            print(f"numeric abort under policy {policy}: {result.aborted}",
                  file=sys.stderr)
            return 3
        if f_star is None:
            f_star = _operational_f_star(result, cfg)
        bits, uploads = _totals(result.reports)
        reached = (_rounds_to_tol(result, f_star, tol)
                   if tol is not None and math.isfinite(tol) else None)
        rows.append((policy, result.final_loss, bits, reached, uploads))

    lines = ["policy,final_loss,total_bits,rounds_to_tol,uploads_total"]
    for policy, loss, bits, reached, uploads in rows:
        lines.append(",".join([policy, _fmt(loss), str(bits), _fmt(reached),
                               str(uploads)]))
    try:
        (out / "compare.csv").write_text("\n".join(lines) + "\n")
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    return 0


def cmd_sweep_beta(args) -> int:
    try:
        cfg = load_config(args.config)
        betas = [float(b) for b in args.betas.split(",") if b.strip()]
        if not betas:
            raise ConfigError("sweep-beta needs at least one beta")
        if any(b < 0 for b in betas):
            raise ConfigError("betas must be >= 0")
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = _out_dir(args)

    lines = ["beta,final_loss,total_bits,uploads_total"]
    for beta in betas:
        run_cfg = dataclasses.replace(cfg, beta=beta)
        result = run_experiment(run_cfg)
        if result.aborted:
            print(f"numeric abort at beta={beta}: {result.aborted}", file=sys.stderr)
            return 3
        bits, uploads = _totals(result.reports)
        lines.append(",".join([_fmt(beta), _fmt(result.final_loss), str(bits),
                               str(uploads)]))
    try:
        (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="aquila-fl",
        description="communication-efficient federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("config")
    p_run.add_argument("--strict", action="store_true",
                       help="exit 4 if any certificate reports FAIL")
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--dump-dataset", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several level policies on one seed")
    p_cmp.add_argument("config")
    p_cmp.add_argument("--policies", required=True,
                       help="comma list, e.g. aquila,fixed:8,fixed:32-full")
    p_cmp.add_argument("--tol", type=float, default=None,
                       help="optimality gap defining rounds_to_tol")
    p_cmp.add_argument("--out", default=None)
    p_cmp.set_defaults(func=cmd_compare)

    p_sweep = sub.add_parser("sweep-beta", help="run a range of skip factors")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--betas", required=True, help="comma list, e.g. 0,0.1,0.25,1.25")
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(func=cmd_sweep_beta)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
