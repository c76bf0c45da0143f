"""Command-line entry point: ``daif train | evaluate | simcheck | plot``.

Exit codes: 0 success, 1 failed simulator check, 2 configuration error,
3 numerical failure during training, 4 unreadable checkpoint, 5 missing or
empty CSV input.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint
from .agent import LOG_COLUMNS, AllOn, EpochReport, TrainingError, drive, run_final_eval, train
from .config import RunConfig, load_config, parse_config
from .plotting import PlotError, plot_horizon_sweep, plot_run
from .sim import DAY, KPI_COLUMNS, TRACE_COLUMNS, ConfigError, KpiSampler, SimConfig, init_env

log = logging.getLogger("daif")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CHECKPOINT, EXIT_CSV = 0, 1, 2, 3, 4, 5

VALIDATION_COLUMNS = (
    "epoch", "n_envs", "pref_mean", "pref_std", "random_pref_mean", "random_pref_std",
    "energy_saving", "energy_saving_std", "production_loss", "production_loss_std", "L_o", "L_s", "G_total",
)
ENV_COLUMNS = (
    "epoch", "env", "seed", "pref", "random_pref", "allon_pref", "parts", "energy_kwh",
    "allon_parts", "allon_energy_kwh", "energy_saving", "production_loss", "actions",
)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, columns, rows) -> None:
    """Fixed column order, header row, floats written with full precision."""
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            values = [r[c] for c in columns] if isinstance(r, dict) else r
            w.writerow([_fmt(v) for v in values])


def _env_rows(rep: EpochReport) -> list[dict]:
    return [dict(r, epoch=rep.epoch) for r in rep.env_rows]


def _print_report(label: str, rep: EpochReport) -> None:
    print(
        f"{label}: saving {rep.energy_saving:.2f} ± {rep.energy_saving_std:.2f} %, "
        f"production loss {rep.production_loss:.2f} ± {rep.production_loss_std:.2f} %, "
        f"preference {rep.pref_mean:.4f} ± {rep.pref_std:.4f} over {rep.n_envs} env(s)"
    )


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, out=args.out, H=getattr(args, "horizon", None))


def cmd_train(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    train_cfg = cfg.train
    if args.days is not None:
        train_cfg = dataclasses.replace(train_cfg, final_days=args.days)
    if args.replications is not None:
        train_cfg = dataclasses.replace(train_cfg, final_envs=args.replications)
    text = cfg.to_text()
    t0 = time.perf_counter()

    def on_epoch(rep, agent):
        checkpoint.save_agent(out / "last.ckpt", agent, text, rep.epoch)
        log.info("epoch %d done after %.0f s", rep.epoch, time.perf_counter() - t0)

    try:
        result = train(cfg.sim, train_cfg, cfg.arch, on_epoch)
    except TrainingError as e:
        print(f"numerical failure at iteration {e.iteration}: {e.cause}", file=sys.stderr)
        return EXIT_NUMERICAL
    checkpoint.save_agent(out / "best.ckpt", result.best_agent, text, result.best_epoch)
    write_csv(out / "train_log.csv", LOG_COLUMNS, result.log_rows)
    write_csv(out / "validation.csv", VALIDATION_COLUMNS, [r.row() for r in result.reports])
    write_csv(out / "validation_envs.csv", ENV_COLUMNS, [row for r in result.reports for row in _env_rows(r)])
    print(f"best epoch {result.best_epoch} (validation preference {result.reports[result.best_epoch].pref_mean:.4f})")

    final = run_final_eval(result.best_agent, cfg.sim, train_cfg)
    write_csv(out / "final_eval.csv", ENV_COLUMNS, _env_rows(final))
    _print_report("final evaluation", final)
    log.info("train finished in %.0f s", time.perf_counter() - t0)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        agent, meta = checkpoint.load(args.checkpoint)
    except checkpoint.CheckpointError as e:
        print(f"cannot read checkpoint {args.checkpoint}: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = parse_config(meta.get("config", ""))
    cfg = cfg.with_overrides(seed=args.seed)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent
    out.mkdir(parents=True, exist_ok=True)
    days = args.days if args.days is not None else cfg.train.final_days
    reps = args.replications if args.replications is not None else cfg.train.final_envs
    rep = run_final_eval(agent, cfg.sim, cfg.train, n_envs=reps, days=days)
    write_csv(out / "evaluation.csv", ENV_COLUMNS, _env_rows(rep))
    _print_report(f"evaluation ({reps} x {days:g} days)", rep)
    return EXIT_OK


def simcheck(config: SimConfig, days: float = 30.0, draws: int = 100_000, seed: int = 0) -> list[tuple[str, bool, str]]:
    """Simulator statistics suite; returns ``(name, passed, detail)`` per check."""
    checks = []
    ws = init_env(config, seed=seed)
    rng = np.random.default_rng(seed)
    for name in ("lambda_arrival", "mu_process", "delta_startup", "psi_fail", "xi_repair"):
        rate = getattr(config, name)
        x = np.array([ws._exp(rng, rate) for _ in range(draws)])
        se = (1.0 / rate) / math.sqrt(draws)
        err = abs(x.mean() - 1.0 / rate)
        checks.append((f"mean sojourn {name}", err < 3 * se, f"mean {x.mean():.3f} vs {1 / rate:.3f} (3 SE = {3 * se:.3f})"))

    t0 = time.perf_counter()
    ws = init_env(config, seed=seed)
    ws.run(days * DAY)
    runtime = time.perf_counter() - t0
    thr = ws.parts_produced / ws.clock
    expected = min(config.lambda_arrival, config.capacity)
    regime = "arrival" if config.lambda_arrival < config.capacity else "capacity"
    checks.append((
        "ALL-ON throughput", abs(thr - expected) / expected <= 0.02,
        f"{thr:.5f} parts/s, {regime}-limited bound {expected:.5f}",
    ))
    power = ws.energy / ws.clock
    # busy machines by Little's law, failed ones in proportion psi/xi
    busy = thr / config.mu_process
    failed = busy * config.psi_fail / config.xi_repair
    idle = config.c - busy - failed
    want = config.w_busy * busy + config.w_failed * failed + config.w_idle * idle
    checks.append(("ALL-ON mean power", abs(power - want) / want <= 0.02, f"{power:.2f} kW vs {want:.2f} kW expected"))
    checks.append(("energy bounds", 0.0 <= power <= config.e_max, f"0 <= {power:.2f} <= {config.e_max:.2f} kW"))
    checks.append(("buffer bounds", 0 <= ws.buffer <= config.K, f"buffer {ws.buffer}, capacity {config.K}"))
    checks.append(("runtime", runtime <= 60.0, f"{runtime:.1f} s for {days:g} days"))
    return checks


def cmd_simcheck(args) -> int:
    cfg = load_config(args.config)
    sim = cfg.sim
    days = args.days if args.days is not None else 30.0
    results = simcheck(sim, days=days, seed=cfg.seed if args.seed is None else args.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ws = init_env(sim, seed=cfg.seed if args.seed is None else args.seed, trace=args.trace)
        sampler = KpiSampler(cfg.train.kpi_period)
        drive(ws, days * DAY, AllOn(), sampler)
        write_csv(out / "kpi_log.csv", KPI_COLUMNS, sampler.rows)
        if args.trace:
            write_csv(out / "trace.csv", TRACE_COLUMNS, ws.trace)
    failed = [n for n, ok, _ in results if not ok]
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_plot(args) -> int:
    try:
        paths = []
        for d in args.run_dirs:
            paths += plot_run(d)
        if len(args.run_dirs) > 1:
            horizons = []
            for d in args.run_dirs:
                text = (Path(d) / "config.txt").read_text() if (Path(d) / "config.txt").is_file() else ""
                horizons.append(parse_config(text, {}).train.H)
            out = Path(args.out) if args.out else Path(args.run_dirs[0]) / "plots"
            out.mkdir(parents=True, exist_ok=True)
            paths.append(plot_horizon_sweep(args.run_dirs, horizons, out / "h_sweep.svg"))
    except PlotError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CSV
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="daif", description="Deep active inference energy-efficiency controller")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("train", help="train an agent and evaluate the best epoch")
    common(p, "run directory (overrides the config)")
    p.add_argument("--horizon", type=int, help="planning horizon H in decisions")
    p.add_argument("--days", type=float, help="final evaluation length in days")
    p.add_argument("--replications", type=int, help="final evaluation environments")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="paired evaluation of a checkpoint against ALL-ON")
    common(p, "output directory (default: the checkpoint's directory)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--days", type=float)
    p.add_argument("--replications", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simcheck", help="simulator statistics suite")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--days", type=float, help="ALL-ON run length (default 30)")
    p.add_argument("--out", help="write the ALL-ON KPI log (and trace) to this directory")
    p.add_argument("--trace", action="store_true", help="also dump the event trace (large)")
    p.set_defaults(func=cmd_simcheck)

    p = sub.add_parser("plot", help="SVG charts from run directories; several directories add the horizon chart")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", help="directory for the horizon chart")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error [{e.field}]: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
