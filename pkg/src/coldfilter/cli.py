"""Command-line entry points.

Exit codes: 0 success, 2 validation or I/O failure, 3 instability,
4 equivalence-check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ._version import __version__
from .errors import ConfigError, GridMismatchError, InstabilityError
from .estimation import force_sensitivity, sensitivity_curve_vs_tau
from .recordio import read_record, write_csv
from .scenarios import (
    FIGURE_IDS,
    OUTPUT_DIR_ENV,
    ScenarioConfig,
    compare_records,
    emit_figure_data,
    gain_sweep_stats,
    parse_config,
    resolve_sweep,
    run_scenario,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INSTABILITY = 3
EXIT_NOT_EQUIVALENT = 4


def _out_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUTPUT_DIR_ENV, "out"))


def _load_config(path: str, seed: int | None, trials: int | None) -> ScenarioConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = parse_config(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if trials is not None:
        if cfg.estimation is None:
            raise ConfigError("--trials given but the config has no estimation section")
        cfg = replace(cfg, estimation=replace(cfg.estimation, n_trials=trials))
    return cfg


def _parse_gains(text: str) -> list[float]:
    try:
        gains = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"invalid --gains list {text!r}") from exc
    if not gains:
        raise ConfigError("--gains list is empty")
    return gains


def _cmd_run(args, forced_mode: str | None) -> int:
    cfg = _load_config(args.config, args.seed, None)
    if forced_mode is not None:
        cfg = replace(cfg, mode=forced_mode)
    elif cfg.mode not in ("open_loop", "feedback"):
        raise ConfigError("simulate expects mode=open_loop or mode=feedback; "
                          "use the filter/fredholm subcommands otherwise")
    manifest = run_scenario(cfg, _out_dir(args.out))
    for path in manifest.outputs:
        print(path)
    return EXIT_OK


def _cmd_compare(args) -> int:
    try:
        rec_a = read_record(args.record_a)
        rec_b = read_record(args.record_b)
    except OSError as exc:
        raise ConfigError(f"cannot read record: {exc}") from exc
    report = compare_records(rec_a, rec_b, psd_segment_len=args.psd_segment)
    frac = report.psd_fractional_diff
    summary = {
        "relative_l2_error": report.relative_l2_error,
        "max_abs_error": report.max_abs_error,
        "n_samples": report.n_samples,
        "psd_fractional_diff_mean_abs": float(np.mean(np.abs(frac))),
        "psd_fractional_diff_max_abs": float(np.max(np.abs(frac))),
        "tolerance": args.tol,
        "equivalent": bool(report.relative_l2_error <= args.tol),
    }
    print(f"relative L2 error : {summary['relative_l2_error']:.6e}")
    print(f"max abs error     : {summary['max_abs_error']:.6e}")
    print(f"PSD frac diff     : mean|.| {summary['psd_fractional_diff_mean_abs']:.3e}"
          f"  max|.| {summary['psd_fractional_diff_max_abs']:.3e}")
    print(f"equivalent at tol {args.tol:g}: {summary['equivalent']}")
    if args.json:
        Path(args.json).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    return EXIT_OK if summary["equivalent"] else EXIT_NOT_EQUIVALENT


def _cmd_sweep(args) -> int:
    cfg = _load_config(args.config, args.seed, args.trials)
    if cfg.estimation is None or not cfg.estimation.tau_list:
        raise ConfigError("sweep requires an estimation section with tau_list")
    gains = _parse_gains(args.gains)
    tau_list = list(cfg.estimation.tau_list)
    n_trials = cfg.estimation.n_trials
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats = gain_sweep_stats(cfg, gains, ["filter"], tau_list, n_trials,
                             cfg.seed, threads=args.threads)
    if args.tau_sweep:
        rows = []
        for g in gains:
            curve = sensitivity_curve_vs_tau(stats[("filter", g)], cfg.oscillator, g)
            rows.extend((t, d, g, "filter") for t, d in zip(curve.abscissa,
                                                            curve.delta_f))
        path = out / "sweep_tau.csv"
        write_csv(path, ["tau_s", "delta_f", "gain", "mode"], rows)
    else:
        at_tau = args.at_tau if args.at_tau is not None else tau_list[-1]
        if at_tau not in tau_list:
            raise ConfigError(f"--at-tau {at_tau:g} is not in the config tau_list")
        j = tau_list.index(at_tau)
        rows = [(g, force_sensitivity(stats[("filter", g)][j], cfg.oscillator, g),
                 at_tau) for g in gains]
        path = out / "sweep_gain.csv"
        write_csv(path, ["gain", "delta_f", "tau_s"], rows)
    print(path)
    return EXIT_OK


def _cmd_resolve(args) -> int:
    cfg = _load_config(args.config, args.seed, args.trials)
    if cfg.estimation is None or not cfg.estimation.tau_list:
        raise ConfigError("resolve requires an estimation section with tau_list")
    gains = _parse_gains(args.gains)
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results, _, _ = resolve_sweep(cfg, gains, list(cfg.estimation.tau_list),
                                  cfg.estimation.n_trials, cfg.seed,
                                  threads=args.threads)
    path = out / "resolve.csv"
    write_csv(path, ["gain", "tau_resolve_s", "resolved"],
              [(r.gain, r.tau_resolve, r.resolved) for r in results])
    print(path)
    return EXIT_OK


def _cmd_figure(args) -> int:
    overrides = None
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read overrides {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
    manifest = emit_figure_data(args.which, _out_dir(args.out), seed=args.seed,
                                n_trials=args.trials, threads=args.threads,
                                overrides=overrides)
    for path in manifest.outputs:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coldfilter",
        description="Feedback-vs-filtering force-sensing simulator and toolkit",
    )
    parser.add_argument("--version", action="version", version=f"coldfilter {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="scenario config JSON path")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None,
                       help=f"output directory (default ${OUTPUT_DIR_ENV} or ./out)")
        p.add_argument("--threads", type=int, default=1,
                       help="ensemble worker threads (does not change results)")
        p.add_argument("--trials", type=int, default=None,
                       help="override estimation.n_trials")

    p = sub.add_parser("simulate", help="run an open-loop or feedback scenario")
    add_common(p)
    p = sub.add_parser("filter", help="open-loop run plus stationary equivalent filter")
    add_common(p)
    p = sub.add_parser("fredholm", help="open-loop run plus non-stationary Fredholm solve")
    add_common(p)

    p = sub.add_parser("compare", help="equivalence report for two record files")
    p.add_argument("record_a")
    p.add_argument("record_b")
    p.add_argument("--tol", type=float, default=1e-8,
                   help="relative L2 tolerance (default 1e-8)")
    p.add_argument("--psd-segment", type=int, default=None)
    p.add_argument("--json", default=None, help="also write the report as JSON")

    p = sub.add_parser("sweep", help="force-sensitivity sweeps")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--gain", dest="tau_sweep", action="store_false",
                       help="delta_F versus gain at a fixed tau")
    group.add_argument("--tau", dest="tau_sweep", action="store_true",
                       help="delta_F versus tau for each gain")
    p.add_argument("--gains", required=True, help="comma-separated gain list")
    p.add_argument("--at-tau", type=float, default=None,
                   help="tau for the gain sweep (default: last tau in the config)")
    add_common(p)

    p = sub.add_parser("resolve", help="averaging time to resolve the configured signal")
    p.add_argument("--gains", required=True, help="comma-separated gain list")
    add_common(p)

    p = sub.add_parser("figure", help="emit one figure-data bundle as CSV")
    p.add_argument("which", choices=FIGURE_IDS)
    p.add_argument("--config", required=False, default=None,
                   help="JSON file overriding bundle parameters")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--trials", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_run(args, None)
        if args.command == "filter":
            return _cmd_run(args, "filter")
        if args.command == "fredholm":
            return _cmd_run(args, "fredholm")
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "resolve":
            return _cmd_resolve(args)
        if args.command == "figure":
            return _cmd_figure(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except InstabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INSTABILITY
    except (ConfigError, GridMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
