"""Command-line entry point: ``perfab analyze | srm | simulate``.

Exit codes: 0 success, 1 input or usage error, 2 a self-selection SRM alert
fired (analyze / srm only).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from . import report as rep
from .ingest import (
    WEEK_MS,
    EventLog,
    IngestError,
    derive_covariates,
    load_assignments,
    load_device_map,
    load_events,
)
from .metrics import QUANTILE_PRESETS, user_level_values
from .sim import (
    SETUP_NAMES,
    SWEEP_COLUMNS,
    DivergenceConfig,
    ScenarioConfig,
    run_divergence,
    run_sweep,
    setup_plan,
    sweep_rows,
)
from .srm import assignment_srm, self_selection_srm

EXIT_OK, EXIT_ERROR, EXIT_ALERT = 0, 1, 2


class CommandError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    # exit code 2 is reserved for SRM alerts
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _quantile_arg(text: str) -> float:
    if text.lower() in QUANTILE_PRESETS:
        return QUANTILE_PRESETS[text.lower()]
    try:
        q = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number in [0, 1] or one of {', '.join(QUANTILE_PRESETS)}")
    if not 0.0 <= q <= 1.0:
        raise argparse.ArgumentTypeError("quantile must lie in [0, 1]")
    return q


def _open_input(path: str, label: str):
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"{label} file not found: {path}")
    return p


def _event_format(path: Path, explicit: str | None) -> str:
    if explicit:
        return explicit
    return "jsonl" if path.suffix.lower() in (".jsonl", ".ndjson", ".json") else "csv"


def _read_events(path: str, fmt: str | None, label: str = "events") -> EventLog:
    p = _open_input(path, label)
    with p.open("rb") as fh:
        return load_events(fh, _event_format(p, fmt), name=str(p))


def _split_periods(args) -> tuple[EventLog, EventLog]:
    events = _read_events(args.events, args.format)
    if args.pre_events:
        pre = _read_events(args.pre_events, args.format, "pre-period events")
        exp = events.window(args.experiment_start, args.experiment_end)
    elif args.experiment_start is not None:
        window = int(args.pre_window_days * 24 * 3600 * 1000) if args.pre_window_days else WEEK_MS
        pre = events.window(args.experiment_start - window, args.experiment_start)
        exp = events.window(args.experiment_start, args.experiment_end)
    else:
        raise CommandError("need --experiment-start or --pre-events to measure pre-period engagement")
    return exp, pre


def _metrics(args, events: EventLog) -> list[str]:
    metrics = args.metric or events.metrics()
    if not metrics:
        raise CommandError("no events in the experiment window")
    return metrics


def cmd_analyze(args) -> int:
    exp, pre = _split_periods(args)
    with _open_input(args.assignments, "assignments").open("rb") as fh:
        assignments = load_assignments(fh, name=args.assignments)
    with _open_input(args.devices, "device map").open("rb") as fh:
        devices = load_device_map(fh, name=args.devices)
    reports = []
    for metric in _metrics(args, exp):
        reports.append(rep.analyze_metric(
            exp, pre, assignments, devices, metric,
            q=args.quantile, alert_threshold=args.alert_threshold, seed=args.seed,
            n_boot=args.boot, force_correct=args.force_correct,
            device_threshold=args.device_threshold, expected_ratio=args.expected_ratio,
            min_donors=args.min_donors, min_events=args.min_events,
        ))
    meta = {
        "seed": args.seed,
        "alpha": args.alpha,
        "alert_threshold": args.alert_threshold,
        "rejected_event_rows": exp.summary.rows_rejected,
    }
    text = rep.dumps(reports, **meta)
    if args.json_out:
        Path(args.json_out).write_text(text + "\n")
    if args.csv_out:
        with open(args.csv_out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=rep.CSV_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for r in reports:
                writer.writerows(rep.csv_rows(r))
    if args.json:
        print(text)
    else:
        print("\n\n".join(rep.render_table(r) for r in reports))
    return EXIT_ALERT if any(r.self_selection_srm.alert for r in reports) else EXIT_OK


def cmd_srm(args) -> int:
    exp = _read_events(args.events, args.format)
    if args.experiment_start is not None or args.experiment_end is not None:
        exp = exp.window(args.experiment_start, args.experiment_end)
    with _open_input(args.assignments, "assignments").open("rb") as fh:
        assignments = load_assignments(fh, name=args.assignments)
    out = []
    alert = False
    for metric in _metrics(args, exp):
        # covariates are only needed for bucket membership here
        cov = derive_covariates([], assignments, {}, device_user_threshold=1)
        values = user_level_values(exp.for_metric(metric), cov, 0.5)
        srm = self_selection_srm(values, cov, args.threshold)
        alert |= srm.alert
        n_t = int(cov.treated.sum())
        entry = {"metric_id": metric, "self_selection_srm": srm.to_dict(),
                 "assignment_srm": assignment_srm(n_t, len(cov) - n_t, args.expected_ratio).to_dict()}
        out.append(entry)
        if not args.json:
            flag = "ALERT" if srm.alert else "ok"
            print(f"{metric}: present {srm.p_treatment:.4%} treatment vs {srm.p_control:.4%} control, "
                  f"delta_miss {srm.delta_miss * 100:+.3f}pp, p={srm.test.p_value:.3g} "
                  f"(threshold {args.threshold:g}) [{flag}]")
    if args.json:
        print(json.dumps({"threshold": args.threshold, "metrics": out}, indent=2, sort_keys=True))
    return EXIT_ALERT if alert else EXIT_OK


def load_sim_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = _open_input(path, "config")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise CommandError(f"{path}: expected a mapping at the top level")
    unknown = set(data) - {"scenario", "setups", "divergence"}
    if unknown:
        raise CommandError(f"{path}: unknown top-level keys {sorted(unknown)}")
    return data


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def cmd_simulate(args) -> int:
    if args.setup not in SETUP_NAMES:
        raise CommandError(f"unknown setup {args.setup!r}; valid setups: {', '.join(SETUP_NAMES)}")
    data = load_sim_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.setup == "divergence":
        cfg = DivergenceConfig.from_dict(data.get("divergence", {}))
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.iterations is not None:
            cfg = replace(cfg, n_repeats=args.iterations)
        res = run_divergence(cfg)
        with open(out_dir / "divergence.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["repeat", "event_estimate", "event_p_value", "user_estimate", "user_p_value", "diverged"])
            for i, r in enumerate(res["repeats"]):
                w.writerow([i, _fmt(r["event_level"].estimate), _fmt(r["event_level"].p_value),
                            _fmt(r["user_level"].estimate), _fmt(r["user_level"].p_value), int(r["diverged"])])
        summary = {k: v for k, v in res.items() if k != "repeats"}
        summary["config"] = cfg.to_dict()
        (out_dir / "divergence_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        print(f"divergence: event-level significant in {res['event_significant_fraction']:.0%} of repeats, "
              f"user-level insignificant in {1 - res['user_significant_fraction']:.0%}; "
              f"event-level significant and user-level insignificant in {res['diverged_fraction']:.0%} "
              f"(mean event-level {res['mean_event_estimate']:+.2f} ms, user-level {res['mean_user_estimate']:+.2f} ms)")
        return EXIT_OK

    base = ScenarioConfig.from_dict(data.get("scenario", {}))
    overrides = dict((data.get("setups") or {}).get(args.setup, {}))
    cfg, sweep, values = setup_plan(args.setup, base, overrides)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.iterations is not None:
        cfg = replace(cfg, n_iterations=args.iterations)
    if args.n_users is not None:
        cfg = replace(cfg, n_users=args.n_users)
    results = run_sweep(cfg, sweep, values, n_jobs=args.jobs)
    rows = sweep_rows(results)
    csv_path = out_dir / f"setup_{args.setup}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in SWEEP_COLUMNS])
    summary = {
        "setup": args.setup,
        "sweep": sweep,
        "values": list(values),
        "config": cfg.to_dict(),
        "points": [{"alpha1": r.alpha1, "true_ate": r.true_ate, "realized_delta_miss": r.realized_delta_miss,
                    "target_delta_miss": r.config["target_delta_miss"],
                    "methods": {m: {k: v for k, v in vars(s).items() if k not in ("estimates", "p_values")}
                                for m, s in r.methods.items()}}
                   for r in results],
    }
    (out_dir / f"setup_{args.setup}_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for row in rows:
        print(f"setup {args.setup} delta_miss={row['delta_miss_target']} true_ate={row['true_ate']:.3f} "
              f"{row['method']:>10s}: mean={row['mean_estimate']:+.3f} fcr={row['fcr']:.2f} "
              f"fpr={row['fpr']:.2f} fnr={row['fnr']:.2f}")
    print(f"wrote {csv_path}")
    return EXIT_OK


def _add_event_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--events", required=True, help="events file (CSV or JSONL)")
    p.add_argument("--format", choices=("csv", "jsonl"), help="events format (default: from extension)")
    p.add_argument("--assignments", required=True, help="assignments CSV: user_id,bucket")
    p.add_argument("--metric", action="append", help="metric to analyse (repeatable; default: all)")
    p.add_argument("--experiment-start", type=int, help="experiment start, epoch ms")
    p.add_argument("--experiment-end", type=int, help="experiment end (exclusive), epoch ms")
    p.add_argument("--expected-ratio", type=float, default=0.5, help="designed treatment share")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="perfab", description="Performance metrics in A/B experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="event/user-level effects, SRM check and bias correction")
    _add_event_args(a)
    a.add_argument("--devices", required=True, help="device map CSV: user_id,device_model")
    a.add_argument("--pre-events", help="separate pre-period events file")
    a.add_argument("--pre-window-days", type=float, default=7.0)
    a.add_argument("--quantile", type=_quantile_arg, default=0.5, help="quantile level or p50/p75/p90")
    a.add_argument("--alert-threshold", type=float, default=0.001)
    a.add_argument("--alpha", type=float, default=0.05, help="significance level for conclusions")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--boot", type=int, default=1000, help="bootstrap replicates for event level")
    a.add_argument("--force-correct", action="store_true", help="run corrections without an SRM alert")
    a.add_argument("--device-threshold", type=int, default=10_000)
    a.add_argument("--min-donors", type=int, default=5)
    a.add_argument("--min-events", type=int, help="few-event diagnostic threshold")
    a.add_argument("--json-out", help="write the JSON report here")
    a.add_argument("--csv-out", help="write one CSV row per (metric, level, method)")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("srm", help="self-selection SRM check")
    _add_event_args(s)
    s.add_argument("--threshold", "--alert-threshold", dest="threshold", type=float, default=0.001)
    s.set_defaults(func=cmd_srm)

    m = sub.add_parser("simulate", help="Monte Carlo setups A, B, C or the divergence scenario")
    m.add_argument("--config", help="YAML or JSON config with scenario/setups/divergence sections")
    m.add_argument("--setup", required=True, help=f"one of {', '.join(SETUP_NAMES)}")
    m.add_argument("--out", required=True, help="output directory")
    m.add_argument("--iterations", type=int, help="override iterations (repeats for divergence)")
    m.add_argument("--n-users", type=int)
    m.add_argument("--seed", type=int)
    m.add_argument("--jobs", type=int, default=1)
    m.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, IngestError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
