"""Command-line entry point: ``invlab {roundtrip,bench,stats,dump-schedule}``.

Flags override the matching keys of ``--config``. Exit status is 0 on
success, 2 for configuration errors and 3 when an inversion diverges or a
trial fails.
"""

import argparse
import json
import sys

from .config import config_from_dict
from .dynamics import dump_trajectory
from .errors import ConfigError, DivergenceError, InvlabError, NoConvergence
from .harness import emit_csv, run_bench, run_roundtrip, run_stats, trace_trial
from .schedule import KINDS, build_schedule

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--trials", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--N", type=int, dest="N", help="number of grid steps")
    p.add_argument("--offset", type=int)
    p.add_argument("--schedule", choices=KINDS, dest="schedule_kind")
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)
    p.add_argument("--model", choices=("gaussian", "gmm"))
    p.add_argument("--variance", type=float, help="data variance of the gaussian model")
    p.add_argument("--gmm-file")
    p.add_argument("--K", type=int, dest="K")
    p.add_argument("--gamma", type=float, help="injected error variance")
    p.add_argument("--rho", type=float, help="lag-one correlation of injected errors")
    p.add_argument("--no-error", action="store_true", help="drop any error block from the config")


def build_parser():
    parser = argparse.ArgumentParser(prog="invlab", description="Diffusion inversion experiments on analytic models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("roundtrip", help="invert, denoise back and score the reconstruction")
    _common(p)
    p.add_argument("--methods", help="comma-separated method list, e.g. ddim,ife,'fp:k=2'")
    p.add_argument("--csv")
    p.add_argument("--json", help="write the per-method summary")
    p.add_argument("--dump-trajectory", dest="trajectory", help="JSON-lines inversion trace of trial 0")

    p = sub.add_parser("bench", help="IFE against fixed-point inversion with extra iterations")
    _common(p)
    p.add_argument("--methods")
    p.add_argument("--extra-iters", help="comma-separated list, default 0,1,2,3,4")
    p.add_argument("--csv", help="per-trial rows")
    p.add_argument("--summary-csv", help="one aggregate row per method")

    p = sub.add_parser("stats", help="estimation-error statistics under injected errors")
    _common(p)
    p.add_argument("--bins", type=int)
    p.add_argument("--estimators", help="comma-separated subset of ddim-prev,ife,no-approx")
    p.add_argument("--json")
    p.add_argument("--hist-prefix", dest="histograms")

    p = sub.add_parser("dump-schedule", help="print a noise schedule as JSON")
    p.add_argument("--config")
    p.add_argument("--schedule", choices=KINDS, dest="schedule_kind")
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)
    p.add_argument("--out", help="write to a file instead of stdout")
    return parser


def _load(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    return obj


def _csv_list(text):
    return [x.strip() for x in text.split(",") if x.strip()]


def _set(obj, path, value):
    if value is None:
        return
    *head, last = path
    for key in head:
        if obj.get(key) is None:
            obj[key] = {}
        obj = obj[key]
    obj[last] = value


def merged_config(args):
    """Config dict from ``--config`` with command-line overrides applied."""
    obj = _load(args.config)
    a = vars(args)
    for key in ("trials", "dim", "seed"):
        _set(obj, [key], a.get(key))
    _set(obj, ["grid", "N"], a.get("N"))
    _set(obj, ["grid", "offset"], a.get("offset"))
    _set(obj, ["schedule", "kind"], a.get("schedule_kind"))
    _set(obj, ["schedule", "T"], a.get("T"))
    _set(obj, ["schedule", "params", "beta_start"], a.get("beta_start"))
    _set(obj, ["schedule", "params", "beta_end"], a.get("beta_end"))
    _set(obj, ["model", "kind"], a.get("model"))
    _set(obj, ["model", "variance"], a.get("variance"))
    if a.get("gmm_file") is not None:
        _set(obj, ["model", "kind"], "gmm")
        _set(obj, ["model", "file"], a["gmm_file"])
    _set(obj, ["model", "K"], a.get("K"))
    if a.get("no_error"):
        obj["error"] = None
    _set(obj, ["error", "gamma"], a.get("gamma"))
    _set(obj, ["error", "rho"], a.get("rho"))
    if obj.get("error") is not None and "gamma" not in obj["error"] and "rho" in obj["error"]:
        obj["error"]["gamma"] = 0.01
    if a.get("methods"):
        obj["methods"] = _csv_list(a["methods"])
    if a.get("extra_iters"):
        try:
            obj["extra_iters"] = [int(x) for x in _csv_list(a["extra_iters"])]
        except ValueError:
            raise ConfigError("extra iterations must be integers", "extra_iters") from None
    _set(obj, ["stats", "bins"], a.get("bins"))
    if a.get("estimators"):
        _set(obj, ["stats", "estimators"], _csv_list(a["estimators"]))
    for key in ("csv", "json", "summary_csv", "trajectory", "histograms"):
        _set(obj, ["output", key], a.get(key))
    if args.command == "dump-schedule":
        obj.setdefault("trials", 1)
    return obj


def _report_failures(failures):
    for r in failures[:10]:
        print(f"trial {r.trial} ({r.method}) failed: {r.error}", file=sys.stderr)
    if len(failures) > 10:
        print(f"... {len(failures) - 10} more failures", file=sys.stderr)


def cmd_roundtrip(cfg):
    report = run_roundtrip(cfg)
    if cfg.output.csv:
        emit_csv(report, cfg.output.csv)
    summary = report.summary()
    if cfg.output.json:
        with open(cfg.output.json, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
    if cfg.output.trajectory:
        dump_trajectory(trace_trial(cfg, report.methods[0]), cfg.output.trajectory)
    for m, row in summary.items():
        if row["ok"]:
            print(f"{m:>14s}  nfe={row['nfe_mean']:.0f}  mse={row['mse_mean']:.4e}  "
                  f"psnr={row['psnr_mean']:.2f} dB  ok={row['ok']}/{report.trials}")
        else:
            print(f"{m:>14s}  no successful trials")
    if report.failures:
        _report_failures(report.failures)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_bench(cfg):
    table = run_bench(cfg)
    if cfg.output.csv:
        emit_csv(table.report, cfg.output.csv)
    if cfg.output.summary_csv:
        table.write_csv(cfg.output.summary_csv)
    for r in table.rows:
        print(f"{r['method']:>14s}  nfe/step={r['nfe_per_step']:.3f}  mse={r['mse_mean']:.4e}  "
              f"psnr={r['psnr_mean']:.2f} dB  ife_wins={r['ife_wins']:.2f}")
    if table.report.failures:
        _report_failures(table.report.failures)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_stats(cfg):
    report = run_stats(cfg)
    if cfg.output.json:
        report.write_json(cfg.output.json)
    if cfg.output.histograms:
        report.write_histograms(cfg.output.histograms)
    for name, st in report.estimators.items():
        print(f"{name:>10s}  mean={st.mean.mean():+.3e}  var={st.var_pooled.mean():.4e}  "
              f"theory_var={st.theory_var.mean():.4e}")
    if "ife" in report.estimators and "no-approx" in report.estimators:
        ratio = report.variance_ratio()
        print(f"variance ratio ife/no-approx (steps >= 2): {ratio.mean():.4f}")
    return EXIT_OK


def cmd_dump_schedule(args):
    obj = merged_config(args)
    cfg = config_from_dict(obj)
    sched = build_schedule(cfg.schedule.kind, cfg.schedule.T, cfg.schedule.params)
    text = sched.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        print(text)
    return EXIT_OK


COMMANDS = {"roundtrip": cmd_roundtrip, "bench": cmd_bench, "stats": cmd_stats}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "dump-schedule":
            return cmd_dump_schedule(args)
        cfg = config_from_dict(merged_config(args))
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NoConvergence) as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except InvlabError as exc:
        if isinstance(exc, ValueError):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
