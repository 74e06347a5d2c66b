"""Command line front end.

Subcommands: simulate (one closed-loop run), gradient-map (loss landscape
classification), bench (solver and learner timings), validate-config.
Exit codes: 0 success, 1 configuration error, 2 runtime failure.  The output
directory resolves as --out, then $ACIMPC_OUT_DIR, then the config's out_dir,
then a default under runs/.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import yaml

from . import report
from .harness import (
    ConfigError,
    bench,
    config_from_dict,
    gradient_region_map,
    run_closed_loop,
)


class _Parser(argparse.ArgumentParser):
    # argument errors are configuration errors; keep them on exit code 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit int")
    return value


def _load_doc(path_str: str) -> dict:
    path = Path(path_str)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read --config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"--config {path} is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"--config {path} must contain a mapping")
    return doc


def _config(args):
    doc = _load_doc(args.config)
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "no_adapt", False):
        doc["adaptation"] = False
    if getattr(args, "mode", None):
        doc["mode"] = args.mode
    if getattr(args, "duration", None) is not None:
        doc["duration_s"] = args.duration
    return config_from_dict(doc)


def _out_dir(args, cfg_out: str | None, default: str) -> Path:
    if args.out:
        return Path(args.out)
    env = os.environ.get("ACIMPC_OUT_DIR")
    if env:
        return Path(env)
    if cfg_out:
        return Path(cfg_out)
    return Path(default)


def _cmd_simulate(args) -> int:
    cfg = _config(args)
    result = run_closed_loop(cfg)
    out = _out_dir(args, cfg.out_dir, f"runs/{cfg.experiment}")
    paths = report.write_run_report(out, result)
    s = result.summary
    print(
        f"{cfg.experiment}: success={s['success']} steps={s['steps']} "
        f"updates={s['updates']} final_residual={s['final_residual']}"
    )
    for p in paths:
        print(f"  wrote {p}")
    return 0


def _cmd_gradient_map(args) -> int:
    cfg = _config(args)
    rows = gradient_region_map(cfg)
    out = _out_dir(args, cfg.out_dir, "runs/gradient_map")
    paths = report.write_map_report(out, rows)
    zero = sum(1 for r in rows if r["grad_norm"] == 0.0)
    print(f"gradient map: {len(rows)} cells, {zero} with exactly zero gradient")
    for p in paths:
        print(f"  wrote {p}")
    return 0


def _cmd_bench(args) -> int:
    cfg = _config(args)
    rep = bench(cfg, calls=args.calls)
    out = _out_dir(args, cfg.out_dir, f"runs/bench_{cfg.experiment}")
    paths = report.write_bench_report(out, rep)
    for name in ("adapt_ms", "c3_ms"):
        stats = rep[name]
        print(f"{name}: p50={stats['p50']:.3f} p95={stats['p95']:.3f}")
    print(f"targets_met: {rep['targets_met']}")
    for p in paths:
        print(f"  wrote {p}")
    # the report is the contract; missed timing targets are not a failure
    return 0


def _cmd_validate_config(args) -> int:
    cfg = config_from_dict(_load_doc(args.config))
    print(
        f"OK: {cfg.experiment}, {cfg.duration_s:g} s at {cfg.control_rate_hz:g} Hz, "
        f"adaptation={'on' if cfg.adaptation else 'off'}"
    )
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="acimpc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", required=True, help="experiment config (YAML)")
        if out:
            p.add_argument("--out", help="output directory")

    p = sub.add_parser("simulate", help="run one closed-loop experiment")
    common(p)
    p.add_argument("--seed", type=_u64, help="override the config seed")
    p.add_argument("--no-adapt", action="store_true", help="freeze the residual at zero")
    p.add_argument("--mode", choices=("deterministic", "realtime"))
    p.add_argument("--duration", type=float, help="override duration_s")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("gradient-map", help="classify the one-step loss gradient")
    common(p)
    p.set_defaults(func=_cmd_gradient_map)

    p = sub.add_parser("bench", help="time adapt_update and c3_solve")
    common(p)
    p.add_argument("--seed", type=_u64, help="override the config seed")
    p.add_argument("--calls", type=int, default=1000, help="invocations per timer")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("validate-config", help="parse and validate a config")
    common(p, out=False)
    p.set_defaults(func=_cmd_validate_config)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
