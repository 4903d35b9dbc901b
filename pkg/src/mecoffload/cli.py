"""Command line entry point: ``mecoffload run | sweep | check``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from typing import Dict, List, Optional, Sequence

from .config import POLICY_KINDS, ConfigError, RunConfig, load_config
from .harness import emit_sweep_csv, run_experiment, sweep

log = logging.getLogger("mecoffload")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat YAML key/value file; flags below override it")
    g = p.add_argument_group("configuration keys (override the file)")
    for f in dataclasses.fields(RunConfig):
        g.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar="VALUE", default=None)


def _config_from(args: argparse.Namespace) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def parse_seeds(text: str) -> List[int]:
    """``"20"`` means seeds 0..19, ``"3-7"`` an inclusive range, ``"1,4,9"`` an explicit list."""
    text = text.strip()
    if "," in text:
        return [int(s) for s in text.split(",") if s.strip()]
    if "-" in text[1:]:
        lo, hi = text.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return list(range(int(text)))


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    start = time.perf_counter()
    res = run_experiment(cfg, csv_path=args.out, overwrite=args.overwrite, eval_csv_path=args.eval_out,
                         trace_path=args.trace, checkpoint_dir=args.checkpoint_dir)
    print(f"{len(res.rows)} episodes written to {args.out} ({time.perf_counter() - start:.1f}s)")
    if res.eval_rows:
        print(f"evaluation: drop_ratio={res.eval_drop_ratio:.6f} avg_delay_s={res.eval_avg_delay_s:.6f}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    unknown = [p for p in policies if p not in POLICY_KINDS]
    if unknown:
        raise ConfigError({"policies": f"unknown policies {unknown}"})
    rows = sweep(cfg, args.axis, [v.strip() for v in args.values.split(",")], parse_seeds(args.seeds), policies)
    emit_sweep_csv(rows, args.out, overwrite=args.overwrite)
    for r in rows:
        print(f"{r.axis}={r.value:g} {r.policy}: drop_ratio={r.drop_ratio:.6f} (se {r.drop_ratio_se:.6f}) "
              f"avg_delay_s={r.avg_delay_s:.6f}")
    return 0


def _cmd_check(args: argparse.Namespace) -> int:
    from .checks import run_all

    ok = True
    for res in run_all(args.instances):
        print(f"{'PASS' if res.passed else 'FAIL'}  {res.name}: {res.detail}")
        ok &= res.passed
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mecoffload", description="Deadline-aware MEC task offloading simulator")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for per-episode logs, -vv for debug")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one configuration and write per-episode metrics")
    _add_config_flags(run)
    run.add_argument("--out", required=True, help="metrics CSV path")
    run.add_argument("--eval-out", help="CSV for the greedy evaluation episodes of learning devices")
    run.add_argument("--trace", help="per-slot event trace CSV (last training episode)")
    run.add_argument("--checkpoint-dir", help="directory for per-device trainer checkpoints")
    run.add_argument("--overwrite", action="store_true", help="replace existing output files")
    run.set_defaults(func=_cmd_run)

    sw = sub.add_parser("sweep", help="vary one configuration key across a list of values")
    _add_config_flags(sw)
    sw.add_argument("--axis", required=True, help="configuration key to vary")
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.add_argument("--seeds", default="20", help="count, range a-b, or comma list (default 20)")
    sw.add_argument("--policies", default="no_offload,random,myopic", help="comma-separated policies")
    sw.add_argument("--out", required=True, help="sweep CSV path")
    sw.add_argument("--overwrite", action="store_true")
    sw.set_defaults(func=_cmd_sweep)

    ck = sub.add_parser("check", help="run the oracle and learning-stack self-checks")
    ck.add_argument("--instances", type=int, default=1000, help="randomized oracle instances")
    ck.set_defaults(func=_cmd_check)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (FileExistsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
