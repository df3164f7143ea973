"""Command-line entry point: ``pdsim run|sweep|compare|gen-trace|audit|presets``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from pdsim.audit import audit_budget, audit_controller, audit_time_order
from pdsim.errors import PdsimError
from pdsim.experiments import (
    PRESETS,
    compare,
    compare_csv,
    load_config,
    run,
    sweep,
    sweep_rows_csv,
)
from pdsim.workload import build_workload, write_trace

log = logging.getLogger("pdsim")


def _floats(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("list must be non-empty")
    return values


def _common(p: argparse.ArgumentParser, multi_preset: bool = False) -> None:
    p.add_argument("--config", type=Path, action="append" if multi_preset else None,
                   help="JSON experiment config")
    p.add_argument("--preset", action="append" if multi_preset else None, choices=sorted(PRESETS),
                   help="named configuration preset")
    p.add_argument("--qps", type=_floats, help="QPS/GPU value(s), comma separated")
    p.add_argument("--slo-scale", type=_floats, help="SLO scale factor(s), comma separated")
    p.add_argument("--repeats", type=int, help="runs per point, seeds base+0..N-1")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--trace", type=Path, help="replay a CSV/JSONL trace instead of generating one")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--parallel", type=int, help="worker processes for sweeps")


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    o: dict[str, Any] = {}
    sweep_o: dict[str, Any] = {}
    if args.qps is not None:
        sweep_o["qps"] = args.qps
    if args.slo_scale is not None:
        sweep_o["slo_scale"] = args.slo_scale
    if sweep_o:
        o["sweep"] = sweep_o
    if args.repeats is not None:
        o["repeats"] = args.repeats
    if args.seed is not None:
        o["seed"] = args.seed
        o["workload"] = {"seed": args.seed}
    if args.trace is not None:
        o.setdefault("workload", {}).update({"mode": "file-trace", "trace_path": str(args.trace.resolve())})
    if args.out is not None:
        o["out"] = str(args.out)
    if args.parallel is not None:
        o["parallel"] = args.parallel
    return o


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdsim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one simulation and write its artifacts")
    _common(p)
    p = sub.add_parser("sweep", help="sweep QPS/GPU and SLO scale")
    _common(p)
    p = sub.add_parser("compare", help="run several configs on one workload")
    _common(p, multi_preset=True)
    p = sub.add_parser("gen-trace", help="write the configured workload as a trace file")
    _common(p)
    p.add_argument("output", type=Path, help="trace file (.csv or .jsonl)")
    p = sub.add_parser("audit", help="check budget safety and controller discipline of an event trace")
    p.add_argument("events", type=Path)
    sub.add_parser("presets", help="list preset names")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.preset, _overrides(args))
    result, out = run(cfg)
    s = result.summary
    print(f"wrote {out}")
    print(f"attainment={s.attainment:.4f} goodput={s.goodput:.4f} req/s qps_per_watt={s.qps_per_watt:.6g}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.preset, _overrides(args))
    rows = sweep(cfg)
    sys.stdout.write(sweep_rows_csv(rows))
    print(f"wrote {cfg.out}", file=sys.stderr)
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    overrides = _overrides(args)
    paths = args.config or []
    if args.preset:
        # Presets layer over a single shared base config (e.g. the workload).
        if len(paths) > 1:
            print("pdsim: error: with --preset, give at most one --config as the shared base", file=sys.stderr)
            return 2
        base = paths[0] if paths else None
        configs = [load_config(base, p, overrides) for p in args.preset]
    else:
        configs = [load_config(c, None, overrides) for c in paths]
    out = args.out or Path("runs/compare")
    rows, winners = compare(configs, out)
    sys.stdout.write(compare_csv(rows))
    for metric, name in winners.items():
        print(f"winner {metric}: {name}")
    return 0


def _cmd_gen_trace(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.preset, _overrides(args))
    point = cfg.point(cfg.qps[0])
    workload = build_workload(point.workload)
    write_trace(workload.requests, args.output)
    print(f"wrote {len(workload.requests)} requests to {args.output}")
    return 0


def _cmd_audit(args: argparse.Namespace) -> int:
    trace = [json.loads(line) for line in args.events.read_text().splitlines() if line.strip()]
    config_path = args.events.parent / "config.json"
    cooldown = 4.0
    kw: dict[str, Any] = {}
    if config_path.exists():
        ctl = json.loads(config_path.read_text())["controller"]
        cooldown = ctl["cooldown"]
        kw = {"min_p": ctl["min_p"], "max_p": ctl["max_p"], "decode_ceiling": ctl["decode_dynamic_ceiling"]}
    problems = audit_time_order(trace) + audit_budget(trace) + audit_controller(trace, cooldown, **kw)
    for line in problems:
        print(line)
    print(f"{len(trace)} events, {len(problems)} violations")
    return 1 if problems else 0


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "run": _cmd_run,
        "sweep": _cmd_sweep,
        "compare": _cmd_compare,
        "gen-trace": _cmd_gen_trace,
        "audit": _cmd_audit,
    }
    if args.command == "presets":
        for name in sorted(PRESETS):
            print(name)
        return 0
    try:
        return handlers[args.command](args)
    except (PdsimError, OSError) as exc:
        print(f"pdsim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
