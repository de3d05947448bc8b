"""Command-line entry point: ``tccsim run|check|scenario|report``."""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import os
import sys
from typing import Dict, List, Optional, Sequence

from .bench import REPORT_FIELDS, WorkloadConfig, aggregate, rows_csv, summarize
from .oracle import check_log, verdicts_csv
from .scenarios import SCENARIOS, run_script
from .simnet import LINK_CLASSES, HistoryLog, SimConfig, simulate
from .timebase import ConfigError


def _parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def _int_list(raw: str) -> List[int]:
    return [int(x) for x in raw.replace(",", " ").split()]


def load_config(path: str):
    """Read a ``[sim]`` / ``[workload]`` INI file.

    Returns (SimConfig, WorkloadConfig, protocols, seeds).
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    sim_fields = {f.name for f in dataclasses.fields(SimConfig)} - {"workload", "latency", "protocol", "seed"}
    wl_fields = {f.name for f in dataclasses.fields(WorkloadConfig) if not f.name.startswith("_")}
    sim_kw: Dict = {}
    latency = dict(SimConfig().latency)
    protocols = ["CV", "OP", "AV", "CURE"]
    seeds = [0]
    if cp.has_section("sim"):
        for key, raw in cp.items("sim"):
            if key == "protocols":
                protocols = [p.strip() for p in raw.replace(",", " ").split()]
            elif key == "seeds":
                seeds = _int_list(raw)
            elif key.startswith("latency."):
                link = key.split(".", 1)[1]
                if link not in LINK_CLASSES:
                    raise ConfigError(f"unknown link class {link}")
                lo_hi = _int_list(raw.replace("-", " "))
                latency[link] = (lo_hi[0], lo_hi[-1])
            elif key == "placement":
                sim_kw[key] = {int(k): int(v) for k, v in (x.split(":") for x in raw.replace(",", " ").split())}
            elif key in sim_fields:
                sim_kw[key] = _parse_value(raw)
            else:
                raise ConfigError(f"unknown [sim] key {key}")
    wl_kw: Dict = {}
    if cp.has_section("workload"):
        for key, raw in cp.items("workload"):
            if key not in wl_fields:
                raise ConfigError(f"unknown [workload] key {key}")
            wl_kw[key] = _parse_value(raw)
    sim = SimConfig(latency=latency, **sim_kw)
    wl = WorkloadConfig(**wl_kw)
    if sim.max_txns is None and sim.duration is None:
        raise ConfigError("set max_txns or duration in [sim]")
    return sim, wl, protocols, seeds


def _write(path: Optional[str], text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _summary_line(name: str, res, sessions: bool) -> str:
    return (
        f"{name}: protocol={res.protocol} readsets={len(res.verdicts)} "
        f"contract_failures={res.contract_failures} invariant_violations={len(res.invariants.violations)} "
        f"unanswered={len(res.conservation)} ryw={res.ryw_violations} mr={res.mr_violations} "
        f"stale={res.delay.stale_fraction:.4f} -> {'PASS' if res.ok(sessions) else 'FAIL'}"
    )


def cmd_run(args) -> int:
    sim, wl, protocols, seeds = load_config(args.config)
    if args.protocols:
        protocols = args.protocols
    if args.seeds:
        seeds = args.seeds
    rows, failed = [], False
    sessions = sim.session_cache and sim.catchup
    for proto in protocols:
        for seed in seeds:
            cfg = dataclasses.replace(sim, protocol=proto, seed=seed, workload=wl,
                                      latency=dict(sim.latency))
            s = simulate(cfg)
            log = s.log_records
            if args.logs:
                os.makedirs(args.logs, exist_ok=True)
                log.write(os.path.join(args.logs, f"{cfg.protocol}-{seed}.jsonl"))
            res = check_log(log)
            ok = res.ok(sessions)
            failed |= not ok
            print(_summary_line(f"{cfg.protocol}/seed={seed}", res, sessions), file=sys.stderr)
            rows.append(summarize(log, cfg.protocol, seed, wl.warmup, s.drained))
    _write(args.out, rows_csv(rows))
    return 1 if failed else 0


def cmd_check(args) -> int:
    log = HistoryLog.load(args.log)
    res = check_log(log)
    header = log[0] if log and log[0]["kind"] == "config" else {}
    sessions = args.sessions or bool(header.get("session_cache") and header.get("catchup"))
    if args.verdicts:
        _write(args.verdicts, verdicts_csv(res.verdicts))
    for v in res.invariants.violations[:20]:
        print("invariant:", v, file=sys.stderr)
    for v in res.conservation[:20]:
        print("conservation:", v, file=sys.stderr)
    print(_summary_line(args.log, res, sessions))
    return 0 if res.ok(sessions) else 1


def cmd_scenario(args) -> int:
    overrides = {}
    if args.no_cache:
        overrides["session_cache"] = False
    log = run_script(args.name, args.protocol, **overrides)
    if args.log:
        log.write(args.log)
    res = check_log(log)
    _write(args.out, verdicts_csv(res.verdicts))
    sessions = not args.no_cache
    print(_summary_line(args.name, res, sessions), file=sys.stderr)
    return 0 if res.ok(sessions) else 1


def cmd_report(args) -> int:
    rows = []
    for path in args.csv:
        with open(path, newline="", encoding="utf-8") as fh:
            rows.extend(csv.DictReader(fh))
    _write(args.out, rows_csv(aggregate(rows), REPORT_FIELDS))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tccsim", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="run an experiment from a config file")
    p.add_argument("config")
    p.add_argument("--protocols", nargs="+")
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--out", default="-", help="report CSV path (default stdout)")
    p.add_argument("--logs", help="directory for per-run history logs")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("check", help="run the oracle over a saved history log")
    p.add_argument("log")
    p.add_argument("--verdicts", help="write per-transaction verdict CSV here ('-' for stdout)")
    p.add_argument("--sessions", action="store_true", help="fail on session-guarantee violations")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("scenario", help="run a scripted schedule")
    p.add_argument("name", choices=sorted(SCENARIOS), type=str.upper)
    p.add_argument("--protocol", default="OP")
    p.add_argument("--no-cache", action="store_true", help="disable the read-your-writes cache")
    p.add_argument("--log", help="write the history log here")
    p.add_argument("--out", default="-", help="verdict CSV path (default stdout)")
    p.set_defaults(fn=cmd_scenario)

    p = sub.add_parser("report", help="aggregate report CSVs per protocol")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", default="-")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
