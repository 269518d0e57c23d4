"""Command-line entry point: ``nodsim run|sweep|verify|figures``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import ledger
from .experiments import write_figures
from .lifecycle import write_event_log
from .metrics import EmptyTable, emit_csv
from .sim import FIELD_NAMES, ConfigInvalid, UnknownAxis, _parse_value, load_config, run_simulation, sweep

log = logging.getLogger("nodsim")

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2


def _int_list(text: str) -> list[int]:
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",") if x.strip()]


def _seed_list(text: str) -> list[int]:
    # a bare count means seeds 0..count-1
    if "," not in text and ".." not in text:
        return list(range(int(text)))
    return _int_list(text)


def _write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    res = run_simulation(cfg)
    out = Path(args.out)
    _write(out, emit_csv({(None, cfg.seed): res.report}))
    chain_path = Path(args.chain) if args.chain else out.with_suffix(".chain.ndjson")
    events_path = Path(args.events) if args.events else out.with_suffix(".events.csv")
    with open(chain_path, "w", encoding="ascii", newline="\n") as fp:
        ledger.export_chain(res.chain, fp)
    with open(events_path, "w", encoding="ascii", newline="\n") as fp:
        write_event_log(res.events, res.transfers, fp)
    log.info("wrote %s, %s, %s", out, chain_path, events_path)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.axis not in FIELD_NAMES or args.axis == "seed":
        raise UnknownAxis(args.axis)
    values = [_parse_value(args.axis, v) for v in args.values.split(";" if ";" in args.values else ",")]
    table = sweep(cfg, args.axis, values, _seed_list(args.seeds), workers=args.workers)
    _write(Path(args.out), emit_csv(table))
    return EXIT_OK


def cmd_verify(args) -> int:
    data = Path(args.chain).read_bytes()
    report = ledger.verify_export(data)
    if not report:
        print(f"chain invalid: {report}", file=sys.stderr)
        return EXIT_VERIFY
    blocks = data.count(b"\n")
    print(f"chain ok: {blocks} blocks")
    return EXIT_OK


def cmd_figures(args) -> int:
    cfg = load_config(args.config)
    for path in write_figures(cfg, args.out, _seed_list(args.seeds), workers=args.workers):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nodsim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one run; writes metrics CSV, chain export and event log")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--chain", help="chain export path (default: OUT with .chain.ndjson)")
    p.add_argument("--events", help="event log path (default: OUT with .events.csv)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="one parameter against a list of seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, help="SimConfig field name")
    p.add_argument("--values", required=True, help="comma separated (use ';' for range-valued fields)")
    p.add_argument("--seeds", required=True, help="count N (seeds 0..N-1), list '1,2,3', or range 'A..B'")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="check an exported chain")
    p.add_argument("--chain", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("figures", help="the four canonical studies, one CSV each")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", default="30")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_figures)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigInvalid, UnknownAxis, EmptyTable) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
