"""Command-line front end: validate and run scenarios, compare with the radial baseline, emit wire vectors.

Exit codes: 0 success, 1 I/O error, 2 invalid input, 3 runtime invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .core import EnergyNetError
from .ep.vectors import vectors_bytes
from .ep.wire import canonical_dumps
from .sim.baseline import DemandMismatch, check_same_demand, run_baseline
from .sim.kernel import run
from .sim.scenario import InvalidScenario, load_scenario

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("energynet")


def _setup_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("ENERGYNET_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)


def _jsonl(rows) -> bytes:
    return b"".join(canonical_dumps(r) for r in rows)


def _write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def _invalid(exc: InvalidScenario, path) -> int:
    where = exc.path or "<root>"
    print(f"{path}: invalid scenario at {where}: {exc.message}", file=sys.stderr)
    return EXIT_INVALID


def cmd_validate(args) -> int:
    try:
        load_scenario(args.path)
    except OSError as exc:
        print(f"{args.path}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except InvalidScenario as exc:
        return _invalid(exc, args.path)
    print("OK")
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        sc = load_scenario(args.scenario)
    except OSError as exc:
        print(f"{args.scenario}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except InvalidScenario as exc:
        return _invalid(exc, args.scenario)
    try:
        res = run(sc, ticks=args.ticks, seed=args.seed)
    except EnergyNetError as exc:
        log.error("run aborted: %s: %s", type(exc).__name__, exc)
        print(f"invariant violation: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out)
    try:
        _write(out / "trace.jsonl", _jsonl(res.trace))
        _write(out / "metrics.json", canonical_dumps(res.metrics))
        _write(out / "ledger.json", canonical_dumps(res.ledger))
        _write(out / "telemetry.jsonl", _jsonl(res.telemetry))
    except OSError as exc:
        print(f"{out}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def compare(sc, base) -> dict:
    ticks = sc.ticks
    check_same_demand(sc, base, ticks)
    ours = run(sc).metrics
    _, theirs = run_baseline(base, ticks)
    return {
        "energynet": ours,
        "baseline": theirs,
        "delta": {
            "resilience_index": ours["resilience_index"] - theirs["resilience_index"],
            "peak_grid_import_w": ours["peak_grid_import_w"] - theirs["peak_grid_import_w"],
            "unserved_class0_j": ours["unserved_j"][0] - theirs["unserved_j"][0],
        },
    }


def cmd_compare(args) -> int:
    try:
        sc = load_scenario(args.scenario)
        base = load_scenario(args.baseline)
    except OSError as exc:
        print(f"{exc.filename}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except InvalidScenario as exc:
        return _invalid(exc, "scenario")
    if base.baseline is None:
        print(f"{args.baseline}: invalid scenario at baseline: no radial feeder defined", file=sys.stderr)
        return EXIT_INVALID
    try:
        result = compare(sc, base)
    except DemandMismatch as exc:
        print(f"DemandMismatch: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except EnergyNetError as exc:
        print(f"invariant violation: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        _write(Path(args.out) / "comparison.json", canonical_dumps(result))
    except OSError as exc:
        print(f"{args.out}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def cmd_vectors(args) -> int:
    data = vectors_bytes()
    path = Path(args.out)
    try:
        if args.check:
            if path.read_bytes() != data:
                print(f"{path}: differs from the regenerated vectors", file=sys.stderr)
                return EXIT_INVALID
            print("OK")
            return EXIT_OK
        _write(path, data)
    except OSError as exc:
        print(f"{path}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="energynet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("path")
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("simulate", help="run a scenario and write trace, metrics, ledger and telemetry")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ticks", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", help="run a scenario against its radial baseline")
    c.add_argument("--scenario", required=True)
    c.add_argument("--baseline", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)

    w = sub.add_parser("vectors", help="regenerate the golden wire vectors")
    w.add_argument("--out", required=True)
    w.add_argument("--check", action="store_true", help="compare with the file instead of writing it")
    w.set_defaults(func=cmd_vectors)
    return p


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
