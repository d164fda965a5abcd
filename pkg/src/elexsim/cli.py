"""Command-line front end: run a netlist or built-in example and write the
waveforms plus an event/warning/statistics sidecar as CSV."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import load_netlist
from .circuits import EXAMPLE_NAMES, example
from .engine import SolverConfig, SolverError, run
from .netlist import NetlistError, parse_value, validate_circuit

log = logging.getLogger("elexsim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _si(text: str) -> float:
    try:
        return parse_value(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def build_parser() -> _Parser:
    p = _Parser(prog="elexsim", description=__doc__)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--example", choices=EXAMPLE_NAMES,
                     help="run a built-in example system")
    src.add_argument("--netlist", type=Path, help="netlist file to simulate")
    p.add_argument("--method", choices=("fe", "rkf"), default=None,
                   help="integration method (default: rkf, or the example's)")
    p.add_argument("--tmax", type=_si, default=None, help="end time (SI suffixes ok)")
    p.add_argument("--h", type=_si, default=None, help="fixed step for FE")
    p.add_argument("--hmin", type=_si, default=None, help="minimum RKF step")
    p.add_argument("--hmax", type=_si, default=None, help="maximum RKF step")
    p.add_argument("--tol", type=_si, default=None,
                   help="absolute per-state truncation-error tolerance (RKF)")
    p.add_argument("--event-dt", type=_si, default=None,
                   help="turn-off bisection bracket target width")
    p.add_argument("--relax-kmax", type=int, default=None,
                   help="off-state relaxation sweep length (enables relaxation)")
    p.add_argument("--signals", default=None,
                   help="comma-separated column selection for the CSV")
    p.add_argument("-o", "--out", required=True,
                   help="output stem; writes <out>.csv and <out>.events.csv")
    p.add_argument("--no-crossover-planner", action="store_true",
                   help="disable comparator cross-over time-point scheduling")
    p.add_argument("--precision", type=int, default=17,
                   help="significant digits in the CSV (default 17, round-trip exact)")
    return p


def _configure(args) -> tuple:
    if args.example:
        ex = example(args.example)
        circuit, controls, cfg, method = ex.circuit, ex.controls, ex.cfg, ex.method
    else:
        try:
            text = args.netlist.read_text()
        except OSError as exc:
            raise UsageError(f"cannot read netlist: {exc}") from None
        circuit, controls = load_netlist(text)
        cfg = SolverConfig(t_end=0.0)
        method = "rkf"

    if args.method:
        method = args.method
    if args.tmax is not None:
        cfg.t_end = args.tmax
    if args.h is not None:
        cfg.h_init = args.h
    if args.hmin is not None:
        cfg.h_min = args.hmin
    if args.hmax is not None:
        cfg.h_max = args.hmax
    if args.tol is not None:
        cfg.lte_tol = args.tol
    if args.event_dt is not None:
        cfg.event_dt = args.event_dt
    if args.relax_kmax is not None:
        cfg.relaxation = True
        cfg.relaxation_kmax = args.relax_kmax
    if args.no_crossover_planner:
        cfg.crossover_planner = False

    if method == "fe" and args.h is None and (args.example is None or cfg.h_init is None):
        raise UsageError("the FE method requires --h")
    if method == "rkf" and args.tol is None and args.example is None:
        raise UsageError("the RKF method requires --tol (or use --example)")
    if cfg.t_end <= 0 and args.tmax is None:
        raise UsageError("--tmax is required")
    return circuit, controls, cfg, method


def _fmt(value: float, precision: int) -> str:
    return f"{value:.{precision}g}"


def write_waveforms(path: Path, result, columns: list[str], precision: int) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("t," + ",".join(columns) + "\n")
        data = [result.signal(c) for c in columns]
        for i, t in enumerate(result.t):
            row = [_fmt(t, precision)]
            row.extend(_fmt(col[i], precision) for col in data)
            fh.write(",".join(row) + "\n")


def write_events(path: Path, result, precision: int) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("record,kind,t_before,t_after,name,message\n")

        def esc(text: str) -> str:
            return '"' + text.replace('"', '""') + '"'

        for ev in result.events:
            fh.write(
                f"event,{ev.kind},{_fmt(ev.t_before, precision)},"
                f"{_fmt(ev.t_after, precision)},{ev.element},{esc(ev.detail)}\n"
            )
        for w in result.warnings:
            fh.write(f"warning,{w.kind},{_fmt(w.t, precision)},,,{esc(w.message)}\n")
        for key, value in result.stats.as_dict().items():
            fh.write(f"stat,{key},,,,{value}\n")


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("ELEXSIM_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        circuit, controls, cfg, method = _configure(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"run '{parser.prog} --help' for usage", file=sys.stderr)
        return 1

    for note in validate_circuit(circuit):
        log.warning("netlist: %s", note)

    try:
        result = run(circuit, cfg, method, controls)
    except (SolverError, NetlistError, ValueError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 2

    columns = result.column_names()
    if args.signals:
        wanted = [s.strip() for s in args.signals.split(",") if s.strip()]
        unknown = [s for s in wanted if s not in columns]
        if unknown:
            print(f"error: unknown signal(s): {', '.join(unknown)}", file=sys.stderr)
            return 1
        columns = wanted

    wave_path = Path(str(args.out) + ".csv")
    events_path = Path(str(args.out) + ".events.csv")
    write_waveforms(wave_path, result, columns, args.precision)
    write_events(events_path, result, args.precision)
    log.info(
        "wrote %s (%d points) and %s (%d events, %d warnings)",
        wave_path, len(result.t), events_path,
        len(result.events), len(result.warnings),
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
