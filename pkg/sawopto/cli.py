from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from sawopto import formats
from sawopto.config import RunConfig
from sawopto.errors import SawoptoError
from sawopto.pipeline import RUNNERS
from sawopto.report import format_report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--report", help="write the report here instead of stdout")
    common.add_argument("--curve", help="write a plot-ready CSV curve here")
    common.add_argument("--seed", type=int, help="random seed (overrides config and SAWOPTO_SEED)")
    common.add_argument("--threads", type=int, help="worker count (overrides config and SAWOPTO_THREADS)")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true")
    verbosity.add_argument("--quiet", action="store_true")
    return common


def _emitter_options(p: argparse.ArgumentParser, omega0_required: bool = True) -> None:
    p.add_argument("--omega0", type=float, required=omega0_required, help="emitter centre (meV)")
    p.add_argument("--gamma", type=float, default=0.05, help="Lorentzian half-width (meV)")
    p.add_argument("--delta-e", type=float, default=0.0, help="modulation amplitude (meV)")
    p.add_argument("--f-rf", type=float, default=3.0e8, help="SAW drive frequency (Hz)")
    p.add_argument("--phase0", type=float, default=0.0, help="modulation phase (rad)")
    p.add_argument("--amplitude", type=float, default=1.0, help="peak counts of the unmodulated line")


def _filter_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--filter", required=True, help="passband low,high in --filter-unit")
    p.add_argument(
        "--filter-unit", type=str.lower, choices=("mev", "nm"), help="unit of --filter edges (overrides filter_unit)"
    )


def _grid_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--start", type=float, required=True)
    p.add_argument("--stop", type=float, required=True)
    p.add_argument("--points", type=int, default=1001)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sawopto", description="SAW cavity optomechanics simulation and fitting.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    common = _common()

    p = sub.add_parser("fit-s11", parents=[common], help="fit resonator modes to a .s1p reflection")
    p.add_argument("--input", required=True)
    p.add_argument("--guess", help="comma-separated mode frequencies (Hz)")
    p.add_argument("--band", help="mirror stopband low,high (Hz)")

    p = sub.add_parser("sim-s11", parents=[common], help="synthesize a reflection spectrum")
    p.add_argument("--mode", action="append", help="F,QI,QE; repeat for each mode")
    _grid_options(p)
    p.add_argument("--noise", type=float, default=0.0, help="complex Gaussian noise sigma")
    p.add_argument("--output", required=True)

    p = sub.add_parser("sim-spectrum", parents=[common], help="time-averaged modulated PL spectrum")
    _emitter_options(p)
    _grid_options(p)
    p.add_argument("--background", type=float, default=0.0)
    p.add_argument("--poisson", action="store_true", help="add Poisson counting noise")
    p.add_argument("--output", required=True)

    p = sub.add_parser("fit-spectrum", parents=[common], help="extract ΔE from a PL spectrum")
    _emitter_options(p, omega0_required=False)
    p.add_argument("--input", required=True)
    p.add_argument("--sweep-map", action="store_true", help="input is a drive-frequency sweep map")
    p.add_argument("--recenter", action="store_true", help="recenter each sweep-map frame")

    p = sub.add_parser("sim-strobe", parents=[common], help="Monte Carlo stroboscopic histogram")
    _emitter_options(p)
    _filter_options(p)
    p.add_argument("--output", required=True, help="histogram CSV")
    p.add_argument("--timetags", help="also write detected photons as time tags")

    p = sub.add_parser("fit-strobe", parents=[common], help="fit ΔE and phase to a folded histogram")
    _emitter_options(p)
    _filter_options(p)
    p.add_argument("--input", required=True)
    p.add_argument("--timetags-input", action="store_true", help="input holds raw time tags to fold")
    p.add_argument("--channel", type=int, default=0)

    p = sub.add_parser("g2", parents=[common], help="second-order correlation from time tags")
    p.add_argument("--input", required=True)
    p.add_argument("--channels", default="0,1")
    p.add_argument("--tau0", type=float, help="antibunching time guess (ps)")
    p.add_argument("--pulsed-period", type=float, help="excitation period (ps) for peak-area g2(0)")

    p = sub.add_parser("lifetime", parents=[common], help="fit an exponential decay")
    p.add_argument("--input", required=True)
    p.add_argument("--timetags-input", action="store_true", help="build the histogram from sync/signal tags")
    p.add_argument("--channels", default="0,1", help="sync,signal channels")
    p.add_argument("--bin-width", type=float, default=50.0, help="ps")
    p.add_argument("--bins", type=int, default=1000)

    p = sub.add_parser("power-sweep", parents=[common], help="ΔE against drive power")
    p.add_argument("--input", required=True)
    p.add_argument("--cut", default="auto", help="saturation cut in dBm, 'auto' or 'none'")

    p = sub.add_parser("strain", parents=[common], help="strain and energy-shift conversions")
    p.add_argument("--strain", type=float, help="strain (%%)")
    p.add_argument("--shift", type=float, help="energy shift (meV)")
    p.add_argument("--power", type=float, help="drive power (dBm)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(parser.format_usage())
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    if args.command is None:
        sys.stderr.write(parser.format_usage())
        return EXIT_USAGE

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("sawopto").setLevel(level)

    overrides = {"seed": args.seed, "threads": args.threads, "filter_unit": getattr(args, "filter_unit", None)}
    staged = formats.StagedOutputs()
    try:
        cfg = RunConfig.load(args.config, overrides=overrides)
        outcome = RUNNERS[args.command](args, cfg)
        for path, write in outcome.outputs:
            staged.stage(path, write)
        if outcome.curve is not None and args.curve:
            staged.stage(args.curve, lambda p: formats.emit_curve(outcome.curve, p))
        if outcome.report is not None and args.report:
            staged.stage(args.report, lambda p: formats.emit_report(outcome.report, p))
        staged.commit()
    except (SawoptoError, OSError) as exc:
        staged.discard()
        logger.error("%s failed: %s", args.command, exc)
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA
    if outcome.report is not None and not args.report:
        sys.stdout.write(format_report(outcome.report))
    return EXIT_OK
