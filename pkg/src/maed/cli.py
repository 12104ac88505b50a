"""Command-line entry point: ``python3 -m maed <subcommand>``.

Exit codes: 0 success, 1 usage or config error, 2 failed assertion, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .channel import JammerKind
from .harness import (
    RECEIVERS,
    AuditError,
    ConfigError,
    SweepConfig,
    dump_lut,
    run_cycle_audit,
    run_sweep,
    tune_step_schedule,
)

EXIT_OK, EXIT_USAGE, EXIT_ASSERT, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="maed", description="MAED jammer-resilient SIMO detection: sweeps, cycle audit, tuning.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", help="JSON SweepConfig (defaults to the shipped config)")
        sp.add_argument("--seed", type=_u64, help="override master_seed")
        sp.add_argument("--out", help=out_help)

    sw = sub.add_parser("sweep", help="BER Monte Carlo over receivers x jammers x SNR")
    common(sw, "CSV output path (a .json sidecar is written next to it)")
    sw.add_argument("--workers", type=int, help="worker processes")
    sw.add_argument("--receiver", action="append", choices=RECEIVERS, help="restrict receivers (repeatable)")
    sw.add_argument("--jammer", action="append", choices=[k.value for k in JammerKind],
                    help="restrict jammer kinds (repeatable)")
    sw.add_argument("--snr", type=float, action="append", help="restrict SNR points in dB (repeatable)")
    sw.add_argument("--trials", type=int, help="override trials_per_point")

    ca = sub.add_parser("cycle-audit", help="run the PE-array emulator and check cycle counts")
    common(ca, "write the report JSON here instead of stdout")
    ca.add_argument("--t-max", type=int, help="override t_max")

    tt = sub.add_parser("tune-tau", help="grid search of the power-of-two step schedule")
    common(tt, "write a config with the tuned schedule here")
    tt.add_argument("--jammer", action="append", choices=[k.value for k in JammerKind],
                    help="tune on these jammer kinds only (repeatable)")
    tt.add_argument("--snr", type=float, help="tuning SNR in dB")
    tt.add_argument("--trials", type=int, help="blocks per jammer")
    tt.add_argument("--report", help="write the evaluation table JSON here")

    dl = sub.add_parser("dump-lut", help="hex dump of a reciprocal LUT, one entry per line")
    common(dl, "output file (stdout if omitted)")
    dl.add_argument("--which", choices=("s", "j"), default="s", help="||s||^2 or ||j||^2 table")
    return p


def _load_config(args) -> SweepConfig:
    try:
        cfg = SweepConfig.load(args.config) if args.config else SweepConfig.default()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    if args.seed is not None:
        cfg = cfg.replace(master_seed=args.seed)
    return cfg


def _emit(text: str, path: str | None):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    changes = {}
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.out:
        changes["output_path"] = args.out
    if args.receiver:
        changes["receivers"] = list(dict.fromkeys(args.receiver))
    if args.jammer:
        keep = [j for j in cfg.jammers if j.kind.value in args.jammer]
        if not keep:
            raise ConfigError("no configured jammer matches --jammer")
        changes["jammers"] = keep
    if args.snr:
        changes["snr_grid_db"] = list(args.snr)
    if args.trials is not None:
        changes["trials_per_point"] = args.trials
    cfg = cfg.replace(**changes)
    records = run_sweep(cfg)
    for r in records:
        print(f"{r.receiver:<11} {r.jammer_kind:<12} snr={r.snr_db:5.1f} dB  ber={r.ber:.3e}  "
              f"ci=[{r.ci_lo:.3e}, {r.ci_hi:.3e}]")
    print(f"wrote {cfg.output_path}")
    return EXIT_OK


def cmd_cycle_audit(args) -> int:
    cfg = _load_config(args)
    if args.t_max is not None:
        cfg = cfg.replace(t_max=args.t_max)
    report = run_cycle_audit(cfg)
    _emit(json.dumps(report, indent=2) + "\n", args.out)
    if report["failures"]:
        for f in report["failures"]:
            print(f"audit: {f}", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


def cmd_tune_tau(args) -> int:
    cfg = _load_config(args)
    tc = cfg.tuning
    if args.jammer:
        tc.jammers = [j for j in cfg.jammers if j.kind.value in args.jammer]
    if args.snr is not None:
        tc.snr_db = args.snr
    if args.trials is not None:
        tc.trials_per_jammer = args.trials
    result = tune_step_schedule(cfg)
    print("tau exponents:", " ".join(str(e) for e in result.schedule.tau_exponents))
    if args.report:
        _emit(json.dumps(result.to_dict(), indent=2) + "\n", args.report)
    if args.out:
        _emit(json.dumps(cfg.replace(schedule=result.schedule).to_dict(), indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_dump_lut(args) -> int:
    cfg = _load_config(args)
    _emit("\n".join(dump_lut(cfg.profile, args.which)) + "\n", args.out)
    return EXIT_OK


COMMANDS = {"sweep": cmd_sweep, "cycle-audit": cmd_cycle_audit, "tune-tau": cmd_tune_tau, "dump-lut": cmd_dump_lut}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AuditError as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AssertionError as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT


if __name__ == "__main__":
    sys.exit(main())
