"""Command-line entry point: ``railctl <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import harness
from .bus import BusConfig, write_trace_csv
from .link import CalibrationError, load_calibration
from .manager import Mode, control_path, load_request_script, write_status_csv
from .regulator import load_profile
from .settling import SettlingParams

log = logging.getLogger("railctl")


def _scl(text: str) -> int:
    text = text.lower().rstrip("hz")
    if text.endswith("k"):
        return int(float(text[:-1]) * 1e3)
    return int(float(text))


def _tag(speed: float, mode: str) -> str:
    return f"{speed:g}g_{mode}".replace(".", "p")


def cmd_transition(args) -> int:
    profile = load_profile(args.profile)
    kwargs = dict(
        lane=args.lane,
        path=control_path(args.path),
        bus=BusConfig(args.scl),
        settling=SettlingParams(args.window, args.band),
        mode=Mode(args.mode),
    )
    if args.sweep:
        results = harness.transition_sweep(profile, args.sweep, **kwargs)
    else:
        results = [harness.run_transition(
            harness.TransitionExperiment(from_voltage=args.from_v, to_voltage=args.to_v, **kwargs), profile)]
    failed = False
    for r in results:
        e = r.experiment
        stem = f"transition_{e.from_voltage:g}_to_{e.to_voltage:g}".replace(".", "p")
        harness.emit_csv(r.trace, args.out / f"{stem}.csv")
        meta = (f"lane = {e.lane}\nfrom_v = {e.from_voltage!r}\nto_v = {e.to_voltage!r}\n"
                f"control_path = {e.path.kind}\nscl_hz = {e.bus.scl_rate}\nupdate_mode = {e.mode.value}\n"
                f"timed_out = {str(r.timed_out).lower()}\n")
        (args.out / f"{stem}.report.txt").write_text(meta + r.report.as_text())
        shown = "absent" if r.settling_time is None else f"{r.settling_time * 1e3:.3f} ms"
        print(f"{e.from_voltage:.3f} V -> {e.to_voltage:.3f} V  settling {shown}"
              + ("  (TIMEOUT)" if r.timed_out else ""))
        failed |= r.timed_out
    return 1 if failed else 0


def cmd_intervals(args) -> int:
    profile = load_profile(args.profile)
    rows = harness.run_interval_matrix(profile, args.lane, args.samples)
    path = args.out / "intervals.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write("control_path,scl_hz,interval_s,reference_s\n")
        for r in rows:
            fh.write(f"{r.path},{r.scl_rate},{r.interval!r},{r.reference!r}\n")
    for r in rows:
        print(f"{r.path:9s} {r.scl_rate / 1e3:5.0f} kHz  {r.interval * 1e3:.3f} ms  (reported {r.reference * 1e3:.1f} ms)")
    return 0


def _sweep_jobs(args):
    if args.config:
        cfg = yaml.safe_load(Path(args.config).read_text())
        seed = cfg.get("seed", args.seed)
        start, stop = cfg.get("range_v", [1.0, 0.7])
        step = cfg.get("step_v", 0.001)
        path = control_path(cfg.get("control_path", "hardware"))
        scl = int(cfg.get("scl_hz", 400_000))
        jobs = [(float(run["speed_gbps"]), mode) for run in cfg["runs"] for mode in run["modes"]]
    else:
        seed, start, stop, step = args.seed, 1.0, 0.7, args.step
        path, scl = control_path(args.path), args.scl
        jobs = [(args.speed, mode) for mode in (args.mode or ["both-swept"])]
    if seed is None:
        raise SystemExit("a seed is required: pass --seed or set 'seed' in the config file")
    for speed, mode in jobs:
        yield harness.CaseStudySweep(speed, mode, start, stop, step, int(seed), path=path, bus=BusConfig(scl))


def cmd_case_study(args) -> int:
    profile = load_profile(args.profile)
    calibration = load_calibration(args.calibration)
    status = 0
    for sweep in _sweep_jobs(args):
        try:
            result = harness.run_case_study(sweep, calibration, profile)
        except (CalibrationError, harness.ExperimentError) as exc:
            print(f"{sweep.speed:g} Gbps {sweep.mode}: {exc}", file=sys.stderr)
            status = 1
            continue
        stem = "case_" + _tag(sweep.speed, sweep.mode)
        harness.emit_csv(result.points, args.out / f"{stem}.csv")
        report = harness.savings_report(result.points, sweep.start, "rx" if sweep.mode == "rx-swept" else "tx")
        result.metadata["savings"] = report.as_dict()
        harness.write_metadata(result.metadata, args.out / f"{stem}.meta.json")
        print(f"{sweep.speed:g} Gbps {sweep.mode}: {len(result.points)} points, "
              f"last zero-BER {report.boundary_voltage:.3f} V, saving {report.boundary_saving:.1%}")
    return status


def cmd_savings(args) -> int:
    if args.input:
        points = harness.read_sweep_csv(args.input)
    else:
        if args.seed is None:
            raise SystemExit("a seed is required: pass --seed")
        sweep = harness.CaseStudySweep(args.speed, args.mode, seed=args.seed)
        points = harness.run_case_study(sweep, load_calibration(args.calibration), load_profile(args.profile)).points
    report = harness.savings_report(points, args.baseline, args.side)
    out = args.out / "savings.json"
    harness.write_metadata(report.as_dict(), out)
    print(f"baseline {report.baseline_power:.4f} W @ {report.baseline_voltage:.3f} V ({report.side})")
    print(f"near-zero-BER boundary {report.boundary_voltage:.3f} V  {report.boundary_power:.4f} W  "
          f"saving {report.boundary_saving:.2%}")
    for t in report.thresholds:
        print(f"BER <= {t.threshold:.0e}: {t.voltage:.3f} V  {t.power:.4f} W  saving {t.saving:.2%}")
    return 0


def cmd_replay(args) -> int:
    profile = load_profile(args.profile)
    requests = load_request_script(args.script)
    stack = harness.build_stack(profile, control_path(args.path), BusConfig(args.scl), Mode(args.mode))
    statuses = [stack.manager.submit(r) for r in requests]
    args.out.mkdir(parents=True, exist_ok=True)
    write_status_csv(statuses, args.out / "status.csv")
    write_trace_csv(stack.engine.trace, args.out / "bus_trace.csv")
    bad = [s for s in statuses if not s.ok]
    print(f"{len(statuses)} requests, {len(stack.engine.trace)} transactions, {len(bad)} failed, "
          f"simulated {stack.engine.now * 1e3:.3f} ms")
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="railctl", description=__doc__)
    ap.add_argument("--profile", default=None, help="platform profile YAML (default: bundled kc705)")
    ap.add_argument("--calibration", default=None, help="link calibration YAML (default: kc705-gtx-paper)")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", type=Path, default=Path("out"))
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def bus_flags(p):
        p.add_argument("--path", default="hardware", help="hardware|software")
        p.add_argument("--scl", type=_scl, default=400_000, help="PMBus clock, e.g. 400k or 100k")

    p = sub.add_parser("transition", help="time voltage steps and detect settling")
    p.add_argument("--lane", type=int, default=harness.MGTAVCC_LANE)
    p.add_argument("--from", dest="from_v", type=float, default=1.0)
    p.add_argument("--to", dest="to_v", type=float, default=0.5)
    p.add_argument("--sweep", choices=["decrease", "increase"])
    p.add_argument("--window", type=int, default=5, help="settling window N (samples)")
    p.add_argument("--band", type=float, default=1.0, help="stability band x (percent)")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.MINIMAL.value)
    bus_flags(p)
    p.set_defaults(func=cmd_transition)

    p = sub.add_parser("intervals", help="readback interval per control path and clock rate")
    p.add_argument("--lane", type=int, default=harness.MGTAVCC_LANE)
    p.add_argument("--samples", type=int, default=50)
    p.set_defaults(func=cmd_intervals)

    p = sub.add_parser("case-study", help="undervolting sweep of the transceiver rail")
    p.add_argument("--config", help="YAML file with speeds, modes, range, step and seed")
    p.add_argument("--speed", type=float, default=10.0)
    p.add_argument("--mode", action="append", choices=["both-swept", "rx-swept", "tx-swept"])
    p.add_argument("--step", type=float, default=0.001)
    bus_flags(p)
    p.set_defaults(func=cmd_case_study)

    p = sub.add_parser("savings", help="BER-aware power savings of a sweep")
    p.add_argument("--input", help="sweep CSV from case-study (otherwise a sweep is run)")
    p.add_argument("--speed", type=float, default=10.0)
    p.add_argument("--mode", default="both-swept")
    p.add_argument("--side", choices=["tx", "rx"], default="tx")
    p.add_argument("--baseline", type=float, default=1.0)
    p.set_defaults(func=cmd_savings)

    p = sub.add_parser("replay", help="execute a request script and log status and bus trace")
    p.add_argument("script")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.PROTOTYPE.value)
    bus_flags(p)
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
