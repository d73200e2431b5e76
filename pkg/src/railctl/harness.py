"""Experiment runners for controller characterization and the link case study."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .bus import SCL_100K, SCL_400K, BusConfig, BusEngine
from .link import CalibrationError, LinkCalibration, swept_sides
from .manager import (
    HARDWARE,
    SOFTWARE,
    ControlPath,
    LaneMap,
    Mode,
    Opcode,
    PowerManager,
    Request,
)
from .pmbus import encode_linear16
from .regulator import (
    PGOOD_OFF_FRACTION,
    PGOOD_ON_FRACTION,
    UV_FAULT_FRACTION,
    UV_WARN_FRACTION,
    PlatformProfile,
    Rail,
    RegulatorDevice,
)
from .settling import SettlingParams, SettlingReport, VoltageTrace, settling_time, tail_is_stable

log = logging.getLogger(__name__)

MGTAVCC_LANE = 6
DEFAULT_HORIZON = 20e-3
SETTLE_POLL = 1e-4

# Published sampling intervals, used for reporting alongside the simulated ones.
REPORTED_INTERVALS = {
    ("hardware", SCL_400K): 0.2e-3,
    ("hardware", SCL_100K): 0.6e-3,
    ("software", SCL_400K): 0.8e-3,
    ("software", SCL_100K): 1.0e-3,
}

DECREASE_TARGETS = (0.9, 0.8, 0.7, 0.6, 0.5)
INCREASE_SOURCES = (0.5, 0.6, 0.7, 0.8, 0.9)

BER_THRESHOLDS = (1e-9, 1e-7, 1e-6)


class ExperimentError(RuntimeError):
    pass


class ClampError(ExperimentError):
    def __init__(self, voltage: float, lane: int, limits: Tuple[float, float]):
        super().__init__(f"{voltage} V on lane {lane} is outside clamp limits {limits}")
        self.voltage = voltage


class TransitionTimeout(ExperimentError):
    pass


@dataclass
class Stack:
    """One engine, its regulators and the controller driving them."""

    engine: BusEngine
    devices: Dict[int, RegulatorDevice]
    manager: PowerManager
    profile: PlatformProfile

    def rail(self, lane: int) -> Rail:
        address, page = self.manager.resolve_lane(lane)
        return self.devices[address].rails[page]


def build_stack(
    profile: PlatformProfile,
    path: ControlPath = HARDWARE,
    bus: BusConfig = BusConfig(),
    mode: Mode = Mode.PROTOTYPE,
) -> Stack:
    devices = profile.build_devices()
    engine = BusEngine(bus, devices.values())
    manager = PowerManager(engine, LaneMap.from_profile(profile), path, mode, profile.exponent)
    return Stack(engine, devices, manager, profile)


def _check_clamp(profile: PlatformProfile, lane: int, volts: float) -> None:
    spec = profile.rail_for_lane(lane)
    if not spec.vout_min <= volts <= spec.vout_max:
        raise ClampError(volts, lane, (spec.vout_min, spec.vout_max))


def set_and_settle(stack: Stack, lane: int, volts: float, mode: Optional[Mode] = None,
                   timeout: float = DEFAULT_HORIZON) -> None:
    """Program ``volts`` and poll readback until the rail sits on the setpoint."""
    status = stack.manager.submit(Request(Opcode.SET_VOLTAGE, lane, volts), mode)
    if not status.ok:
        raise ExperimentError(f"SetVoltage({lane}, {volts}) failed: {status.outcome.value} at step {status.step}")
    expected = encode_linear16(volts, stack.profile.exponent).volts
    deadline = stack.engine.now + timeout
    rail = stack.rail(lane)
    while stack.engine.now < deadline:
        if rail.settled:
            readback = stack.manager.submit(Request(Opcode.GET_VOLTAGE, lane))
            if readback.ok and readback.value == expected:
                return
        stack.engine.idle(SETTLE_POLL)
    raise TransitionTimeout(f"lane {lane} did not settle at {volts} V within {timeout} s")


# -- controller characterization --------------------------------------------------


@dataclass(frozen=True)
class TransitionExperiment:
    lane: int = MGTAVCC_LANE
    from_voltage: float = 1.0
    to_voltage: float = 0.5
    path: ControlPath = HARDWARE
    bus: BusConfig = BusConfig()
    settling: SettlingParams = SettlingParams()
    mode: Mode = Mode.MINIMAL
    horizon: float = DEFAULT_HORIZON


@dataclass
class TransitionResult:
    experiment: TransitionExperiment
    trace: VoltageTrace
    report: SettlingReport
    timed_out: bool = False

    @property
    def settling_time(self) -> Optional[float]:
        return self.report.settling_time


def run_transition(exp: TransitionExperiment, profile: PlatformProfile) -> TransitionResult:
    """Time one voltage step from request issue to settling.

    The rail is first positioned at ``from_voltage`` with the full prototype
    sequence (which also selects the page). A readback then provides the
    t=0 sample, the step is issued immediately afterwards in ``exp.mode`` and
    the rail is sampled until the tail is stable or the horizon expires.
    """
    _check_clamp(profile, exp.lane, exp.from_voltage)
    _check_clamp(profile, exp.lane, exp.to_voltage)
    stack = build_stack(profile, exp.path, exp.bus, Mode.PROTOTYPE)
    mgr = stack.manager
    set_and_settle(stack, exp.lane, exp.from_voltage, Mode.PROTOTYPE)

    first = mgr.submit(Request(Opcode.GET_VOLTAGE, exp.lane))
    t0 = stack.engine.now
    times, volts = [0.0], [first.value]
    status = mgr.submit(Request(Opcode.SET_VOLTAGE, exp.lane, exp.to_voltage), exp.mode)
    if not status.ok:
        raise ExperimentError(f"step request failed: {status.outcome.value} at step {status.step}")

    depth = 2 * exp.settling.window
    timed_out = True
    while stack.engine.now - t0 < exp.horizon:
        samples = mgr.sample_loop(exp.lane, 1)
        if not samples:
            raise ExperimentError("readback failed during transition")
        times.append(samples[0].time - t0)
        volts.append(samples[0].voltage)
        if tail_is_stable(volts, exp.settling, depth):
            timed_out = False
            break
    trace = VoltageTrace(tuple(times), tuple(volts))
    report = settling_time(trace, exp.settling)
    if timed_out:
        log.warning("transition %s -> %s V hit the %.3g s horizon", exp.from_voltage, exp.to_voltage, exp.horizon)
    return TransitionResult(exp, trace, report, timed_out)


def transition_sweep(profile: PlatformProfile, direction: str = "decrease", **kwargs) -> List[TransitionResult]:
    """The characterization step set: 1.0 V down to 0.9..0.5 V, or back up."""
    if direction == "decrease":
        pairs = [(1.0, v) for v in DECREASE_TARGETS]
    elif direction == "increase":
        pairs = [(v, 1.0) for v in INCREASE_SOURCES]
    else:
        raise ValueError(f"direction must be 'decrease' or 'increase', not {direction!r}")
    return [run_transition(TransitionExperiment(from_voltage=a, to_voltage=b, **kwargs), profile) for a, b in pairs]


@dataclass(frozen=True)
class IntervalRow:
    path: str
    scl_rate: float
    interval: float
    reference: Optional[float]


def run_interval_matrix(profile: PlatformProfile, lane: int = MGTAVCC_LANE, samples: int = 50) -> List[IntervalRow]:
    rows = []
    for path in (HARDWARE, SOFTWARE):
        for scl in (SCL_400K, SCL_100K):
            stack = build_stack(profile, path, BusConfig(scl))
            trace = stack.manager.sample_loop(lane, samples)
            if len(trace) < 3:
                raise ExperimentError(f"sampling failed for {path.kind} at {scl} Hz")
            # the first readback also carries the PAGE write
            gaps = np.diff([s.time for s in trace[1:]])
            rows.append(IntervalRow(path.kind, scl, float(np.mean(gaps)), REPORTED_INTERVALS.get((path.kind, scl))))
    return rows


# -- case study ------------------------------------------------------------------


@dataclass(frozen=True)
class CaseStudySweep:
    speed: float = 10.0
    mode: str = "both-swept"
    start: float = 1.0
    stop: float = 0.7
    step: float = 0.001
    seed: int = 0
    lane: int = MGTAVCC_LANE
    path: ControlPath = HARDWARE
    bus: BusConfig = BusConfig(SCL_400K)

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.stop > self.start:
            raise ValueError("sweeps run downward: stop must not exceed start")
        swept_sides(self.mode)

    def voltages(self) -> List[float]:
        n = int(round((self.start - self.stop) / self.step))
        return [round(self.start - i * self.step, 9) for i in range(n + 1)]


@dataclass(frozen=True)
class SweepPoint:
    voltage: float
    ber: float
    received_bytes: int
    latency: float
    tx_power: float
    rx_power: float


SWEEP_HEADER = ["voltage_v", "ber", "received_bytes", "latency_s", "tx_power_w", "rx_power_w"]
TRACE_HEADER = ["time_s", "voltage_v"]


@dataclass
class SweepResult:
    sweep: CaseStudySweep
    points: List[SweepPoint]
    metadata: dict = field(default_factory=dict)


def run_case_study(sweep: CaseStudySweep, calibration: LinkCalibration, profile: PlatformProfile) -> SweepResult:
    """Sweep MGTAVCC on the TX and/or RX board and record link metrics.

    Each board is its own controller stack. The first point of every swept
    board uses the prototype sequence; later points use the minimal
    VOUT_COMMAND-only update. Link models are evaluated at the programmed
    setpoint once the rail has settled on it.
    """
    speed_cal = calibration.speed(sweep.speed)
    if sweep.mode not in speed_cal.ber:
        raise CalibrationError(f"no calibration for {sweep.speed} Gbps, mode {sweep.mode!r}")
    swept = swept_sides(sweep.mode)
    voltages = sweep.voltages()
    for v in voltages:
        _check_clamp(profile, sweep.lane, v)

    boards = {}
    for side in ("tx", "rx"):
        stack = build_stack(profile, sweep.path, sweep.bus, Mode.MINIMAL)
        model = speed_cal.power[side]
        lo, hi = calibration.valid_range
        stack.rail(sweep.lane).power_fn = lambda v, m=model, lo=lo, hi=hi: m(min(max(v, lo), hi))
        boards[side] = stack

    nominal = 1.0
    for side, stack in boards.items():
        if side not in swept:
            set_and_settle(stack, sweep.lane, nominal, Mode.PROTOTYPE)

    rng = np.random.default_rng(sweep.seed)
    points = []
    for i, v in enumerate(voltages):
        for side in swept:
            set_and_settle(boards[side], sweep.lane, v, Mode.PROTOTYPE if i == 0 else Mode.MINIMAL)
        received = calibration.received_bytes_at(v, sweep.speed, sweep.mode, rng)
        latency = calibration.latency_at(v, sweep.speed, rng)
        points.append(SweepPoint(
            voltage=v,
            ber=calibration.ber_at(v, sweep.speed, sweep.mode),
            received_bytes=received,
            latency=latency,
            tx_power=calibration.power_at(v if "tx" in swept else nominal, sweep.speed, "tx"),
            rx_power=calibration.power_at(v if "rx" in swept else nominal, sweep.speed, "rx"),
        ))

    metadata = {
        "calibration": calibration.name,
        "profile": profile.name,
        "speed_gbps": sweep.speed,
        "reference_clock_mhz": speed_cal.reference_clock_mhz,
        "mode": sweep.mode,
        "swept_sides": list(swept),
        "fixed_side_voltage_v": nominal,
        "range_v": [sweep.start, sweep.stop],
        "step_v": sweep.step,
        "points": len(points),
        "payload_bytes": calibration.payload,
        "seed": sweep.seed,
        "lane": sweep.lane,
        "control_path": sweep.path.kind,
        "scl_hz": sweep.bus.scl_rate,
        "first_update": "prototype (thresholds + VOUT_COMMAND)",
        "per_point_update": "minimal (VOUT_COMMAND)",
        "threshold_fractions": {
            "uv_warn": UV_WARN_FRACTION,
            "uv_fault": UV_FAULT_FRACTION,
            "pgood_on": PGOOD_ON_FRACTION,
            "pgood_off": PGOOD_OFF_FRACTION,
        },
        "simulated_time_s": {side: stack.engine.now for side, stack in boards.items()},
    }
    return SweepResult(sweep, points, metadata)


@dataclass(frozen=True)
class ThresholdSaving:
    threshold: float
    voltage: float
    power: float
    saving: float


@dataclass(frozen=True)
class SavingsReport:
    side: str
    baseline_voltage: float
    baseline_power: float
    boundary_voltage: float
    boundary_power: float
    boundary_saving: float
    thresholds: Tuple[ThresholdSaving, ...]

    def as_dict(self) -> dict:
        return asdict(self)


def savings_report(
    points: Sequence[SweepPoint],
    baseline_voltage: float = 1.0,
    side: str = "tx",
    thresholds: Iterable[float] = BER_THRESHOLDS,
) -> SavingsReport:
    """Power saved at the near-zero-BER boundary and at each BER threshold.

    Each level is the lowest point of the unbroken run, from the baseline
    downward, whose BER stays within the level.
    """
    if not points:
        raise ValueError("empty sweep")
    volts = [p.voltage for p in points]
    if any(b >= a for a, b in zip(volts, volts[1:])):
        raise ValueError("points must be sorted by voltage, descending")
    base_idx = next((i for i, v in enumerate(volts) if abs(v - baseline_voltage) < 1e-9), None)
    if base_idx is None:
        raise ValueError(f"no point at the baseline voltage {baseline_voltage} V")
    power = (lambda p: p.tx_power) if side == "tx" else (lambda p: p.rx_power)
    base_power = power(points[base_idx])

    def lowest_within(limit: float) -> SweepPoint:
        chosen = None
        for p in points[base_idx:]:
            if p.ber > limit:
                break
            chosen = p
        if chosen is None:
            raise ValueError(f"BER at the baseline already exceeds {limit}")
        return chosen

    boundary = lowest_within(0.0)
    rows = []
    for t in sorted(thresholds):
        p = lowest_within(t)
        rows.append(ThresholdSaving(t, p.voltage, power(p), 1.0 - power(p) / base_power))
    return SavingsReport(
        side, baseline_voltage, base_power, boundary.voltage, power(boundary),
        1.0 - power(boundary) / base_power, tuple(rows),
    )


# -- output ------------------------------------------------------------------------


def emit_csv(rows, path) -> None:
    """Write sweep points or a voltage trace as CSV (header always present)."""
    path = Path(path)
    if isinstance(rows, VoltageTrace):
        header = TRACE_HEADER
        body = [[repr(t), repr(v)] for t, v in zip(rows.times, rows.voltages)]
    else:
        header = SWEEP_HEADER
        body = [
            [repr(p.voltage), repr(p.ber), str(p.received_bytes), repr(p.latency), repr(p.tx_power), repr(p.rx_power)]
            for p in rows
        ]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(body)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_sweep_csv(path) -> List[SweepPoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SWEEP_HEADER:
            raise ValueError(f"{path}: expected header {','.join(SWEEP_HEADER)}")
        return [
            SweepPoint(
                float(r["voltage_v"]), float(r["ber"]), int(r["received_bytes"]),
                float(r["latency_s"]), float(r["tx_power_w"]), float(r["rx_power_w"]),
            )
            for r in reader
        ]


def write_metadata(metadata: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
