"""Behavioral model of a multi-rail PMBus power controller (UCD9248-like).

Each device multiplexes its rails behind PAGE. A VOUT_COMMAND write does not
drive the output directly: the commanded value goes through the adjustment
path (:func:`dac_target`) and the output then follows a slew-limited ramp
after a fixed response delay.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, List, Optional

import yaml

from .pmbus import (
    DEFAULT_EXPONENT,
    Command,
    Transaction,
    decode_linear16,
    encode_linear11,
    encode_linear16,
)

log = logging.getLogger(__name__)

DEFAULT_SLEW_RATE = 250.0  # V/s
DEFAULT_RESPONSE_DELAY = 1e-4  # s

# Threshold policy relative to the requested setpoint.
UV_WARN_FRACTION = 0.90
UV_FAULT_FRACTION = 0.85
PGOOD_ON_FRACTION = 0.95
PGOOD_OFF_FRACTION = 0.92

_WORD_REGISTERS = {
    Command.VOUT_COMMAND: "vout_command",
    Command.VOUT_UV_WARN_LIMIT: "uv_warn_limit",
    Command.VOUT_UV_FAULT_LIMIT: "uv_fault_limit",
    Command.POWER_GOOD_ON: "pgood_on",
    Command.POWER_GOOD_OFF: "pgood_off",
}

FAULT_VOUT_UV = "VOUT_UV_FAULT"


@dataclass
class RailRegisters:
    """Raw LINEAR16 register words plus the adjustment-path settings."""

    vout_command: int = 0
    uv_warn_limit: int = 0
    uv_fault_limit: int = 0
    pgood_on: int = 0
    pgood_off: int = 0
    calibration_offset: float = 0.0
    vout_min: float = 0.0
    vout_max: float = 2.0
    scale: float = 1.0

    def __post_init__(self):
        if self.vout_min > self.vout_max:
            raise ValueError(f"vout_min {self.vout_min} > vout_max {self.vout_max}")


def dac_target(commanded: float, regs: RailRegisters) -> float:
    """Voltage the output is driven to for a commanded setpoint."""
    return min(max(commanded + regs.calibration_offset, regs.vout_min), regs.vout_max) * regs.scale


def default_thresholds(volts: float) -> Dict[Command, float]:
    return {
        Command.VOUT_UV_WARN_LIMIT: volts * UV_WARN_FRACTION,
        Command.VOUT_UV_FAULT_LIMIT: volts * UV_FAULT_FRACTION,
        Command.POWER_GOOD_ON: volts * PGOOD_ON_FRACTION,
        Command.POWER_GOOD_OFF: volts * PGOOD_OFF_FRACTION,
    }


@dataclass
class Rail:
    name: str
    regs: RailRegisters
    output_voltage: float
    slew_rate: float = DEFAULT_SLEW_RATE
    response_delay: float = DEFAULT_RESPONSE_DELAY
    overshoot: float = 0.0
    load_power_w: float = 0.0
    power_fn: Optional[Callable[[float], float]] = None
    target_voltage: float = field(init=False)
    _pending: Optional[float] = field(default=None, init=False, repr=False)
    _delay_left: float = field(default=0.0, init=False, repr=False)
    _waypoint: Optional[float] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.slew_rate <= 0:
            raise ValueError("slew_rate must be positive")
        if self.response_delay < 0 or self.overshoot < 0:
            raise ValueError("response_delay and overshoot must be nonnegative")
        self.target_voltage = self.output_voltage

    def command(self, target: float) -> None:
        """Latch a new target; the output starts moving after the response delay."""
        self._pending = target
        self._delay_left = self.response_delay
        if self._delay_left == 0:
            self._apply_pending()

    def _apply_pending(self) -> None:
        target, self._pending = self._pending, None
        self.target_voltage = target
        self._waypoint = None
        if self.overshoot > 0 and target != self.output_voltage:
            self._waypoint = target + self.overshoot * (target - self.output_voltage)

    def advance(self, dt: float) -> None:
        if dt < 0:
            raise ValueError("dt must be nonnegative")
        # the old target keeps being tracked while a new command waits out its delay
        while dt > 0:
            if self._pending is None:
                self._ramp(dt)
                return
            if dt < self._delay_left:
                self._ramp(dt)
                self._delay_left -= dt
                return
            used = self._delay_left
            self._ramp(used)
            dt -= used
            self._delay_left = 0.0
            self._apply_pending()

    def _ramp(self, dt: float) -> None:
        while dt > 0:
            aim = self.target_voltage if self._waypoint is None else self._waypoint
            distance = aim - self.output_voltage
            if distance == 0:
                if self._waypoint is None:
                    return
                self._waypoint = None
                continue
            reach = abs(distance) / self.slew_rate
            if reach > dt:
                self.output_voltage += math.copysign(self.slew_rate * dt, distance)
                return
            self.output_voltage = aim
            dt -= reach
            if self._waypoint is None:
                return
            self._waypoint = None

    @property
    def setpoint(self) -> float:
        """Latest commanded target, including one still waiting out the delay."""
        return self.target_voltage if self._pending is None else self._pending

    @property
    def settled(self) -> bool:
        return self._pending is None and self._waypoint is None and self.output_voltage == self.target_voltage

    def power(self) -> float:
        if self.power_fn is not None:
            return self.power_fn(self.output_voltage)
        return self.load_power_w


class RegulatorDevice:
    """One PMBus address with one rail per PAGE."""

    def __init__(self, address: int, rails: List[Rail], exponent: int = DEFAULT_EXPONENT, strict: bool = False):
        if not rails:
            raise ValueError("a device needs at least one rail")
        self.address = address
        self.rails = rails
        self.exponent = exponent
        self.strict = strict
        self.page = 0
        self.fault_flags: set = set()

    @property
    def rail(self) -> Rail:
        return self.rails[self.page]

    def rail_named(self, name: str) -> Rail:
        for rail in self.rails:
            if rail.name == name:
                return rail
        raise KeyError(name)

    # -- register access ----------------------------------------------------

    def write(self, command: Command, payload: bytes) -> bool:
        """Apply a write; returns False (NACK) when the device rejects it."""
        command = Command(command)
        if command is Command.PAGE:
            if len(payload) != 1 or payload[0] >= len(self.rails):
                return False
            self.page = payload[0]
            return True
        if command is Command.CLEAR_FAULTS:
            if payload:
                return False
            self.fault_flags.clear()
            return True
        name = _WORD_REGISTERS.get(command)
        if name is None or len(payload) != 2:
            return False
        raw = int.from_bytes(payload, "little")
        rail = self.rail
        setattr(rail.regs, name, raw)
        if command is Command.VOUT_COMMAND:
            rail.command(dac_target(decode_linear16(raw, self.exponent), rail.regs))
        return True

    def read(self, command: Command) -> Optional[bytes]:
        """Return the response bytes for a read, or None (NACK)."""
        command = Command(command)
        rail = self.rail
        if command is Command.READ_VOUT:
            return encode_linear16(max(rail.output_voltage, 0.0), self.exponent).to_bytes()
        if command is Command.READ_IOUT:
            v = rail.output_voltage
            amps = rail.power() / v if v > 0 else 0.0
            return encode_linear11(amps).to_bytes(2, "little")
        if command is Command.PAGE:
            return bytes([self.page])
        name = _WORD_REGISTERS.get(command)
        if name is None:
            return None
        return getattr(rail.regs, name).to_bytes(2, "little")

    # bus-engine device protocol
    def handle_write(self, txn: Transaction) -> bool:
        return self.write(txn.command, txn.payload)

    def handle_read(self, txn: Transaction) -> Optional[bytes]:
        data = self.read(txn.command)
        if data is None or len(data) != txn.read_length:
            return None
        return data

    def advance(self, dt: float) -> None:
        for rail in self.rails:
            rail.advance(dt)
        if self.strict:
            for rail in self.rails:
                limit = decode_linear16(rail.regs.uv_fault_limit, self.exponent)
                if rail.output_voltage < limit:
                    self.fault_flags.add(FAULT_VOUT_UV)


# -- platform profiles ----------------------------------------------------------


@dataclass(frozen=True)
class RailSpec:
    lane: int
    name: str
    address: int
    page: int
    nominal: float
    vout_min: float
    vout_max: float
    load_power_w: float = 0.0
    calibration_offset: float = 0.0
    scale: float = 1.0


@dataclass(frozen=True)
class PlatformProfile:
    name: str
    exponent: int
    slew_rate: float
    response_delay: float
    overshoot: float
    rails: tuple

    def rail_for_lane(self, lane: int) -> RailSpec:
        for spec in self.rails:
            if spec.lane == lane:
                return spec
        raise KeyError(f"lane {lane} is not mapped in profile {self.name!r}")

    @property
    def addresses(self) -> List[int]:
        return sorted({r.address for r in self.rails})

    def build_devices(self, strict: bool = False) -> Dict[int, RegulatorDevice]:
        """Instantiate devices with every rail at its nominal voltage."""
        devices = {}
        for address in self.addresses:
            specs = sorted((r for r in self.rails if r.address == address), key=lambda r: r.page)
            if [s.page for s in specs] != list(range(len(specs))):
                raise ValueError(f"device {address} pages are not contiguous from 0")
            rails = []
            for s in specs:
                regs = RailRegisters(
                    vout_command=encode_linear16(s.nominal, self.exponent).raw,
                    calibration_offset=s.calibration_offset,
                    vout_min=s.vout_min,
                    vout_max=s.vout_max,
                    scale=s.scale,
                )
                for command, volts in default_thresholds(s.nominal).items():
                    setattr(regs, _WORD_REGISTERS[command], encode_linear16(volts, self.exponent).raw)
                if regs.pgood_off > regs.pgood_on:
                    raise ValueError(f"{s.name}: pgood_off above pgood_on")
                rails.append(Rail(
                    name=s.name,
                    regs=regs,
                    output_voltage=dac_target(decode_linear16(regs.vout_command, self.exponent), regs),
                    slew_rate=self.slew_rate,
                    response_delay=self.response_delay,
                    overshoot=self.overshoot,
                    load_power_w=s.load_power_w,
                ))
            devices[address] = RegulatorDevice(address, rails, self.exponent, strict)
        return devices


def load_profile(source=None) -> PlatformProfile:
    """Load a platform profile from a YAML file, or the bundled ``kc705``."""
    if source is None or source == "kc705":
        text = resources.files("railctl.data").joinpath("kc705.yaml").read_text()
    else:
        text = Path(source).read_text()
    doc = yaml.safe_load(text)
    dyn = doc.get("dynamics", {})
    rails = []
    for row in doc["rails"]:
        rails.append(RailSpec(
            lane=int(row["lane"]),
            name=str(row["name"]),
            address=int(row["address"]),
            page=int(row["page"]),
            nominal=float(row["nominal_v"]),
            vout_min=float(row["vout_min_v"]),
            vout_max=float(row["vout_max_v"]),
            load_power_w=float(row.get("load_power_w", 0.0)),
            calibration_offset=float(row.get("calibration_offset_v", 0.0)),
            scale=float(row.get("scale", 1.0)),
        ))
    lanes = [r.lane for r in rails]
    if len(set(lanes)) != len(lanes):
        raise ValueError("duplicate lane in profile")
    if len({(r.address, r.page) for r in rails}) != len(rails):
        raise ValueError("two lanes map to the same (address, page)")
    profile = PlatformProfile(
        name=str(doc.get("name", "unnamed")),
        exponent=int(doc.get("vout_exponent", DEFAULT_EXPONENT)),
        slew_rate=float(dyn.get("slew_rate_v_per_s", DEFAULT_SLEW_RATE)),
        response_delay=float(dyn.get("response_delay_s", DEFAULT_RESPONSE_DELAY)),
        overshoot=float(dyn.get("overshoot_fraction", 0.0)),
        rails=tuple(sorted(rails, key=lambda r: r.lane)),
    )
    log.debug("loaded profile %s with %d rails", profile.name, len(rails))
    return profile
