"""Opcode translation layer: lanes, request expansion and serialized execution."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

from .bus import BusEngine, Status, transaction_duration
from .pmbus import (
    DEFAULT_EXPONENT,
    Command,
    Linear16Value,
    Primitive,
    Transaction,
    encode_linear16,
    read_word,
    write_byte,
    write_word,
)
from .regulator import UV_FAULT_FRACTION, UV_WARN_FRACTION, PlatformProfile, default_thresholds


class Opcode(IntEnum):
    CLEAR_STATUS = 0x0
    SET_UNDER_VOLTAGE = 0x1
    SET_PGOOD_ON = 0x2
    SET_PGOOD_OFF = 0x3
    SET_VOLTAGE = 0x4
    GET_VOLTAGE = 0x5


class UnknownLaneError(KeyError):
    def __init__(self, lane):
        super().__init__(f"lane {lane} is not mapped")
        self.lane = lane


class ControllerBusyError(RuntimeError):
    pass


@dataclass(frozen=True)
class Request:
    opcode: Opcode
    lane: int
    value: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "opcode", Opcode(self.opcode))


@dataclass(frozen=True)
class LaneTarget:
    name: str
    address: int
    page: int


class LaneMap(Mapping):
    """lane -> (rail name, PMBus address, PAGE)."""

    def __init__(self, entries: Mapping[int, LaneTarget]):
        self._entries = dict(entries)
        if len({(t.address, t.page) for t in self._entries.values()}) != len(self._entries):
            raise ValueError("lane map is not one-to-one")

    @classmethod
    def from_profile(cls, profile: PlatformProfile) -> "LaneMap":
        return cls({r.lane: LaneTarget(r.name, r.address, r.page) for r in profile.rails})

    def __getitem__(self, lane: int) -> LaneTarget:
        try:
            return self._entries[lane]
        except KeyError:
            raise UnknownLaneError(lane) from None

    def __iter__(self):
        return iter(sorted(self._entries))

    def __len__(self):
        return len(self._entries)

    def resolve(self, lane: int) -> Tuple[int, int]:
        target = self[lane]
        return target.address, target.page


@dataclass(frozen=True)
class ControlPath:
    kind: str
    per_transaction_overhead: float

    def __post_init__(self):
        if self.per_transaction_overhead < 0:
            raise ValueError("overhead must be nonnegative")


HARDWARE = ControlPath("hardware", 80e-6)
SOFTWARE = ControlPath("software", 560e-6)


def control_path(kind: str) -> ControlPath:
    kind = kind.lower()
    if kind in ("hw", "hardware"):
        return HARDWARE
    if kind in ("sw", "software"):
        return SOFTWARE
    raise ValueError(f"unknown control path {kind!r}")


class Mode(Enum):
    PROTOTYPE = "prototype"  # thresholds, then VOUT_COMMAND
    MINIMAL = "minimal"  # VOUT_COMMAND only


class Outcome(Enum):
    COMPLETED = "Completed"
    NACKED = "Nacked"
    DEVICE_ERROR = "DeviceError"


@dataclass(frozen=True)
class ControllerStatus:
    request: Request
    outcome: Outcome
    step: Optional[int] = None
    value: Optional[float] = None
    start_time: float = 0.0
    end_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.outcome is Outcome.COMPLETED


def _word(volts: float, exponent: int) -> int:
    return encode_linear16(volts, exponent).raw


def expand(
    request: Request,
    lanes: LaneMap,
    page_cache: Mapping[int, int],
    mode: Mode = Mode.PROTOTYPE,
    exponent: int = DEFAULT_EXPONENT,
) -> List[Transaction]:
    """Ordered PMBus transactions for ``request`` given the cached pages.

    PAGE is emitted only when the device's cached page differs from the
    lane's page.
    """
    op = request.opcode
    if op is Opcode.CLEAR_STATUS:
        return []
    address, page = lanes.resolve(request.lane)
    seq = []
    if page_cache.get(address) != page:
        seq.append(write_byte(address, Command.PAGE, page))
    v = request.value
    if op is Opcode.SET_UNDER_VOLTAGE:
        seq.append(write_word(address, Command.VOUT_UV_WARN_LIMIT, _word(v, exponent)))
        fault = v * UV_FAULT_FRACTION / UV_WARN_FRACTION
        seq.append(write_word(address, Command.VOUT_UV_FAULT_LIMIT, _word(fault, exponent)))
    elif op is Opcode.SET_PGOOD_ON:
        seq.append(write_word(address, Command.POWER_GOOD_ON, _word(v, exponent)))
    elif op is Opcode.SET_PGOOD_OFF:
        seq.append(write_word(address, Command.POWER_GOOD_OFF, _word(v, exponent)))
    elif op is Opcode.SET_VOLTAGE:
        if mode is Mode.PROTOTYPE:
            for command, volts in default_thresholds(v).items():
                seq.append(write_word(address, command, _word(volts, exponent)))
        seq.append(write_word(address, Command.VOUT_COMMAND, _word(v, exponent)))
    elif op is Opcode.GET_VOLTAGE:
        seq.append(read_word(address, Command.READ_VOUT))
    else:  # pragma: no cover - Opcode() already rejects unknown values
        raise ValueError(f"unknown opcode {op!r}")
    return seq


@dataclass(frozen=True)
class VoltageSample:
    time: float
    voltage: float


class PowerManager:
    """Serializes requests onto one bus engine.

    Each transaction is preceded by the control path's per-transaction
    overhead; a failing step aborts the rest of the sequence.
    """

    def __init__(
        self,
        engine: BusEngine,
        lanes: LaneMap,
        path: ControlPath = HARDWARE,
        mode: Mode = Mode.PROTOTYPE,
        exponent: int = DEFAULT_EXPONENT,
    ):
        self.engine = engine
        self.lanes = lanes
        self.path = path
        self.mode = mode
        self.exponent = exponent
        self.page_cache: Dict[int, int] = {}
        self.last_status: Optional[ControllerStatus] = None
        self.log: List[ControllerStatus] = []
        self._busy = False

    def resolve_lane(self, lane: int) -> Tuple[int, int]:
        return self.lanes.resolve(lane)

    def expand(self, request: Request, mode: Optional[Mode] = None) -> List[Transaction]:
        return expand(request, self.lanes, self.page_cache, mode or self.mode, self.exponent)

    def submit(self, request: Request, mode: Optional[Mode] = None) -> ControllerStatus:
        if self._busy:
            raise ControllerBusyError("a request is already being executed")
        self._busy = True
        try:
            status = self._run(request, mode)
        finally:
            self._busy = False
        self.last_status = status
        self.log.append(status)
        return status

    def _run(self, request: Request, mode: Optional[Mode]) -> ControllerStatus:
        start = self.engine.now
        value = None
        for step, txn in enumerate(self.expand(request, mode)):
            self.engine.idle(self.path.per_transaction_overhead)
            result = self.engine.execute(txn)
            is_page = txn.command is Command.PAGE
            if not result.ok:
                if is_page:
                    self.page_cache.pop(txn.address, None)
                outcome = Outcome.NACKED if result.status is Status.NACKED else Outcome.DEVICE_ERROR
                return ControllerStatus(request, outcome, step, None, start, self.engine.now)
            if is_page:
                self.page_cache[txn.address] = txn.payload[0]
            if txn.command is Command.READ_VOUT:
                value = Linear16Value.from_bytes(result.read_payload, self.exponent).volts
        return ControllerStatus(request, Outcome.COMPLETED, None, value, start, self.engine.now)

    def sample_loop(self, lane: int, count: int) -> List[VoltageSample]:
        """Repeated GetVoltage readbacks, stamped at each read's completion.

        Stops early (returning the partial trace) if a readback fails.
        """
        samples = []
        for _ in range(count):
            status = self.submit(Request(Opcode.GET_VOLTAGE, lane))
            if not status.ok:
                break
            samples.append(VoltageSample(self.engine.now, status.value))
        return samples

    def sample_interval(self) -> float:
        """Steady-state readback cadence once the page is cached."""
        return transaction_duration(Primitive.READ_WORD, self.engine.config) + self.path.per_transaction_overhead


# -- request scripts and status logs --------------------------------------------


def parse_request_script(lines: Iterable[str]) -> List[Request]:
    """Parse ``opcode lane value`` lines; ``#`` starts a comment.

    The opcode may be numeric (``0x4``) or a name (``SET_VOLTAGE``); the value
    may be omitted for opcodes that ignore it.
    """
    requests = []
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ValueError(f"line {lineno}: expected 'opcode lane [value]', got {line!r}")
        op_text = parts[0]
        try:
            opcode = Opcode[op_text.upper()] if not op_text[0].isdigit() else Opcode(int(op_text, 0))
        except (KeyError, ValueError):
            raise ValueError(f"line {lineno}: unknown opcode {op_text!r}") from None
        value = float(parts[2]) if len(parts) == 3 else 0.0
        requests.append(Request(opcode, int(parts[1], 0), value))
    return requests


def load_request_script(path) -> List[Request]:
    with open(path) as fh:
        return parse_request_script(fh)


STATUS_HEADER = ["start_s", "end_s", "opcode", "lane", "value_v", "outcome", "step", "readback_v"]


def write_status_csv(statuses: Iterable[ControllerStatus], path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(STATUS_HEADER)
            for s in statuses:
                writer.writerow([
                    repr(s.start_time),
                    repr(s.end_time),
                    f"0x{int(s.request.opcode):X}",
                    s.request.lane,
                    repr(s.request.value),
                    s.outcome.value,
                    "" if s.step is None else s.step,
                    "" if s.value is None else repr(s.value),
                ])
    except OSError as exc:
        raise OSError(f"cannot write status log to {path}: {exc}") from exc
