"""Serial two-wire bus engine with a virtual clock."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Protocol

from .pmbus import Primitive, Transaction

SCL_100K = 100_000
SCL_400K = 400_000

CLOCKS_PER_BYTE = 9  # eight data bits plus the ACK slot


class BusBusyError(RuntimeError):
    """A transaction was issued while another one was in flight."""


class Status(Enum):
    ACKED = "Acked"
    NACKED = "Nacked"  # no device answered the address byte
    ERROR = "Error"  # device rejected the command or data


class Device(Protocol):
    address: int

    def handle_write(self, txn: Transaction) -> bool: ...

    def handle_read(self, txn: Transaction) -> Optional[bytes]: ...

    def advance(self, dt: float) -> None: ...


@dataclass(frozen=True)
class BusConfig:
    scl_rate: float = SCL_400K
    start_overhead: float = 1.0  # clock periods per Start/RepeatedStart/Stop

    def __post_init__(self):
        if self.scl_rate <= 0:
            raise ValueError(f"scl_rate must be positive, got {self.scl_rate}")
        if self.start_overhead < 0:
            raise ValueError("start_overhead must be nonnegative")


def transaction_duration(primitive: Primitive, config: BusConfig = BusConfig()) -> float:
    clocks = primitive.wire_bytes * CLOCKS_PER_BYTE + primitive.control_events * config.start_overhead
    return clocks / config.scl_rate


@dataclass(frozen=True)
class TransactionResult:
    status: Status
    read_payload: bytes
    duration: float

    @property
    def ok(self) -> bool:
        return self.status is Status.ACKED


@dataclass(frozen=True)
class TraceEntry:
    start_time: float
    end_time: float
    transaction: Transaction
    status: Status
    read_payload: bytes = b""


TRACE_HEADER = ["start_s", "end_s", "primitive", "addr", "cmd", "payload_hex", "status"]


class BusEngine:
    """Executes transactions one at a time against attached devices.

    The engine owns the simulation clock. Devices see time pass during each
    transaction and during :meth:`idle`; a transaction's effect is applied
    at its Stop condition.
    """

    def __init__(self, config: BusConfig = BusConfig(), devices: Iterable[Device] = ()):
        self.config = config
        self.now = 0.0
        self.trace: List[TraceEntry] = []
        self.devices: Dict[int, Device] = {}
        self._busy = False
        for device in devices:
            self.attach(device)

    def attach(self, device: Device) -> None:
        if device.address in self.devices:
            raise ValueError(f"address {device.address} already attached")
        self.devices[device.address] = device

    def detach(self, address: int) -> None:
        self.devices.pop(address, None)

    def idle(self, dt: float) -> None:
        if dt < 0:
            raise ValueError("cannot move the clock backwards")
        if dt == 0:
            return
        for device in self.devices.values():
            device.advance(dt)
        self.now += dt

    def execute(self, txn: Transaction) -> TransactionResult:
        if self._busy:
            raise BusBusyError("transaction already in flight")
        self._busy = True
        try:
            start = self.now
            duration = transaction_duration(txn.primitive, self.config)
            self.idle(duration)
            device = self.devices.get(txn.address)
            payload = b""
            if device is None:
                status = Status.NACKED
            elif txn.primitive.is_read:
                data = device.handle_read(txn)
                if data is None:
                    status = Status.ERROR
                else:
                    status = Status.ACKED
                    payload = bytes(data)
            else:
                status = Status.ACKED if device.handle_write(txn) else Status.ERROR
            self.trace.append(TraceEntry(start, self.now, txn, status, payload))
            return TransactionResult(status, payload, duration)
        finally:
            self._busy = False


def write_trace_csv(trace: Iterable[TraceEntry], path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_HEADER)
            for e in trace:
                data = e.read_payload if e.transaction.primitive.is_read else e.transaction.payload
                writer.writerow([
                    repr(e.start_time),
                    repr(e.end_time),
                    e.transaction.primitive.value,
                    e.transaction.address,
                    f"{int(e.transaction.command):02X}",
                    data.hex().upper(),
                    e.status.value,
                ])
    except OSError as exc:
        raise OSError(f"cannot write bus trace to {path}: {exc}") from exc
