"""PMBus payload encodings and transaction framing.

Only the command subset needed for rail programming and readback is
supported. Words travel low byte first (SMBus convention) and packet error
checking is not modeled.

>>> encode_linear16(0.9, -12)
Linear16Value(raw=3686, exponent=-12)
>>> decode_linear11(0xD200)
8.0
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum, unique
from typing import Iterable, Optional, Sequence

DEFAULT_EXPONENT = -12

EXPONENT_MIN = -16
EXPONENT_MAX = 15

LINEAR11_MANTISSA_MIN = -1024
LINEAR11_MANTISSA_MAX = 1023


class PmbusError(Exception):
    """Base class for codec and framing errors."""


class EncodingError(PmbusError, ValueError):
    """A value cannot be represented in the requested format."""


class FrameError(PmbusError, ValueError):
    """A transaction cannot be framed (unsupported primitive/command pair)."""


class FrameParseError(PmbusError, ValueError):
    """Malformed wire frame; ``index`` names the offending event."""

    def __init__(self, index: int, message: str):
        super().__init__(f"event {index}: {message}")
        self.index = index


@unique
class Command(IntEnum):
    PAGE = 0x00
    CLEAR_FAULTS = 0x03
    VOUT_COMMAND = 0x21
    VOUT_UV_WARN_LIMIT = 0x43
    VOUT_UV_FAULT_LIMIT = 0x44
    POWER_GOOD_ON = 0x5E
    POWER_GOOD_OFF = 0x5F
    READ_VOUT = 0x8B
    READ_IOUT = 0x8C


@unique
class Primitive(Enum):
    SEND_BYTE = "SendByte"
    WRITE_BYTE = "WriteByte"
    WRITE_WORD = "WriteWord"
    READ_BYTE = "ReadByte"
    READ_WORD = "ReadWord"

    @property
    def is_read(self) -> bool:
        return self in (Primitive.READ_BYTE, Primitive.READ_WORD)

    @property
    def data_length(self) -> int:
        """Payload bytes carried after the command byte."""
        return _DATA_LENGTH[self]

    @property
    def wire_bytes(self) -> int:
        """Bytes on the wire including address and command bytes."""
        # write: addr, cmd, data...; read: addr, cmd, addr, data...
        return 2 + self.data_length + (1 if self.is_read else 0)

    @property
    def control_events(self) -> int:
        """Start/RepeatedStart/Stop conditions in the frame."""
        return 3 if self.is_read else 2


_DATA_LENGTH = {
    Primitive.SEND_BYTE: 0,
    Primitive.WRITE_BYTE: 1,
    Primitive.WRITE_WORD: 2,
    Primitive.READ_BYTE: 1,
    Primitive.READ_WORD: 2,
}

# Allowed primitives per command, following the R/W column of the command table.
SUPPORTED = {
    Command.PAGE: (Primitive.WRITE_BYTE, Primitive.READ_BYTE),
    Command.CLEAR_FAULTS: (Primitive.SEND_BYTE,),
    Command.VOUT_COMMAND: (Primitive.WRITE_WORD, Primitive.READ_WORD),
    Command.VOUT_UV_WARN_LIMIT: (Primitive.WRITE_WORD, Primitive.READ_WORD),
    Command.VOUT_UV_FAULT_LIMIT: (Primitive.WRITE_WORD, Primitive.READ_WORD),
    Command.POWER_GOOD_ON: (Primitive.WRITE_WORD, Primitive.READ_WORD),
    Command.POWER_GOOD_OFF: (Primitive.WRITE_WORD, Primitive.READ_WORD),
    Command.READ_VOUT: (Primitive.READ_WORD,),
    Command.READ_IOUT: (Primitive.READ_WORD,),
}

WRITE = 0
READ = 1


# -- fixed point ---------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def _check_exponent(exponent: int) -> None:
    if not EXPONENT_MIN <= exponent <= EXPONENT_MAX:
        raise EncodingError(f"exponent {exponent} outside [{EXPONENT_MIN}, {EXPONENT_MAX}]")


@dataclass(frozen=True)
class Linear16Value:
    raw: int
    exponent: int = DEFAULT_EXPONENT

    def __post_init__(self):
        if not 0 <= self.raw <= 0xFFFF:
            raise EncodingError(f"LINEAR16 mantissa {self.raw} outside 16 bits")
        _check_exponent(self.exponent)

    @property
    def volts(self) -> float:
        return decode_linear16(self.raw, self.exponent)

    def to_bytes(self) -> bytes:
        return self.raw.to_bytes(2, "little")

    @classmethod
    def from_bytes(cls, data: bytes, exponent: int = DEFAULT_EXPONENT) -> "Linear16Value":
        if len(data) != 2:
            raise EncodingError(f"LINEAR16 payload must be 2 bytes, got {len(data)}")
        return cls(int.from_bytes(data, "little"), exponent)


def encode_linear16(volts: float, exponent: int = DEFAULT_EXPONENT) -> Linear16Value:
    """Round ``volts`` to the nearest multiple of ``2**exponent``."""
    _check_exponent(exponent)
    if volts < 0 or math.isnan(volts):
        raise EncodingError(f"LINEAR16 cannot encode {volts} V")
    raw = _round_half_up(math.ldexp(volts, -exponent))
    if raw > 0xFFFF:
        raise EncodingError(f"{volts} V overflows LINEAR16 at exponent {exponent}")
    return Linear16Value(raw, exponent)


def decode_linear16(raw: int, exponent: int = DEFAULT_EXPONENT) -> float:
    return math.ldexp(raw, exponent)


def linear16_ulp(exponent: int = DEFAULT_EXPONENT) -> float:
    return math.ldexp(1.0, exponent)


@dataclass(frozen=True)
class Linear11Value:
    mantissa: int
    exponent: int

    def __post_init__(self):
        if not LINEAR11_MANTISSA_MIN <= self.mantissa <= LINEAR11_MANTISSA_MAX:
            raise EncodingError(f"LINEAR11 mantissa {self.mantissa} outside 11 bits")
        _check_exponent(self.exponent)

    @property
    def value(self) -> float:
        return math.ldexp(self.mantissa, self.exponent)

    @property
    def word(self) -> int:
        return ((self.exponent & 0x1F) << 11) | (self.mantissa & 0x7FF)

    @classmethod
    def from_word(cls, word: int) -> "Linear11Value":
        if not 0 <= word <= 0xFFFF:
            raise EncodingError(f"LINEAR11 word {word:#x} outside 16 bits")
        exponent = word >> 11
        mantissa = word & 0x7FF
        if exponent > 15:
            exponent -= 32
        if mantissa > 1023:
            mantissa -= 2048
        return cls(mantissa, exponent)


def encode_linear11(value: float) -> int:
    """Encode ``value`` as a LINEAR11 word.

    The exponent with the smallest quantization error wins; on ties the
    smaller exponent (finer resolution) is kept.
    """
    if math.isnan(value) or math.isinf(value):
        raise EncodingError(f"LINEAR11 cannot encode {value}")
    best = None
    for exponent in range(EXPONENT_MIN, EXPONENT_MAX + 1):
        scaled = math.ldexp(value, -exponent)
        mantissa = _round_half_up(scaled) if scaled >= 0 else -_round_half_up(-scaled)
        if not LINEAR11_MANTISSA_MIN <= mantissa <= LINEAR11_MANTISSA_MAX:
            continue
        error = abs(math.ldexp(mantissa, exponent) - value)
        if best is None or error < best[0]:
            best = (error, Linear11Value(mantissa, exponent))
    if best is None:
        raise EncodingError(f"{value} overflows LINEAR11")
    return best[1].word


def decode_linear11(word: int) -> float:
    return Linear11Value.from_word(word).value


# -- transactions and frames ---------------------------------------------------


@dataclass(frozen=True)
class Transaction:
    """One atomic bus operation.

    ``payload`` holds the bytes the master writes after the command byte;
    reads carry no payload and expect ``read_length`` bytes back.
    """

    primitive: Primitive
    address: int
    command: Command
    payload: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "command", Command(self.command))
        object.__setattr__(self, "payload", bytes(self.payload))
        if not 0 <= self.address <= 0x7F:
            raise FrameError(f"address {self.address} is not a 7-bit address")
        if self.primitive not in SUPPORTED[self.command]:
            raise FrameError(f"{self.primitive.value} is not supported for {self.command.name}")
        expected = 0 if self.primitive.is_read else self.primitive.data_length
        if len(self.payload) != expected:
            raise FrameError(
                f"{self.primitive.value} carries {expected} payload bytes, got {len(self.payload)}"
            )

    @property
    def read_length(self) -> int:
        return self.primitive.data_length if self.primitive.is_read else 0

    def __str__(self) -> str:
        text = f"{self.primitive.value}({self.address}, {self.command.name}"
        if self.payload:
            text += ", " + self.payload.hex()
        return text + ")"


def send_byte(address: int, command: Command) -> Transaction:
    return Transaction(Primitive.SEND_BYTE, address, command)


def write_byte(address: int, command: Command, value: int) -> Transaction:
    return Transaction(Primitive.WRITE_BYTE, address, command, bytes([value]))


def write_word(address: int, command: Command, value: int) -> Transaction:
    return Transaction(Primitive.WRITE_WORD, address, command, value.to_bytes(2, "little"))


def read_byte(address: int, command: Command) -> Transaction:
    return Transaction(Primitive.READ_BYTE, address, command)


def read_word(address: int, command: Command) -> Transaction:
    return Transaction(Primitive.READ_WORD, address, command)


class EventKind(Enum):
    START = "S"
    REPEATED_START = "Sr"
    STOP = "P"
    BYTE = "B"


@dataclass(frozen=True)
class BusEvent:
    """A bus condition or a byte with its ACK slot.

    ``value`` is None for bytes driven by the slave that are not yet known.
    ``ack`` is the expected level of the ninth clock: True for ACK. The master
    NACKs the last byte it reads.
    """

    kind: EventKind
    value: Optional[int] = None
    ack: bool = True
    from_master: bool = True


START = BusEvent(EventKind.START)
REPEATED_START = BusEvent(EventKind.REPEATED_START)
STOP = BusEvent(EventKind.STOP)


def _byte(value: Optional[int], ack: bool = True, from_master: bool = True) -> BusEvent:
    return BusEvent(EventKind.BYTE, value, ack, from_master)


@dataclass(frozen=True)
class WireFrame:
    events: tuple = field(default_factory=tuple)

    @property
    def data_bytes(self) -> list:
        return [e.value for e in self.events if e.kind is EventKind.BYTE]

    def __len__(self) -> int:
        return len(self.events)


def frame(txn: Transaction, read_data: Optional[bytes] = None) -> WireFrame:
    """Serialize ``txn`` into bus events.

    For reads, ``read_data`` fills in the slave-driven bytes; otherwise they
    are left as None.
    """
    addr_w = (txn.address << 1) | WRITE
    events = [START, _byte(addr_w), _byte(int(txn.command))]
    if not txn.primitive.is_read:
        events.extend(_byte(b) for b in txn.payload)
    else:
        if read_data is not None and len(read_data) != txn.read_length:
            raise FrameError(f"expected {txn.read_length} read bytes, got {len(read_data)}")
        events.append(REPEATED_START)
        events.append(_byte((txn.address << 1) | READ))
        for i in range(txn.read_length):
            value = None if read_data is None else read_data[i]
            last = i == txn.read_length - 1
            events.append(_byte(value, ack=not last, from_master=False))
    events.append(STOP)
    return WireFrame(tuple(events))


def parse(wire: WireFrame) -> Transaction:
    """Recover the transaction described by ``wire``."""
    events = list(wire.events)
    if not events:
        raise FrameParseError(0, "empty frame")
    if events[0].kind is not EventKind.START:
        raise FrameParseError(0, "frame must begin with Start")
    if events[-1].kind is not EventKind.STOP:
        raise FrameParseError(len(events) - 1, "frame must end with Stop")
    for i, e in enumerate(events[1:-1], start=1):
        if e.kind in (EventKind.START, EventKind.STOP):
            raise FrameParseError(i, f"unexpected {e.kind.name} inside frame")

    if len(events) < 4 or events[1].kind is not EventKind.BYTE:
        raise FrameParseError(1, "missing address byte")
    addr_byte = events[1].value
    if addr_byte is None or addr_byte & 1 != WRITE:
        raise FrameParseError(1, "first address byte must carry the write bit")
    address = addr_byte >> 1

    if events[2].kind is not EventKind.BYTE or events[2].value is None:
        raise FrameParseError(2, "missing command byte")
    try:
        command = Command(events[2].value)
    except ValueError:
        raise FrameParseError(2, f"unknown command {events[2].value:#04x}") from None

    rest = events[3:-1]
    restarts = [i for i, e in enumerate(rest, start=3) if e.kind is EventKind.REPEATED_START]
    if not restarts:
        for i, e in enumerate(rest, start=3):
            if e.value is None or not e.from_master:
                raise FrameParseError(i, "write payload byte without a value")
        payload = bytes(e.value for e in rest)
        primitive = {0: Primitive.SEND_BYTE, 1: Primitive.WRITE_BYTE, 2: Primitive.WRITE_WORD}.get(
            len(payload)
        )
        if primitive is None:
            raise FrameParseError(3 + len(payload), f"bad write length {len(payload)}")
    else:
        at = restarts[0]
        if at != 3 or len(restarts) > 1:
            raise FrameParseError(restarts[-1] if at == 3 else at, "misplaced RepeatedStart")
        if len(events) < 6 or events[4].kind is not EventKind.BYTE:
            raise FrameParseError(4, "missing read address byte")
        if events[4].value != (address << 1) | READ:
            raise FrameParseError(4, "read address does not match write address")
        n = len(events) - 6
        primitive = {1: Primitive.READ_BYTE, 2: Primitive.READ_WORD}.get(n)
        if primitive is None:
            raise FrameParseError(len(events) - 1, f"bad read length {n}")
        payload = b""
    try:
        return Transaction(primitive, address, command, payload)
    except FrameError as exc:
        raise FrameParseError(2, str(exc)) from None


# -- golden vectors ------------------------------------------------------------


def _hex(value: Optional[int]) -> str:
    return ".." if value is None else f"{value:02X}"


def format_golden(txn: Transaction) -> str:
    """Render ``txn`` as one golden-vector line.

    ``WriteWord 54 VOUT_COMMAND 66 0E -> 6C 21 66 0E``; a repeated start is
    written ``Sr`` and slave-driven bytes ``..``.
    """
    lhs = [txn.primitive.value, str(txn.address), txn.command.name]
    lhs += [f"{b:02X}" for b in txn.payload]
    rhs = []
    for e in frame(txn).events:
        if e.kind is EventKind.BYTE:
            rhs.append(_hex(e.value))
        elif e.kind is EventKind.REPEATED_START:
            rhs.append("Sr")
    return " ".join(lhs) + " -> " + " ".join(rhs)


def parse_golden_line(line: str) -> tuple:
    """Return ``(transaction, expected_tokens)`` for one golden-vector line."""
    lhs, sep, rhs = line.partition("->")
    if not sep:
        raise ValueError(f"golden line lacks '->': {line!r}")
    prim, addr, cmd, *payload = lhs.split()
    txn = Transaction(Primitive(prim), int(addr), Command[cmd], bytes(int(b, 16) for b in payload))
    return txn, rhs.split()


def load_golden(lines: Iterable[str]) -> list:
    vectors = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            vectors.append(parse_golden_line(line))
    return vectors


def supported_transactions(addresses: Sequence[int], fill: int = 0x00) -> list:
    """Every supported (address, command, primitive) combination."""
    out = []
    for address in addresses:
        for command, primitives in SUPPORTED.items():
            for primitive in primitives:
                payload = b"" if primitive.is_read else bytes([fill] * primitive.data_length)
                out.append(Transaction(primitive, address, command, payload))
    return out
