"""Settling-time detection on sampled voltage traces.

The stable level is the mean of the last ``window`` samples. A sample is
stable when it lies inside ``mean * (1 +/- band_pct/100)``, and the trace
settles at the first sample that starts ``window`` consecutive stable
samples. Settling time is measured from the first sample of the trace.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

DEFAULT_WINDOW = 5
DEFAULT_BAND_PCT = 1.0
ABSOLUTE_BAND_V = 1e-3  # fallback half-width when the stable level is ~0 V
ZERO_LEVEL_V = 1e-6


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class VoltageTrace:
    times: Tuple[float, ...]
    voltages: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        object.__setattr__(self, "voltages", tuple(float(v) for v in self.voltages))
        if len(self.times) != len(self.voltages):
            raise TraceError("times and voltages differ in length")
        if not self.times:
            raise TraceError("a trace needs at least one sample")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise TraceError("sample times must be strictly increasing")

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[float, float]]) -> "VoltageTrace":
        pairs = list(pairs)
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    def __len__(self) -> int:
        return len(self.times)

    def shifted(self, t0: float) -> "VoltageTrace":
        return VoltageTrace(tuple(t - t0 for t in self.times), self.voltages)


@dataclass(frozen=True)
class SettlingParams:
    window: int = DEFAULT_WINDOW
    band_pct: float = DEFAULT_BAND_PCT

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.band_pct <= 0:
            raise ValueError("band_pct must be positive")


@dataclass(frozen=True)
class SettlingReport:
    params: SettlingParams
    stable_average: float
    band: Tuple[float, float]
    t_s: Optional[float]
    settling_time: Optional[float]
    absolute_band: bool = False

    @property
    def settled(self) -> bool:
        return self.t_s is not None

    def as_text(self) -> str:
        fmt = lambda x: "absent" if x is None else repr(x)  # noqa: E731
        lines = [
            f"window_n = {self.params.window}",
            f"band_pct = {self.params.band_pct!r}",
            f"absolute_band = {str(self.absolute_band).lower()}",
            f"stable_average_v = {self.stable_average!r}",
            f"band_low_v = {self.band[0]!r}",
            f"band_high_v = {self.band[1]!r}",
            f"t_s = {fmt(self.t_s)}",
            f"settling_time_s = {fmt(self.settling_time)}",
        ]
        return "\n".join(lines) + "\n"


def stable_average(trace: VoltageTrace, window: int = DEFAULT_WINDOW) -> float:
    if window < 1:
        raise ValueError("window must be at least 1")
    if len(trace) < window:
        raise TraceError(f"trace has {len(trace)} samples, fewer than window {window}")
    tail = trace.voltages[-window:]
    return sum(tail) / window


def stability_band(level: float, band_pct: float) -> Tuple[Tuple[float, float], bool]:
    """Band around ``level``; falls back to +/-1 mV when the level is ~0 V."""
    if abs(level) < ZERO_LEVEL_V:
        return (level - ABSOLUTE_BAND_V, level + ABSOLUTE_BAND_V), True
    half = abs(level) * band_pct / 100.0
    return (level - half, level + half), False


def first_stable_run(voltages: Sequence[float], low: float, high: float, window: int) -> Optional[int]:
    """Index of the first sample beginning ``window`` consecutive in-band samples."""
    run = 0
    for i, v in enumerate(voltages):
        if low <= v <= high:
            run += 1
            if run == window:
                return i - window + 1
        else:
            run = 0
    return None


def settling_time(trace: VoltageTrace, params: SettlingParams = SettlingParams()) -> SettlingReport:
    level = stable_average(trace, params.window)
    band, absolute = stability_band(level, params.band_pct)
    index = first_stable_run(trace.voltages, band[0], band[1], params.window)
    if index is None:
        t_s = elapsed = None
    else:
        t_s = trace.times[index]
        elapsed = t_s - trace.times[0]
    return SettlingReport(params, level, band, t_s, elapsed, absolute)


def tail_is_stable(voltages: Sequence[float], params: SettlingParams, depth: int) -> bool:
    """True when the last ``depth`` samples sit inside the band of the last-window mean."""
    if len(voltages) < max(depth, params.window):
        return False
    level = sum(voltages[-params.window:]) / params.window
    (low, high), _ = stability_band(level, params.band_pct)
    return all(low <= v <= high for v in voltages[-depth:])


TRACE_HEADER = ["time_s", "voltage_v"]


def write_trace_csv(trace: VoltageTrace, path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_HEADER)
            for t, v in zip(trace.times, trace.voltages):
                writer.writerow([repr(t), repr(v)])
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc}") from exc


def read_trace_csv(path) -> VoltageTrace:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRACE_HEADER:
            raise TraceError(f"{path}: expected header {','.join(TRACE_HEADER)}")
        return VoltageTrace.from_pairs((float(r["time_s"]), float(r["voltage_v"])) for r in reader)
