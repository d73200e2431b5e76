"""Calibrated stand-in models for a GTX transceiver link under undervolting.

Every model is keyed by link speed (Gbps) and, for BER and received size, by
sweep mode. Curves are driven entirely by a calibration file; the bundled
``kc705-gtx-paper`` file reproduces the published KC705 observations.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from scipy.interpolate import PchipInterpolator

MODES = ("both-swept", "rx-swept", "tx-swept")
SIDES = ("tx", "rx")
BER_MAX = 0.5
_RANGE_SLACK = 1e-3

Seed = Union[int, np.random.Generator, None]


class CalibrationError(KeyError):
    """Unknown (speed, mode/side) pair or malformed calibration data."""


def swept_sides(mode: str) -> Tuple[str, ...]:
    if mode == "both-swept":
        return ("tx", "rx")
    if mode == "rx-swept":
        return ("rx",)
    if mode == "tx-swept":
        return ("tx",)
    raise CalibrationError(f"unknown sweep mode {mode!r}")


@dataclass(frozen=True)
class BerModel:
    onset_voltage: float
    anchors: Tuple[Tuple[float, float], ...]  # (V, BER), V strictly decreasing

    def __post_init__(self):
        vs = [a[0] for a in self.anchors]
        bers = [a[1] for a in self.anchors]
        if not self.anchors:
            raise CalibrationError("BER model needs at least one anchor")
        if any(b >= a for a, b in zip(vs, vs[1:])):
            raise CalibrationError("BER anchors must be strictly decreasing in voltage")
        if any(b < a for a, b in zip(bers, bers[1:])):
            raise CalibrationError("BER must not decrease as voltage drops")
        if not all(0 < b <= BER_MAX for b in bers):
            raise CalibrationError("anchor BER must lie in (0, 0.5]")
        if vs[0] != self.onset_voltage:
            raise CalibrationError("first BER anchor must sit at the onset voltage")
        # ascending copies for interpolation
        object.__setattr__(self, "_v", vs[::-1])
        object.__setattr__(self, "_log", [math.log10(b) for b in bers][::-1])

    def __call__(self, voltage: float) -> float:
        if voltage >= self.onset_voltage:
            return 0.0
        v, lg = self._v, self._log
        if voltage <= v[0]:
            return min(10.0 ** lg[0], BER_MAX)
        i = bisect.bisect_right(v, voltage)
        if v[i - 1] == voltage:
            return min(10.0 ** lg[i - 1], BER_MAX)
        frac = (voltage - v[i - 1]) / (v[i] - v[i - 1])
        return min(10.0 ** (lg[i - 1] + frac * (lg[i] - lg[i - 1])), BER_MAX)


@dataclass(frozen=True)
class PowerModel:
    """Monotone piecewise-cubic (PCHIP) curve through (V, W) anchors."""

    anchors: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        pts = sorted(self.anchors)
        vs = np.array([p[0] for p in pts])
        ws = np.array([p[1] for p in pts])
        if len(pts) < 2:
            raise CalibrationError("power model needs two or more anchors")
        if np.any(np.diff(vs) <= 0) or np.any(np.diff(ws) <= 0):
            raise CalibrationError("power anchors must increase strictly with voltage")
        object.__setattr__(self, "_curve", PchipInterpolator(vs, ws, extrapolate=True))

    def __call__(self, voltage: float) -> float:
        for v, w in self.anchors:
            if v == voltage:
                return w
        return float(self._curve(voltage))


@dataclass(frozen=True)
class LatencyModel:
    baseline: float
    excursion_onset: float
    spike_probability: float
    spike_mean: float

    def __call__(self, voltage: float, rng: np.random.Generator) -> float:
        if voltage >= self.excursion_onset:
            return self.baseline
        if rng.random() < self.spike_probability:
            return self.baseline + rng.exponential(self.spike_mean)
        return self.baseline


@dataclass(frozen=True)
class CollapseModel:
    collapse_voltage: Optional[float]
    payload: int
    decay: float
    jitter: float

    def __call__(self, voltage: float, rng: np.random.Generator) -> int:
        if self.collapse_voltage is None or voltage >= self.collapse_voltage:
            return self.payload
        envelope = math.exp(-(self.collapse_voltage - voltage) / self.decay)
        fraction = envelope * (1.0 - self.jitter * rng.random())
        return min(int(self.payload * fraction), self.payload - 1)


@dataclass(frozen=True)
class SpeedCalibration:
    speed: float
    reference_clock_mhz: Optional[float]
    latency: LatencyModel
    power: Dict[str, PowerModel]
    ber: Dict[str, BerModel]
    collapse: Dict[str, CollapseModel]


@dataclass(frozen=True)
class LinkCalibration:
    name: str
    payload: int
    valid_range: Tuple[float, float]
    speeds: Dict[float, SpeedCalibration]

    def speed(self, speed: float) -> SpeedCalibration:
        try:
            return self.speeds[float(speed)]
        except KeyError:
            raise CalibrationError(f"no calibration for {speed} Gbps") from None

    def _check_voltage(self, voltage: float) -> None:
        lo, hi = self.valid_range
        if not lo - _RANGE_SLACK <= voltage <= hi + _RANGE_SLACK:
            raise ValueError(f"{voltage} V is outside the calibrated range [{lo}, {hi}]")

    def ber_at(self, voltage: float, speed: float, mode: str) -> float:
        self._check_voltage(voltage)
        model = self.speed(speed).ber.get(mode)
        if model is None:
            raise CalibrationError(f"no BER calibration for {speed} Gbps, mode {mode!r}")
        return model(voltage)

    def power_at(self, voltage: float, speed: float, side: str) -> float:
        self._check_voltage(voltage)
        model = self.speed(speed).power.get(side)
        if model is None:
            raise CalibrationError(f"no power calibration for {speed} Gbps, side {side!r}")
        return model(voltage)

    def latency_at(self, voltage: float, speed: float, seed: Seed = None) -> float:
        self._check_voltage(voltage)
        return self.speed(speed).latency(voltage, _rng(seed))

    def received_bytes_at(self, voltage: float, speed: float, mode: str, seed: Seed = None) -> int:
        self._check_voltage(voltage)
        model = self.speed(speed).collapse.get(mode)
        if model is None:
            raise CalibrationError(f"no collapse calibration for {speed} Gbps, mode {mode!r}")
        return model(voltage, _rng(seed))

    def modes(self, speed: float) -> Tuple[str, ...]:
        return tuple(self.speed(speed).ber)


def _rng(seed: Seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _pairs(rows: Sequence) -> Tuple[Tuple[float, float], ...]:
    return tuple((float(v), float(x)) for v, x in rows)


def load_calibration(source=None) -> LinkCalibration:
    """Load a calibration YAML file, or the bundled ``kc705-gtx-paper``."""
    if source is None or source == "kc705-gtx-paper":
        text = resources.files("railctl.data").joinpath("kc705-gtx-paper.yaml").read_text()
    else:
        text = Path(source).read_text()
    doc = yaml.safe_load(text)
    payload = int(doc["payload_bytes"])
    exc = doc.get("latency_excursion", {})
    col = doc.get("collapse", {})
    speeds = {}
    for key, entry in doc["speeds"].items():
        speed = float(key)
        lat = entry["latency"]
        latency = LatencyModel(
            baseline=float(lat["baseline_s"]),
            excursion_onset=float(lat["excursion_onset_v"]),
            spike_probability=float(exc.get("probability", 0.5)),
            spike_mean=float(exc.get("mean_s", 3e-7)),
        )
        power = {side: PowerModel(_pairs(rows)) for side, rows in entry["power"].items()}
        missing = set(SIDES) - set(power)
        if missing:
            raise CalibrationError(f"{speed} Gbps lacks power anchors for {sorted(missing)}")
        ber, collapse = {}, {}
        for mode, m in entry["modes"].items():
            if mode not in MODES:
                raise CalibrationError(f"unknown sweep mode {mode!r}")
            ber[mode] = BerModel(float(m["ber_onset_v"]), _pairs(m["ber_anchors"]))
            cv = m.get("collapse_v")
            collapse[mode] = CollapseModel(
                None if cv is None else float(cv),
                payload,
                float(col.get("decay_v", 0.01)),
                float(col.get("jitter", 0.2)),
            )
        speeds[speed] = SpeedCalibration(
            speed, entry.get("reference_clock_mhz"), latency, power, ber, collapse
        )
    lo, hi = doc.get("valid_range_v", [0.7, 1.0])
    return LinkCalibration(str(doc.get("name", "unnamed")), payload, (float(lo), float(hi)), speeds)
