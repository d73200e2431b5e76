"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Run with pytest (lines appear in the terminal summary) or directly with
``python tests/test_acceptance.py``.
"""

import random
import sys
import time
from contextlib import contextmanager
from fractions import Fraction
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))
from oracles import corpus, settle_oracle  # noqa: E402

from railctl import harness  # noqa: E402
from railctl.bus import BusConfig, BusEngine, Status  # noqa: E402
from railctl.link import load_calibration  # noqa: E402
from railctl.manager import LaneMap, Mode, Opcode, PowerManager, Request, expand  # noqa: E402
from railctl.pmbus import (  # noqa: E402
    Command,
    decode_linear11,
    encode_linear16,
    frame,
    linear16_ulp,
    parse,
    read_word,
    supported_transactions,
    write_byte,
    write_word,
)
from railctl.regulator import load_profile  # noqa: E402
from railctl.settling import SettlingParams, VoltageTrace, first_stable_run, settling_time  # noqa: E402

RESULTS = {}
PROFILE = load_profile()
CAL = load_calibration()
STEP = 0.001


@contextmanager
def criterion(number, title):
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        RESULTS[number] = ("FAIL", title, f"{type(exc).__name__}: {exc}".splitlines()[0])
        raise
    RESULTS[number] = ("PASS", title, detail.get("note", ""))


def report_lines():
    return [f"[{RESULTS[n][0]}] criterion {n}: {RESULTS[n][1]}" + (f" ({RESULTS[n][2]})" if RESULTS[n][2] else "")
            for n in sorted(RESULTS)]


_sweeps = {}


def sweep(speed=10.0, mode="both-swept", seed=2026):
    key = (speed, mode, seed)
    if key not in _sweeps:
        t0 = time.perf_counter()
        result = harness.run_case_study(harness.CaseStudySweep(speed, mode, seed=seed), CAL, PROFILE)
        _sweeps[key] = (result, time.perf_counter() - t0)
    return _sweeps[key]


def test_1_golden_sequences():
    with criterion(1, "golden SetVoltage / GetVoltage expansions") as d:
        lanes = LaneMap.from_profile(PROFILE)
        w = lambda v: round(Fraction(v) * 4096)  # noqa: E731
        expected = [
            write_byte(54, Command.PAGE, 0x01),
            write_word(54, Command.VOUT_UV_WARN_LIMIT, 0x0CF6),
            write_word(54, Command.VOUT_UV_FAULT_LIMIT, 0x0C3D),
            write_word(54, Command.POWER_GOOD_ON, 0x0DAE),
            write_word(54, Command.POWER_GOOD_OFF, 0x0D3F),
            write_word(54, Command.VOUT_COMMAND, 0x0E66),
        ]
        assert w(0.9) == 0x0E66
        got = expand(Request(Opcode.SET_VOLTAGE, 9, 0.9), lanes, {}, Mode.PROTOTYPE)
        assert got == expected
        assert [t.command for t in got] == [0x00, 0x43, 0x44, 0x5E, 0x5F, 0x21]
        wire = [frame(t).data_bytes for t in got]
        assert wire[0] == [0x6C, 0x00, 0x01] and wire[-1] == [0x6C, 0x21, 0x66, 0x0E]
        readback = expand(Request(Opcode.GET_VOLTAGE, 6), lanes, {})
        assert readback == [write_byte(53, Command.PAGE, 0x02), read_word(53, Command.READ_VOUT)]
        assert frame(readback[1]).data_bytes[:2] == [0x6A, 0x8B]
        d["note"] = "6 + 2 transactions, byte-exact"


def test_2_transition_latency():
    with criterion(2, "1.0->0.5 V settles in 2.3 ms +/-10 %, strictly monotone sweep") as d:
        results = harness.transition_sweep(PROFILE, "decrease")
        times = [r.settling_time for r in results]
        assert all(t is not None for t in times)
        assert all(b > a for a, b in zip(times, times[1:])), times
        big = times[-1]
        assert results[-1].experiment.to_voltage == 0.5
        assert abs(big - 2.3e-3) <= 0.1 * 2.3e-3, big
        d["note"] = "settling " + " / ".join(f"{t * 1e3:.3f}" for t in times) + " ms"


def test_3_interval_matrix():
    with criterion(3, "readback intervals within 20 % of 0.2/0.6/0.8/1.0 ms") as d:
        rows = harness.run_interval_matrix(PROFILE)
        again = harness.run_interval_matrix(PROFILE)
        assert [r.interval for r in rows] == [r.interval for r in again]
        documented = {("hardware", 400_000): 0.20e-3, ("hardware", 100_000): 0.56e-3,
                      ("software", 400_000): 0.68e-3, ("software", 100_000): 1.04e-3}
        for r in rows:
            assert abs(r.interval - r.reference) <= 0.2 * r.reference, r
            assert r.interval == pytest.approx(documented[(r.path, r.scl_rate)], rel=1e-9)
        d["note"] = " / ".join(f"{r.interval * 1e3:.2f}" for r in rows) + " ms"


def test_4_codec_properties():
    with criterion(4, "LINEAR16 round trip, LINEAR11 totality, frame round trip") as d:
        t0 = time.perf_counter()
        rng = random.Random(4)
        ulp = linear16_ulp()
        for _ in range(10_000):
            v = rng.uniform(0.0, 0xFFFF * ulp)
            assert abs(encode_linear16(v).volts - v) <= ulp / 2
        for word in range(0x10000):
            e, m = word >> 11, word & 0x7FF
            e, m = (e - 32 if e > 15 else e), (m - 2048 if m > 1023 else m)
            assert decode_linear11(word) == m * 2.0**e
        txns = supported_transactions(PROFILE.addresses, fill=0x5A)
        assert len(txns) == 45
        for txn in txns:
            assert parse(frame(txn)) == txn
        elapsed = time.perf_counter() - t0
        assert elapsed < 10.0
        d["note"] = f"{elapsed:.2f} s"


def test_5_settling_detector():
    with criterion(5, "settling detector matches brute-force oracle on 1,000 traces") as d:
        cases = corpus(1000, seed=5)
        for times, volts, window, band in cases:
            assert len(volts) <= 200
            trace = VoltageTrace(times, volts)
            got = settling_time(trace, SettlingParams(window, band)).settling_time
            assert got == settle_oracle(times, volts, window, band)
            inf = lambda x: float("inf") if x is None else x  # noqa: E731
            wider = settling_time(trace, SettlingParams(window, band * 2)).settling_time
            assert inf(wider) <= inf(got)
            rep = settling_time(trace, SettlingParams(window, band))
            a = first_stable_run(volts, rep.band[0], rep.band[1], window)
            b = first_stable_run(volts, rep.band[0], rep.band[1], window + 1)
            assert inf(b) >= inf(a)
        d["note"] = f"{len(cases)} traces"


def test_6_case_study_10g(tmp_path):
    with criterion(6, "10 Gbps boundary, BER 1e-6 point, collapse and savings") as d:
        result, elapsed = sweep()
        assert elapsed < 60.0
        pts = result.points
        assert len(pts) == 301
        zero = [p.voltage for p in pts if p.ber == 0.0]
        last_zero = min(v for v in zero if all(q.ber == 0.0 for q in pts if q.voltage >= v))
        assert abs(last_zero - 0.869) <= STEP + 1e-9
        reach = max(p.voltage for p in pts if p.ber >= 1e-6 * (1 - 1e-9))
        assert abs(reach - 0.864) <= STEP + 1e-9
        csv = tmp_path / "s.csv"
        harness.emit_csv(pts, csv)
        pts = harness.read_sweep_csv(csv)
        onset = max(p.voltage for p in pts if p.received_bytes < CAL.payload)
        assert abs(onset - 0.80) <= 0.01 + 1e-9
        rep = harness.savings_report(pts)
        assert abs(rep.boundary_saving - 0.284) <= 0.005
        at_1e6 = next(t for t in rep.thresholds if t.threshold == 1e-6)
        assert abs(at_1e6.saving - 0.293) <= 0.005
        d["note"] = (f"zero-BER {last_zero:.3f} V, 1e-6 at {reach:.3f} V, collapse {onset:.3f} V, "
                     f"saving {rep.boundary_saving:.2%} -> {at_1e6.saving:.2%}, {elapsed:.2f} s")


def test_7_mode_asymmetry(tmp_path):
    with criterion(7, "tx-swept keeps full payload; rx-swept modes collapse near 0.81 V") as d:
        onsets = {}
        for mode in ("tx-swept", "rx-swept", "both-swept"):
            path = tmp_path / f"{mode}.csv"
            harness.emit_csv(sweep(mode=mode)[0].points, path)
            pts = harness.read_sweep_csv(path)
            short = [p.voltage for p in pts if p.received_bytes < CAL.payload]
            onsets[mode] = max(short) if short else None
            if mode == "tx-swept":
                assert not short and min(p.voltage for p in pts) == 0.7
        for mode in ("rx-swept", "both-swept"):
            assert onsets[mode] is not None and abs(onsets[mode] - 0.81) <= 0.01 + 1e-9, onsets
        d["note"] = f"rx-swept {onsets['rx-swept']:.3f} V, both-swept {onsets['both-swept']:.3f} V"


def test_8_speed_onsets():
    with criterion(8, "BER onsets per speed and exact latency baselines") as d:
        published = {10.0: 0.869, 7.5: 0.787, 5.0: 0.745, 2.5: 0.744}
        baseline = {10.0: 100e-9, 7.5: 130e-9, 5.0: 200e-9, 2.5: 410e-9}
        found = {}
        for speed, want in published.items():
            pts = sweep(speed)[0].points
            last_zero = min(p.voltage for p in pts if all(q.ber == 0.0 for q in pts if q.voltage >= p.voltage))
            first_bad = max(p.voltage for p in pts if p.ber > 0)
            assert abs(last_zero - want) <= STEP + 1e-9
            assert abs(first_bad - want) <= STEP + 1e-9
            onset = CAL.speed(speed).latency.excursion_onset
            quiet = [p.latency for p in pts if p.voltage >= onset]
            assert quiet and all(lat == baseline[speed] for lat in quiet)
            found[speed] = last_zero
        d["note"] = ", ".join(f"{s:g}G {v:.3f} V" for s, v in found.items())


def test_9_page_minimality():
    with criterion(9, "PAGE emitted iff cached page changes; no overlapping transactions") as d:
        rng = random.Random(9)
        devices = PROFILE.build_devices()
        engine = BusEngine(BusConfig(), devices.values())
        lanes = LaneMap.from_profile(PROFILE)
        mgr = PowerManager(engine, lanes)
        statuses = []
        for i in range(1000):
            lane = rng.choice(list(lanes))
            spec = PROFILE.rail_for_lane(lane)
            op = rng.choice(list(Opcode))
            value = round(rng.uniform(max(spec.vout_min, 0.9 * spec.nominal), spec.nominal), 3)
            mode = rng.choice([Mode.PROTOTYPE, Mode.MINIMAL])
            pulled = None
            if rng.random() < 0.03:  # transient device loss
                pulled = spec.address
                engine.detach(pulled)
            statuses.append(mgr.submit(Request(op, lane, value), mode))
            if pulled is not None:
                engine.attach(devices[pulled])
            engine.idle(rng.choice([0.0, 1e-5, 1e-4]))

        # independent replay of the cache rule
        cache, pages_seen, cursor = {}, 0, 0
        trace = engine.trace
        for s in statuses:
            n = 0
            while cursor + n < len(trace) and trace[cursor + n].start_time < s.end_time:
                n += 1
            entries = trace[cursor:cursor + n]
            cursor += n
            assert all(s.start_time <= e.start_time and e.end_time <= s.end_time for e in entries)
            if s.request.opcode is Opcode.CLEAR_STATUS:
                assert not entries
                continue
            address, page = lanes.resolve(s.request.lane)
            need_page = cache.get(address) != page
            has_page = bool(entries) and entries[0].transaction.command is Command.PAGE
            assert has_page == need_page
            assert sum(e.transaction.command is Command.PAGE for e in entries) == int(need_page)
            if has_page:
                pages_seen += 1
                if entries[0].status is Status.ACKED:
                    cache[address] = page
                else:
                    cache.pop(address, None)
        assert cursor == len(trace)
        for a, b in zip(trace, trace[1:]):
            assert a.end_time <= b.start_time
        for a, b in zip(statuses, statuses[1:]):
            assert a.end_time <= b.start_time
        failed = sum(not s.ok for s in statuses)
        d["note"] = f"{len(trace)} transactions, {pages_seen} PAGE writes, {failed} injected failures"


if __name__ == "__main__":
    import tempfile

    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for fn in tests:
        try:
            if fn.__code__.co_argcount:
                with tempfile.TemporaryDirectory() as tmp:
                    fn(Path(tmp))
            else:
                fn()
        except Exception:
            pass
    print("\n".join(report_lines()))
    sys.exit(0 if all(r[0] == "PASS" for r in RESULTS.values()) and len(RESULTS) == 9 else 1)
