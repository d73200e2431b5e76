import csv

import pytest

from railctl.bus import BusConfig, BusEngine, SCL_100K, SCL_400K, transaction_duration
from railctl.manager import (
    HARDWARE,
    SOFTWARE,
    ControllerBusyError,
    LaneMap,
    Mode,
    Opcode,
    Outcome,
    PowerManager,
    Request,
    UnknownLaneError,
    expand,
    parse_request_script,
    write_status_csv,
)
from railctl.pmbus import Command, Primitive, read_word, write_byte, write_word
from railctl.regulator import load_profile

PROFILE = load_profile()
LANES = LaneMap.from_profile(PROFILE)


def make(path=HARDWARE, scl=SCL_400K, drop=None):
    devices = PROFILE.build_devices()
    if drop is not None:
        devices.pop(drop)
    engine = BusEngine(BusConfig(scl), devices.values())
    return PowerManager(engine, LANES, path), devices


@pytest.mark.parametrize("lane,target", [(9, (54, 1)), (6, (53, 2)), (0, (52, 0))])
def test_resolve(lane, target):
    assert LANES.resolve(lane) == target


def test_unknown_lane():
    with pytest.raises(UnknownLaneError):
        LANES.resolve(11)


def test_set_voltage_golden():
    seq = expand(Request(Opcode.SET_VOLTAGE, 9, 0.9), LANES, {})
    assert seq == [
        write_byte(54, Command.PAGE, 0x01),
        write_word(54, Command.VOUT_UV_WARN_LIMIT, 0x0CF6),
        write_word(54, Command.VOUT_UV_FAULT_LIMIT, 0x0C3D),
        write_word(54, Command.POWER_GOOD_ON, 0x0DAE),
        write_word(54, Command.POWER_GOOD_OFF, 0x0D3F),
        write_word(54, Command.VOUT_COMMAND, 0x0E66),
    ]


def test_get_voltage_cold_and_warm():
    assert expand(Request(Opcode.GET_VOLTAGE, 6), LANES, {}) == [
        write_byte(53, Command.PAGE, 2), read_word(53, Command.READ_VOUT)]
    assert expand(Request(Opcode.GET_VOLTAGE, 6), LANES, {53: 2}) == [read_word(53, Command.READ_VOUT)]


def test_minimal_mode_and_clear_status():
    seq = expand(Request(Opcode.SET_VOLTAGE, 6, 0.8), LANES, {53: 2}, Mode.MINIMAL)
    assert [t.command for t in seq] == [Command.VOUT_COMMAND]
    assert expand(Request(Opcode.CLEAR_STATUS, 6), LANES, {}) == []


def test_under_voltage_and_pgood():
    seq = expand(Request(Opcode.SET_UNDER_VOLTAGE, 6, 0.9), LANES, {53: 2})
    assert [t.command for t in seq] == [Command.VOUT_UV_WARN_LIMIT, Command.VOUT_UV_FAULT_LIMIT]
    # fault sits at the same ratio below warn as the default thresholds
    assert int.from_bytes(seq[1].payload, "little") == round(0.85 * 4096)
    for op, cmd in [(Opcode.SET_PGOOD_ON, Command.POWER_GOOD_ON), (Opcode.SET_PGOOD_OFF, Command.POWER_GOOD_OFF)]:
        assert [t.command for t in expand(Request(op, 6, 0.9), LANES, {})] == [Command.PAGE, cmd]


def test_submit_completes():
    mgr, devices = make()
    s = mgr.submit(Request(Opcode.SET_VOLTAGE, 9, 0.9))
    assert s.ok and s.step is None
    assert devices[54].rails[1].setpoint == pytest.approx(0.9, abs=2.5e-4)
    assert mgr.page_cache == {54: 1}
    assert len(mgr.engine.trace) == 6


def test_readback_matches_rail():
    mgr, devices = make()
    s = mgr.submit(Request(Opcode.GET_VOLTAGE, 6))
    assert s.ok and abs(s.value - devices[53].rails[2].output_voltage) <= 2**-12


def test_missing_device_nacks_at_step_zero():
    mgr, _ = make(drop=54)
    s = mgr.submit(Request(Opcode.SET_VOLTAGE, 9, 0.9))
    assert s.outcome is Outcome.NACKED and s.step == 0
    assert 54 not in mgr.page_cache
    assert len(mgr.engine.trace) == 1  # aborted after the failing PAGE


def test_device_error_midway():
    mgr, devices = make()
    devices[53].rails = devices[53].rails[:2]  # PAGE 2 now out of range
    s = mgr.submit(Request(Opcode.GET_VOLTAGE, 6))
    assert s.outcome is Outcome.DEVICE_ERROR and s.step == 0


def test_busy_guard():
    mgr, _ = make()
    mgr._busy = True
    with pytest.raises(ControllerBusyError):
        mgr.submit(Request(Opcode.GET_VOLTAGE, 6))


def test_overhead_charged_per_transaction():
    mgr, _ = make(SOFTWARE)
    s = mgr.submit(Request(Opcode.GET_VOLTAGE, 6))
    expected = 2 * 560e-6 + transaction_duration(Primitive.WRITE_BYTE) + transaction_duration(Primitive.READ_WORD)
    assert s.end_time - s.start_time == pytest.approx(expected)


@pytest.mark.parametrize("path,scl,interval", [
    (HARDWARE, SCL_400K, 0.2e-3), (HARDWARE, SCL_100K, 0.56e-3),
    (SOFTWARE, SCL_400K, 0.68e-3), (SOFTWARE, SCL_100K, 1.04e-3),
])
def test_sample_interval(path, scl, interval):
    mgr, _ = make(path, scl)
    samples = mgr.sample_loop(6, 6)
    gaps = {round(b.time - a.time, 12) for a, b in zip(samples[1:], samples[2:])}
    assert gaps == {round(interval, 12)}
    assert mgr.sample_interval() == pytest.approx(interval)


def test_request_script(tmp_path):
    reqs = parse_request_script([
        "# set then read", "SET_VOLTAGE 9 0.9", "0x5 6", "", "clear_status 0  # trailing",
    ])
    assert reqs == [Request(Opcode.SET_VOLTAGE, 9, 0.9), Request(Opcode.GET_VOLTAGE, 6), Request(Opcode.CLEAR_STATUS, 0)]
    with pytest.raises(ValueError, match="line 1"):
        parse_request_script(["BOGUS 1 2"])
    mgr, _ = make()
    statuses = [mgr.submit(r) for r in reqs]
    path = tmp_path / "s.csv"
    write_status_csv(statuses, path)
    rows = list(csv.DictReader(path.open()))
    assert [r["outcome"] for r in rows] == ["Completed"] * 3
    assert rows[1]["opcode"] == "0x5" and rows[1]["readback_v"] == "1.0"
