import numpy as np
import pytest

from superbm.events import BranchEventLog, EventLogError
from superbm.storage import (EventLogFormatError, read_event_log, read_states, write_csv,
                             write_event_log, write_json, write_states, sha256_file)


def make_log(n=10, dim=1, seed=0, horizon=1.0, n_quantum=100):
    rng = np.random.default_rng(seed)
    times = np.sort(rng.uniform(1e-6, horizon, n))
    pos = rng.normal(size=(n, dim))
    signs = rng.choice(np.array([-1, 1], dtype=np.int8), n)
    return BranchEventLog(times, pos, signs, n_quantum, horizon)


def test_log_validation():
    with pytest.raises(EventLogError):
        BranchEventLog(np.array([0.5, 0.2]), np.zeros((2, 1)),
                       np.array([1, -1], dtype=np.int8), 10, 1.0)
    with pytest.raises(EventLogError):
        BranchEventLog(np.array([0.1]), np.zeros((1, 1)), np.array([2], dtype=np.int8),
                       10, 1.0)
    with pytest.raises(EventLogError):
        BranchEventLog(np.array([0.0]), np.zeros((1, 1)), np.array([1], dtype=np.int8),
                       10, 1.0)
    with pytest.raises(EventLogError):
        BranchEventLog(np.array([0.1, 0.2]), np.zeros((1, 1)),
                       np.array([1, 1], dtype=np.int8), 10, 1.0)


def test_log_negative_population_guard():
    log = BranchEventLog(np.array([0.1, 0.2]), np.zeros((2, 1)),
                         np.array([-1, -1], dtype=np.int8), 10, 1.0)
    log.validate_against_initial(2)
    with pytest.raises(EventLogError, match="negative"):
        log.validate_against_initial(1)


def test_log_event_access_and_count():
    log = make_log(20)
    assert len(log) == 20
    ev = log.event(3)
    assert ev.time == log.times[3] and ev.sign in (-1, 1)
    assert log.count_upto(log.times[4]) >= 5
    assert log.count_upto(0.0) == 0


def test_roundtrip_empty(tmp_path):
    log = BranchEventLog.empty(2, 50, 0.5)
    f = tmp_path / "empty.sbmx"
    write_event_log(f, log)
    back = read_event_log(f)
    assert back.equals(log)
    assert back.dim == 2 and back.n_quantum == 50 and back.horizon == 0.5


def test_roundtrip_large_byte_identical(tmp_path):
    log = make_log(100_000, dim=1, seed=3)
    assert len(log) == 100_000
    f1, f2 = tmp_path / "a.sbmx", tmp_path / "b.sbmx"
    write_event_log(f1, log)
    back = read_event_log(f1)
    assert back.equals(log)
    write_event_log(f2, back)
    assert f1.read_bytes() == f2.read_bytes()


def test_roundtrip_multidim(tmp_path):
    log = make_log(100, dim=3)
    f = tmp_path / "d3.sbmx"
    write_event_log(f, log)
    assert read_event_log(f).equals(log)


def test_version_bump_rejected(tmp_path):
    f = tmp_path / "v.sbmx"
    write_event_log(f, make_log(5))
    raw = bytearray(f.read_bytes())
    raw[4] = 99  # version field
    f.write_bytes(bytes(raw))
    with pytest.raises(EventLogFormatError, match="version"):
        read_event_log(f)


def test_bad_magic_rejected(tmp_path):
    f = tmp_path / "m.sbmx"
    write_event_log(f, make_log(5))
    raw = bytearray(f.read_bytes())
    raw[0] = ord("X")
    f.write_bytes(bytes(raw))
    with pytest.raises(EventLogFormatError, match="magic"):
        read_event_log(f)


def test_truncation_rejected_with_offset(tmp_path):
    f = tmp_path / "t.sbmx"
    write_event_log(f, make_log(5))
    raw = f.read_bytes()
    f.write_bytes(raw[:-3])
    with pytest.raises(EventLogFormatError, match="byte offset"):
        read_event_log(f)
    f.write_bytes(raw[:10])
    with pytest.raises(EventLogFormatError):
        read_event_log(f)


def test_states_roundtrip(tmp_path, smoke_path):
    f = tmp_path / "states.npz"
    write_states(f, smoke_path)
    back = read_states(f, events=smoke_path.events)
    assert np.array_equal(back.positions_flat, smoke_path.positions_flat)
    assert np.array_equal(back.offsets, smoke_path.offsets)
    assert np.array_equal(back.counts, smoke_path.counts)
    assert back.grid == smoke_path.grid
    assert back.mass_quantum == smoke_path.mass_quantum
    assert back.events is smoke_path.events


def test_csv_and_json_deterministic(tmp_path):
    rows = [["a", 1, 0.1, True], ["b", 2, float(np.float64(1) / 3), False]]
    f1, f2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_csv(f1, ["name", "i", "x", "ok"], rows)
    write_csv(f2, ["name", "i", "x", "ok"], rows)
    assert f1.read_bytes() == f2.read_bytes()
    assert "0.3333333333333333" in f1.read_text()
    j1, j2 = tmp_path / "a.json", tmp_path / "b.json"
    write_json(j1, {"b": np.float64(2.5), "a": [np.int64(1), {"z": np.bool_(True)}]})
    write_json(j2, {"a": [1, {"z": True}], "b": 2.5})
    assert j1.read_bytes() == j2.read_bytes()


def test_sha256_file(tmp_path):
    f = tmp_path / "x.bin"
    f.write_bytes(b"abc")
    assert sha256_file(f) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
