"""On-disk formats: binary event logs, state snapshots, gate tables, manifests.

Event-log format (little-endian, append-friendly, mmap-able):

    header (32 bytes): magic "SBMX" | version u16 | dim u16 | N u64
                       | horizon f64 | event count u64
    records (packed):  time f64 | position dim x f8 | sign i8

All text artifacts (CSV, JSON) are written with deterministic float
formatting (shortest round-trip repr) and sorted keys so identical runs are
byte-identical regardless of thread count.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .events import BranchEventLog
from .paths import MeasurePath, TimeGrid

MAGIC = b"SBMX"
VERSION = 1
_HEADER = struct.Struct("<4sHHQdQ")


class EventLogFormatError(ValueError):
    """Corrupt or unsupported event-log file."""


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("time", "<f8"), ("pos", "<f8", (dim,)), ("sign", "<i1")], align=False)


def write_event_log(path, log: BranchEventLog) -> None:
    path = Path(path)
    n = len(log)
    rec = np.empty(n, dtype=_record_dtype(log.dim))
    rec["time"] = log.times
    rec["pos"] = log.positions.reshape(n, log.dim)
    rec["sign"] = log.signs
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, log.dim, log.n_quantum, log.horizon, n))
        rec.tofile(fh)


def read_event_log(path) -> BranchEventLog:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise EventLogFormatError(
            f"{path}: truncated header, {len(raw)} bytes < {_HEADER.size} (byte offset 0)")
    magic, version, dim, n_quantum, horizon, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise EventLogFormatError(f"{path}: bad magic {magic!r} (byte offset 0)")
    if version != VERSION:
        raise EventLogFormatError(
            f"{path}: unsupported version {version}, expected {VERSION} (byte offset 4)")
    if dim < 1:
        raise EventLogFormatError(f"{path}: invalid dimension {dim} (byte offset 6)")
    dtype = _record_dtype(dim)
    expected = _HEADER.size + count * dtype.itemsize
    if len(raw) != expected:
        raise EventLogFormatError(
            f"{path}: expected {expected} bytes for {count} events, found {len(raw)} "
            f"(byte offset {min(len(raw), expected)})")
    rec = np.frombuffer(raw, dtype=dtype, count=count, offset=_HEADER.size)
    return BranchEventLog(rec["time"].copy(), rec["pos"].reshape(count, dim).copy(),
                          rec["sign"].copy(), int(n_quantum), float(horizon))


def write_states(path, mp: MeasurePath) -> None:
    """State snapshots + grid as a compressed npz companion to the event log."""
    np.savez_compressed(
        Path(path),
        positions_flat=mp.positions_flat,
        masses_flat=mp.masses_flat,
        offsets=mp.offsets,
        counts=mp.counts if mp.counts is not None else np.empty(0, dtype=np.int64),
        horizon=np.float64(mp.grid.horizon),
        n_steps=np.int64(mp.grid.n_steps),
        mass_quantum=np.float64(mp.mass_quantum if mp.mass_quantum else 0.0),
    )


def read_states(path, events: BranchEventLog | None = None) -> MeasurePath:
    with np.load(Path(path)) as data:
        grid = TimeGrid(float(data["horizon"]), int(data["n_steps"]))
        counts = data["counts"]
        q = float(data["mass_quantum"])
        return MeasurePath(
            grid,
            flat=(data["positions_flat"], data["masses_flat"], data["offsets"]),
            events=events,
            counts=counts if counts.size else None,
            mass_quantum=q if q > 0 else None,
        )


# -- deterministic text artifacts --------------------------------------------

def fmt(x) -> str:
    """Deterministic scalar formatting: shortest round-trip for floats."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
