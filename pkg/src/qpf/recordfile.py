"""Binary record files (``.qpf``).

Layout, all little-endian::

    header  magic b"QPF1" | version u16 | kind u16 | dim u16 | m u16 | dt f64 | count u64
    record  initial_state_id u32 | length u32 | payload

``kind`` is 0 for discrete and 1 for continuous records. For continuous
files ``m`` is the number of measured channels and the payload is
``length * m`` f64 increments, channels contiguous within a step. For
discrete files ``m`` is the number of outcomes, ``dt`` is 0 and the payload
is ``length`` u16 outcomes.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from qpf.diffusive import ContinuousRecord
from qpf.discrete import DiscreteRecord
from qpf.errors import FormatError, MalformedRecord

MAGIC = b"QPF1"
VERSION = 1
DISCRETE, CONTINUOUS = 0, 1
KIND_NAMES = {DISCRETE: "discrete", CONTINUOUS: "continuous"}

_HEADER = struct.Struct("<4sHHHHdQ")
_RECORD = struct.Struct("<II")


@dataclass(frozen=True)
class RecordSet:
    kind: int
    dim: int
    m: int
    dt: float
    records: tuple

    def __len__(self) -> int:
        return len(self.records)


def encode(records: Sequence, dim: int, m: int | None = None) -> bytes:
    """Serialize a homogeneous list of records."""
    records = list(records)
    if records and isinstance(records[0], ContinuousRecord):
        kind = CONTINUOUS
        dts = {rec.dt for rec in records}
        if len(dts) != 1:
            raise FormatError("all continuous records in a file must share one dt")
        dt = dts.pop()
        widths = {rec.increments.shape[1] for rec in records if len(rec)}
        if m is None:
            m = widths.pop() if widths else 0
        elif widths - {m}:
            raise FormatError(f"records have {widths} channels, header says {m}")
    else:
        kind, dt = DISCRETE, 0.0
        if m is None:
            m = max((max(rec.outcomes) for rec in records if len(rec)), default=1)
    parts = [_HEADER.pack(MAGIC, VERSION, kind, dim, m, dt, len(records))]
    for rec in records:
        parts.append(_RECORD.pack(int(rec.initial_state_id), len(rec)))
        if kind == CONTINUOUS:
            if len(rec):
                parts.append(np.ascontiguousarray(rec.increments, dtype="<f8").tobytes())
        else:
            out = np.asarray(rec.outcomes, dtype=np.int64)
            if out.size and (out.min() < 1 or out.max() > m):
                raise FormatError(f"outcome outside 1..{m}")
            parts.append(out.astype("<u2").tobytes())
    return b"".join(parts)


def decode(data: bytes, gain: float = 1.0) -> RecordSet:
    """Parse a record file image; continuous increments are multiplied by ``gain``."""
    if len(data) < _HEADER.size:
        raise MalformedRecord("file shorter than the header", offset=len(data))
    magic, version, kind, dim, m, dt, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, not a qpf record file")
    if version != VERSION:
        raise FormatError(f"unsupported record file version {version} (this reader handles {VERSION})")
    if kind not in KIND_NAMES:
        raise FormatError(f"unknown record kind {kind}")
    if kind == CONTINUOUS and not (np.isfinite(dt) and dt > 0):
        raise FormatError(f"continuous file with invalid dt {dt}")
    offset = _HEADER.size
    records = []
    for n in range(count):
        if offset + _RECORD.size > len(data):
            raise MalformedRecord(f"record {n} header truncated", offset=offset)
        state_id, length = _RECORD.unpack_from(data, offset)
        offset += _RECORD.size
        width = 8 * m if kind == CONTINUOUS else 2
        end = offset + length * width
        if end > len(data):
            raise MalformedRecord(f"record {n} payload truncated", offset=offset)
        if kind == CONTINUOUS:
            inc = np.frombuffer(data, dtype="<f8", count=length * m, offset=offset).reshape(length, m)
            if not np.all(np.isfinite(inc)):
                raise MalformedRecord(f"record {n} contains non-finite increments", offset=offset)
            records.append(ContinuousRecord(dt, inc * gain if gain != 1.0 else inc, state_id))
        else:
            out = np.frombuffer(data, dtype="<u2", count=length, offset=offset)
            if out.size and (out.min() < 1 or out.max() > m):
                raise MalformedRecord(f"record {n} has an outcome outside 1..{m}", offset=offset)
            records.append(DiscreteRecord(tuple(int(y) for y in out), state_id))
        offset = end
    if offset != len(data):
        raise MalformedRecord(f"{len(data) - offset} trailing bytes after {count} records", offset=offset)
    return RecordSet(kind, dim, m, float(dt), tuple(records))


def write_records(path, records: Sequence, dim: int, m: int | None = None) -> int:
    """Write records atomically (temp file + rename); returns the byte count."""
    data = encode(records, dim, m)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(data)


def read_records(path, gain: float = 1.0) -> RecordSet:
    return decode(Path(path).read_bytes(), gain=gain)
