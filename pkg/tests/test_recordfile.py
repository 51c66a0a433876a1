import struct

import numpy as np
import pytest

from qpf.diffusive import MICROSECOND, ContinuousRecord, qubit_fluorescence_preset, simulate_records
from qpf.discrete import DiscreteRecord
from qpf.errors import FormatError, MalformedRecord
from qpf.recordfile import CONTINUOUS, DISCRETE, decode, encode, read_records, write_records
from qpf.suites import PLUS

DT = 0.2 * MICROSECOND


def _continuous(n=4, length=6, seed=0):
    return simulate_records(qubit_fluorescence_preset(), n, length, DT, PLUS, seed)


def test_continuous_round_trip(tmp_path):
    records = _continuous() + [ContinuousRecord(DT, np.zeros((0, 2)), 3)]
    path = tmp_path / "r.qpf"
    size = write_records(path, records, dim=2)
    assert size == path.stat().st_size
    back = read_records(path)
    assert (back.kind, back.dim, back.m, back.dt) == (CONTINUOUS, 2, 2, DT)
    for a, b in zip(records, back.records):
        np.testing.assert_array_equal(a.increments, b.increments)
        assert a.initial_state_id == b.initial_state_id
    assert len(back.records[-1]) == 0


def test_discrete_round_trip():
    records = [DiscreteRecord((1, 3, 2, 2), 0), DiscreteRecord((), 7), DiscreteRecord((3,), 1)]
    back = decode(encode(records, dim=3))
    assert (back.kind, back.m, back.dt) == (DISCRETE, 3, 0.0)
    assert back.records == tuple(records)


def test_size_arithmetic():
    records = _continuous(n=2000, length=50)
    data = encode(records, dim=2)
    assert len(data) == 28 + 2000 * (8 + 50 * 2 * 8)


def test_layout_is_little_endian_channel_major():
    rec = ContinuousRecord(DT, [[1.0, 2.0], [3.0, 4.0]], 9)
    data = encode([rec], dim=2)
    assert data[:4] == b"QPF1"
    assert struct.unpack_from("<HHHHdQ", data, 4) == (1, CONTINUOUS, 2, 2, DT, 1)
    assert struct.unpack_from("<II4d", data, 28) == (9, 2, 1.0, 2.0, 3.0, 4.0)


def test_version_gating():
    data = bytearray(encode(_continuous(1, 2), dim=2))
    data[4:6] = struct.pack("<H", 2)
    with pytest.raises(FormatError, match="version 2"):
        decode(bytes(data))
    with pytest.raises(FormatError, match="magic"):
        decode(b"XXXX" + bytes(data[4:]))


def test_truncation_reports_offset():
    data = encode(_continuous(2, 3), dim=2)
    with pytest.raises(MalformedRecord) as err:
        decode(data[:-5])
    record_two = 28 + (8 + 48) + 8
    assert err.value.offset == record_two
    assert f"offset {record_two}" in str(err.value)
    with pytest.raises(MalformedRecord):
        decode(data[:10])
    with pytest.raises(MalformedRecord, match="trailing"):
        decode(data + b"\0")


def test_non_finite_payload_rejected():
    data = bytearray(encode([ContinuousRecord(DT, [[0.0, 0.0]])], dim=2))
    data[36:44] = struct.pack("<d", float("nan"))
    with pytest.raises(MalformedRecord):
        decode(bytes(data))


def test_gain_scales_increments():
    records = _continuous(1, 4)
    back = decode(encode(records, dim=2), gain=2.5)
    np.testing.assert_allclose(back.records[0].increments, 2.5 * records[0].increments)


def test_mixed_dt_rejected():
    with pytest.raises(FormatError):
        encode([ContinuousRecord(DT, [[0.0]]), ContinuousRecord(2 * DT, [[0.0]])], dim=2)
