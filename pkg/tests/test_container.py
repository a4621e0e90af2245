import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qxkit import codecs
from qxkit.container import (MAGIC, TensorRecord, expected_payload_len, parse, read_container,
                             record_from_quantized, serialize, write_container)
from qxkit.errors import (BadMagicError, ContainerError, PayloadLengthError, TrailingDataError,
                          TruncatedError, UnsupportedVersionError)


def random_model(seed, max_tensors=4):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(int(rng.integers(0, max_tensors + 1))):
        codec = rng.choice(["fp32", "q40", "q4k", "q4x"])
        rows = int(rng.integers(1, 4))
        cols = 256 * int(rng.integers(1, 3))
        x = (rng.standard_normal((rows, cols)) * rng.uniform(0.01, 1)).astype(np.float32)
        name = f"blk.{i}.tensor_{'é' * (i % 2)}{codec}"
        recs.append(record_from_quantized(name, rows, cols, codecs.encode(x, str(codec), seed=i)))
    return recs


def test_empty_model(tmp_path):
    n = write_container(tmp_path / "e.qxt", [])
    blob = (tmp_path / "e.qxt").read_bytes()
    assert n == 16 and blob == MAGIC + struct.pack("<III", 1, 0, 0)
    assert read_container(tmp_path / "e.qxt") == []


def test_q40_payload_size():
    x = np.random.default_rng(0).standard_normal(4096).astype(np.float32)
    rec = record_from_quantized("w", 64, 64, codecs.q40_encode(x))
    assert len(rec.payload) == 2304 == expected_payload_len("q40", 4096)


def test_byte_layout():
    x = np.random.default_rng(0).standard_normal(64).astype(np.float32)
    qt = codecs.encode(x, "q4x")
    rec = record_from_quantized("ab", 1, 64, qt)
    blob = serialize([rec], flags=7)
    expect = (MAGIC + struct.pack("<III", 1, 1, 7) + struct.pack("<I", 2) + b"ab"
              + struct.pack("<QQB", 1, 64, 3) + struct.pack("<Q", 128 + 4 + 34 + 1)
              + qt.to_bytes()[:128] + struct.pack("<I", 1) + qt.to_bytes()[128:])
    assert blob == expect


@given(st.integers(0, 2 ** 31))
def test_round_trip_property(seed):
    recs = random_model(seed)
    blob = serialize(recs)
    back = parse(blob)
    assert back == recs
    assert serialize(back) == blob
    for a, b in zip(recs, back):
        assert np.array_equal(a.to_quantized().dequantize(), b.to_quantized().dequantize())


def test_file_round_trip(tmp_path):
    recs = random_model(1, 6)
    n = write_container(tmp_path / "m.qxt", recs)
    assert n == (tmp_path / "m.qxt").stat().st_size
    assert read_container(tmp_path / "m.qxt") == recs
    assert not (tmp_path / "m.qxt.tmp").exists()


def test_bad_magic():
    blob = serialize(random_model(2))
    with pytest.raises(BadMagicError) as exc:
        parse(b"GGUF" + blob[4:])
    assert exc.value.found == b"GGUF" and "GGUF" in str(exc.value)


def test_unsupported_version():
    blob = bytearray(serialize([]))
    blob[4] = 2
    with pytest.raises(UnsupportedVersionError):
        parse(bytes(blob))


def test_truncated_final_tensor():
    recs = [record_from_quantized("a", 1, 256, codecs.encode(np.ones(256), "q40")),
            record_from_quantized("b", 1, 256, codecs.encode(np.ones(256), "q4k"))]
    blob = serialize(recs)
    with pytest.raises(TruncatedError) as exc:
        parse(blob[:-10])
    assert exc.value.expected == 144 and exc.value.actual == 134
    assert "'b'" in str(exc.value)


def test_every_truncation_detected():
    recs = random_model(7, 3)
    assert {r.codec for r in recs} >= {"q4x"}
    blob = serialize(recs)
    for cut in range(len(blob)):
        with pytest.raises(ContainerError):
            parse(blob[:cut])


def test_payload_len_mismatch():
    rec = record_from_quantized("w", 1, 64, codecs.encode(np.ones(64), "q40"))
    blob = bytearray(serialize([rec]))
    off = 16 + 4 + 1 + 17
    blob[off:off + 8] = struct.pack("<Q", 37)
    with pytest.raises(PayloadLengthError) as exc:
        parse(bytes(blob))
    assert exc.value.expected == 36 and exc.value.actual == 37


def test_q4x_group_count_checked():
    rec = record_from_quantized("w", 1, 128, codecs.encode(np.arange(128.0), "q4x"))
    bad = TensorRecord(rec.name, 1, 128, "q4x", rec.payload[:128] + struct.pack("<I", 3) + rec.payload[132:])
    with pytest.raises(PayloadLengthError):
        serialize([bad])


def test_trailing_bytes_and_unknown_codec():
    blob = serialize(random_model(3))
    with pytest.raises(TrailingDataError):
        parse(blob + b"\x00")
    rec = record_from_quantized("w", 1, 32, codecs.encode(np.ones(32), "q40"))
    raw = bytearray(serialize([rec]))
    raw[16 + 4 + 1 + 16] = 9
    with pytest.raises(ContainerError, match="unknown codec id 9"):
        parse(bytes(raw))


def test_invalid_record_never_written(tmp_path):
    bad = TensorRecord("w", 1, 32, "q40", b"\x00" * 17)
    with pytest.raises(PayloadLengthError):
        write_container(tmp_path / "x.qxt", [bad])
    assert not (tmp_path / "x.qxt").exists()


def test_errors_are_distinct_types():
    kinds = {BadMagicError, UnsupportedVersionError, TruncatedError, PayloadLengthError}
    assert len(kinds) == 4
    for a in kinds:
        for b in kinds - {a}:
            assert not issubclass(a, b)
