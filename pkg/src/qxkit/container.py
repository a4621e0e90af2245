"""The ``.qxt`` model container.

Layout, little-endian throughout::

    header   magic "QXT1" | version:u32 | tensor_count:u32 | flags:u32
    record   name_len:u32 | name:utf-8 | rows:u64 | cols:u64 | codec_id:u8
             | payload_len:u64 | payload

Q4X payloads carry ``codebook (128 B) | group_count:u32`` followed by the
group records and packed cluster ids; every other codec stores its codec
payload unchanged.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import List, Sequence

from . import codecs
from .codecs import CODEC_IDS, CODEC_NAMES, GROUP_SIZES, Q4X_CODEBOOK_BYTES
from .errors import (BadMagicError, ContainerError, PayloadLengthError, TrailingDataError,
                     TruncatedError, UnsupportedVersionError)

MAGIC = b"QXT1"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
_U32 = struct.Struct("<I")
_SHAPE = struct.Struct("<QQB")
_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class TensorRecord:
    name: str
    rows: int
    cols: int
    codec: str
    payload: bytes

    @property
    def codec_id(self) -> int:
        return CODEC_IDS[self.codec]

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def to_quantized(self) -> codecs.QuantizedTensor:
        payload = self.payload
        if self.codec == "q4x":
            payload = payload[:Q4X_CODEBOOK_BYTES] + payload[Q4X_CODEBOOK_BYTES + 4:]
        return codecs.QuantizedTensor.from_bytes(self.codec, payload, self.n)


def expected_payload_len(codec: str, n: int) -> int:
    return codecs.payload_size(codec, n) + (4 if codec == "q4x" else 0)


def record_from_quantized(name: str, rows: int, cols: int, qt: codecs.QuantizedTensor) -> TensorRecord:
    raw = qt.to_bytes()
    if qt.codec == "q4x":
        groups = (rows * cols) // 64
        raw = raw[:Q4X_CODEBOOK_BYTES] + _U32.pack(groups) + raw[Q4X_CODEBOOK_BYTES:]
    return TensorRecord(name, int(rows), int(cols), qt.codec, raw)


def _validate(rec: TensorRecord) -> None:
    if rec.codec not in CODEC_IDS:
        raise ContainerError(f"tensor {rec.name!r}: unknown codec {rec.codec!r}")
    if rec.rows < 1 or rec.cols < 1:
        raise ContainerError(f"tensor {rec.name!r}: bad shape {rec.rows}x{rec.cols}")
    if rec.n % GROUP_SIZES[rec.codec]:
        raise ContainerError(f"tensor {rec.name!r}: {rec.n} elements do not tile "
                             f"{rec.codec} groups of {GROUP_SIZES[rec.codec]}")
    expected = expected_payload_len(rec.codec, rec.n)
    if len(rec.payload) != expected:
        raise PayloadLengthError(rec.name, expected, len(rec.payload))
    if rec.codec == "q4x":
        (groups,) = _U32.unpack_from(rec.payload, Q4X_CODEBOOK_BYTES)
        if groups != rec.n // 64:
            raise PayloadLengthError(rec.name, rec.n // 64, groups)


def serialize(records: Sequence[TensorRecord], flags: int = 0) -> bytes:
    for rec in records:
        _validate(rec)
    parts = [_HEADER.pack(MAGIC, VERSION, len(records), flags)]
    for rec in records:
        name = rec.name.encode("utf-8")
        parts.append(_U32.pack(len(name)))
        parts.append(name)
        parts.append(_SHAPE.pack(rec.rows, rec.cols, rec.codec_id))
        parts.append(_U64.pack(len(rec.payload)))
        parts.append(bytes(rec.payload))
    return b"".join(parts)


def write_container(path, records: Sequence[TensorRecord], flags: int = 0) -> int:
    """Write records to ``path``; returns the byte count. Validation runs
    before the file is opened, so a bad record never leaves a partial file."""
    blob = serialize(records, flags)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return len(blob)


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n, what):
        avail = len(self.buf) - self.pos
        if avail < n:
            raise TruncatedError(what, n, max(avail, 0))
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def parse(buf) -> List[TensorRecord]:
    records, _ = parse_with_flags(buf)
    return records


def parse_with_flags(buf):
    head = bytes(buf[:4])
    if head != MAGIC[:len(head)]:
        raise BadMagicError(head)
    r = _Reader(buf)
    magic, version, count, flags = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise BadMagicError(magic)
    if version != VERSION:
        raise UnsupportedVersionError(version)
    records = []
    for i in range(count):
        (name_len,) = _U32.unpack(r.take(4, f"record {i} name length"))
        try:
            name = bytes(r.take(name_len, f"record {i} name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"record {i}: name is not valid UTF-8") from exc
        rows, cols, codec_id = _SHAPE.unpack(r.take(_SHAPE.size, f"record {name!r} shape"))
        (payload_len,) = _U64.unpack(r.take(8, f"record {name!r} payload length"))
        if codec_id not in CODEC_NAMES:
            raise ContainerError(f"tensor {name!r}: unknown codec id {codec_id}")
        codec = CODEC_NAMES[codec_id]
        if rows < 1 or cols < 1 or (rows * cols) % GROUP_SIZES[codec]:
            raise ContainerError(f"tensor {name!r}: shape {rows}x{cols} invalid for {codec}")
        expected = expected_payload_len(codec, rows * cols)
        if payload_len != expected:
            raise PayloadLengthError(name, expected, payload_len)
        payload = bytes(r.take(payload_len, f"tensor {name!r} payload"))
        rec = TensorRecord(name, rows, cols, codec, payload)
        _validate(rec)
        records.append(rec)
    if r.pos != len(r.buf):
        raise TrailingDataError(f"{len(r.buf) - r.pos} unexpected bytes after the last record")
    return records, flags


def read_container(path) -> List[TensorRecord]:
    with open(path, "rb") as fh:
        return parse(fh.read())


def header_overhead(records: Sequence[TensorRecord]) -> int:
    """Container bytes not accounted for by the codec payloads."""
    total = _HEADER.size
    for rec in records:
        total += 4 + len(rec.name.encode("utf-8")) + _SHAPE.size + 8
        if rec.codec == "q4x":
            total += 4
    return total
