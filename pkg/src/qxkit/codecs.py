"""Bit-exact Q40, Q4K and Q4X weight codecs.

Byte layouts (all multi-byte fields little-endian, fp16 = IEEE binary16):

* Q40, 32 weights per 18-byte block: ``d:f16 | qs:16B``. Codes are
  ``rint(x / d) + 8`` clamped to 0..15, two per byte, low nibble first.
* Q4K, 256 weights per 144-byte block: ``d:f16 | dmin:f16 | scales:12B |
  qs:128B``. ``scales`` is a 6-bit stream holding the eight sub-scale codes
  followed by the eight sub-min codes. Chunk ``j`` decodes as
  ``(sq_j * d) * q - mq_j * dmin``.
* Q4X, 64 weights per group: a per-tensor codebook of 4 x 16 fp16
  centroids (128 bytes), then per group ``scale:f16 | qs:32B`` (34 bytes),
  then the 2-bit cluster index of every group packed four per byte.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .codebook import N_CLUSTERS, N_LEVELS, Q4X_GROUP, Codebook, build_codebook
from .errors import FormatError, QxError, ShapeError
from .packing import pack_2bit, pack_6bit, pack_nibbles, unpack_2bit, unpack_6bit, unpack_nibbles
from .tensor import GroupView, WeightMatrix, grouped

CODEC_IDS = {"fp32": 0, "q40": 1, "q4k": 2, "q4x": 3}
CODEC_NAMES = {v: k for k, v in CODEC_IDS.items()}
GROUP_SIZES = {"fp32": 1, "q40": 32, "q4k": 256, "q4x": 64}

Q40_BLOCK = np.dtype([("d", "<f2"), ("qs", "u1", (16,))])
Q4K_BLOCK = np.dtype([("d", "<f2"), ("dmin", "<f2"), ("scales", "u1", (12,)), ("qs", "u1", (128,))])
Q4X_GROUP_RECORD = np.dtype([("scale", "<f2"), ("qs", "u1", (32,))])
Q4X_CODEBOOK_BYTES = N_CLUSTERS * N_LEVELS * 2

assert Q40_BLOCK.itemsize == 18 and Q4K_BLOCK.itemsize == 144 and Q4X_GROUP_RECORD.itemsize == 34

_FP16_MAX = float(np.finfo(np.float16).max)


def to_fp16(x) -> np.ndarray:
    """Round to binary16 (nearest-even); values beyond its range are an error."""
    x = np.asarray(x, dtype=np.float64)
    if x.size and np.abs(x).max() > _FP16_MAX:
        raise QxError(f"scale {np.abs(x).max():g} overflows fp16 (max {_FP16_MAX:g})")
    return x.astype(np.float16)


def _values(m) -> np.ndarray:
    if isinstance(m, WeightMatrix):
        return m.flat
    if isinstance(m, GroupView):
        return m.values
    return np.asarray(m, dtype=np.float32).ravel()


def payload_size(codec: str, n: int) -> int:
    """Exact serialized size in bytes of an ``n``-element tensor."""
    if codec == "fp32":
        return 4 * n
    if codec == "q40":
        return (n // 32) * Q40_BLOCK.itemsize
    if codec == "q4k":
        return (n // 256) * Q4K_BLOCK.itemsize
    if codec == "q4x":
        g = n // Q4X_GROUP
        return Q4X_CODEBOOK_BYTES + g * Q4X_GROUP_RECORD.itemsize + (g + 3) // 4
    raise ValueError(f"unknown codec {codec!r}")


def steady_state_bpw(codec: str) -> float:
    """Bits per weight excluding per-tensor headers and padding."""
    return {
        "fp32": 32.0,
        "q40": Q40_BLOCK.itemsize * 8 / 32,
        "q4k": Q4K_BLOCK.itemsize * 8 / 256,
        "q4x": (Q4X_GROUP_RECORD.itemsize * 8 + 2) / Q4X_GROUP,
    }[codec]


class QuantizedTensor:
    """Common surface of the codec payloads."""

    codec: str
    n: int

    def to_bytes(self) -> bytes:
        raise NotImplementedError

    def dequantize(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def nbytes(self) -> int:
        return payload_size(self.codec, self.n)

    @property
    def steady_state_bpw(self) -> float:
        return steady_state_bpw(self.codec)

    @property
    def effective_bpw(self) -> float:
        return 8.0 * self.nbytes / self.n

    @classmethod
    def from_bytes(cls, codec: str, payload, n: int) -> "QuantizedTensor":
        return _FROM_BYTES[codec](payload, n)


def _check_len(codec, payload, n):
    expected = payload_size(codec, n)
    if len(payload) != expected:
        raise FormatError(f"{codec} payload for {n} elements must be {expected} bytes, "
                          f"got {len(payload)}")


# --- fp32 ----------------------------------------------------------------------

@dataclass(eq=False)
class RawTensor(QuantizedTensor):
    data: np.ndarray
    codec = "fp32"

    @property
    def n(self):
        return self.data.size

    def to_bytes(self):
        return np.asarray(self.data, dtype="<f4").tobytes()

    def dequantize(self):
        return np.asarray(self.data, dtype=np.float32).ravel().copy()

    @classmethod
    def decode_bytes(cls, payload, n):
        _check_len("fp32", payload, n)
        return cls(np.frombuffer(payload, dtype="<f4").astype(np.float32))


# --- Q40 -------------------------------------------------------------------------

@dataclass(eq=False)
class Q40Tensor(QuantizedTensor):
    blocks: np.ndarray  # Q40_BLOCK records
    codec = "q40"

    @property
    def n(self):
        return self.blocks.size * 32

    @property
    def codes(self) -> np.ndarray:
        return unpack_nibbles(self.blocks["qs"]).reshape(-1, 32)

    def to_bytes(self):
        return self.blocks.tobytes()

    def dequantize(self):
        return q40_decode(self)

    @classmethod
    def decode_bytes(cls, payload, n):
        if n % 32:
            raise FormatError(f"Q40 tensors hold a multiple of 32 elements, got {n}")
        _check_len("q40", payload, n)
        return cls(np.frombuffer(payload, dtype=Q40_BLOCK).copy())


def q40_encode(x) -> Q40Tensor:
    """Round-to-nearest with one fp16 scale per 32 weights.

    ``d`` is the signed largest-magnitude element divided by -8, so that
    element maps to code 0. Codes are computed against the fp16-rounded
    ``d`` the decoder will use.
    """
    blocks = grouped(_values(x), 32)
    idx = np.argmax(np.abs(blocks), axis=1)
    signed_max = blocks[np.arange(blocks.shape[0]), idx].astype(np.float64)
    d16 = to_fp16(signed_max / -8.0)
    codes = kernels.q40_codes(blocks, d16.astype(np.float64))
    out = np.zeros(blocks.shape[0], dtype=Q40_BLOCK)
    out["d"] = d16
    out["qs"] = pack_nibbles(codes).reshape(-1, 16)
    return Q40Tensor(out)


def q40_decode(t) -> np.ndarray:
    if isinstance(t, (bytes, bytearray, memoryview)):
        if len(t) % Q40_BLOCK.itemsize:
            raise FormatError(f"Q40 payload length {len(t)} is not a multiple of 18")
        t = Q40Tensor(np.frombuffer(t, dtype=Q40_BLOCK))
    d = t.blocks["d"].astype(np.float32)
    q = t.codes.astype(np.float32) - np.float32(8)
    return (d[:, None] * q).ravel()


# --- Q4K ---------------------------------------------------------------------------

@dataclass(eq=False)
class Q4KTensor(QuantizedTensor):
    blocks: np.ndarray  # Q4K_BLOCK records
    codec = "q4k"

    @property
    def n(self):
        return self.blocks.size * 256

    @property
    def scale_codes(self):
        """``(sq, mq)``: the 6-bit sub-scale and sub-min codes, each (nb, 8)."""
        both = unpack_6bit(self.blocks["scales"], 16 * self.blocks.size).reshape(-1, 16)
        return both[:, :8], both[:, 8:]

    @property
    def codes(self) -> np.ndarray:
        return unpack_nibbles(self.blocks["qs"]).reshape(-1, 8, 32)

    def to_bytes(self):
        return self.blocks.tobytes()

    def dequantize(self):
        return q4k_decode(self)

    @classmethod
    def decode_bytes(cls, payload, n):
        if n % 256:
            raise FormatError(f"Q4K tensors hold a multiple of 256 elements, got {n}")
        _check_len("q4k", payload, n)
        return cls(np.frombuffer(payload, dtype=Q4K_BLOCK).copy())


def _six_bit(values, unit):
    safe = np.where(unit > 0, unit, 1.0)
    q = np.clip(np.rint(values / safe[:, None]), 0, 63)
    q[unit <= 0] = 0
    return q.astype(np.uint8)


def q4k_encode(x) -> Q4KTensor:
    """Two-level asymmetric 4-bit quantization of 256-weight superblocks.

    Each 32-weight chunk gets ``s = (max - min) / 15`` and ``m = -min`` with
    ``min`` clamped to at most 0, so the sub-min code stays unsigned. Both
    are quantized to 6 bits against fp16 superblock scales ``d`` and ``dmin``.
    """
    chunks = grouped(_values(x), 256).reshape(-1, 8, 32).astype(np.float64)
    lo = np.minimum(chunks.min(axis=2), 0.0)
    hi = chunks.max(axis=2)
    s = (hi - lo) / 15.0
    m = -lo
    d16 = to_fp16(s.max(axis=1) / 63.0)
    dmin16 = to_fp16(m.max(axis=1) / 63.0)
    d, dmin = d16.astype(np.float64), dmin16.astype(np.float64)
    sq = _six_bit(s, d)
    mq = _six_bit(m, dmin)
    scale = sq * d[:, None]
    offset = mq * dmin[:, None]
    codes = kernels.affine_codes(chunks.astype(np.float32), scale, offset)

    out = np.zeros(chunks.shape[0], dtype=Q4K_BLOCK)
    out["d"] = d16
    out["dmin"] = dmin16
    out["scales"] = pack_6bit(np.concatenate([sq, mq], axis=1)).reshape(-1, 12)
    out["qs"] = pack_nibbles(codes).reshape(-1, 128)
    return Q4KTensor(out)


def q4k_decode(t) -> np.ndarray:
    if isinstance(t, (bytes, bytearray, memoryview)):
        if len(t) % Q4K_BLOCK.itemsize:
            raise FormatError(f"Q4K payload length {len(t)} is not a multiple of 144")
        t = Q4KTensor(np.frombuffer(t, dtype=Q4K_BLOCK))
    sq, mq = t.scale_codes
    d = t.blocks["d"].astype(np.float32)[:, None]
    dmin = t.blocks["dmin"].astype(np.float32)[:, None]
    scale = d * sq.astype(np.float32)
    offset = dmin * mq.astype(np.float32)
    q = t.codes.astype(np.float32)
    return (scale[..., None] * q - offset[..., None]).ravel()


# --- Q4X ---------------------------------------------------------------------------

@dataclass(eq=False)
class Q4XTensor(QuantizedTensor):
    codebook: np.ndarray  # (4, 16) float16
    groups: np.ndarray  # Q4X_GROUP_RECORD records
    clusters: np.ndarray  # packed 2-bit cluster ids, ceil(G / 4) bytes
    codec = "q4x"

    @property
    def n(self):
        return self.groups.size * Q4X_GROUP

    @property
    def n_groups(self):
        return self.groups.size

    @property
    def assignment(self) -> np.ndarray:
        return unpack_2bit(self.clusters, self.n_groups).astype(np.int64)

    @property
    def indices(self) -> np.ndarray:
        return unpack_nibbles(self.groups["qs"]).reshape(-1, Q4X_GROUP)

    def to_bytes(self):
        return (np.asarray(self.codebook, dtype="<f2").tobytes() + self.groups.tobytes()
                + np.asarray(self.clusters, dtype=np.uint8).tobytes())

    def dequantize(self):
        return q4x_decode(self)

    @classmethod
    def decode_bytes(cls, payload, n):
        if n % Q4X_GROUP:
            raise FormatError(f"Q4X tensors hold a multiple of 64 elements, got {n}")
        _check_len("q4x", payload, n)
        g = n // Q4X_GROUP
        cb_end = Q4X_CODEBOOK_BYTES
        grp_end = cb_end + g * Q4X_GROUP_RECORD.itemsize
        codebook = np.frombuffer(payload[:cb_end], dtype="<f2").reshape(N_CLUSTERS, N_LEVELS)
        groups = np.frombuffer(payload[cb_end:grp_end], dtype=Q4X_GROUP_RECORD)
        clusters = np.frombuffer(payload[grp_end:], dtype=np.uint8)
        return cls(codebook.copy(), groups.copy(), clusters.copy())


def _codebook_array(cb) -> np.ndarray:
    return cb.centroids if isinstance(cb, Codebook) else np.asarray(cb, dtype=np.float32)


def q4x_indices(x, cb, assignment):
    """Per-element nearest-centroid indices and fp16 group scales.

    Works for any sub-codebook width; only 16-level codebooks serialize.
    Returns ``(indices[G, 64], scales_fp16[G], stored_codebook_f64)``.
    """
    groups = grouped(_values(x), Q4X_GROUP)
    centroids = _codebook_array(cb)
    stored = centroids.astype(np.float16).astype(np.float64)
    assignment = np.asarray(assignment, dtype=np.int64).ravel()
    if assignment.size != groups.shape[0]:
        raise ShapeError(f"assignment covers {assignment.size} groups, tensor has {groups.shape[0]}")
    if assignment.size and (assignment.min() < 0 or assignment.max() >= stored.shape[0]):
        raise ShapeError("assignment refers to a cluster outside the codebook")
    scale16 = to_fp16(np.max(np.abs(groups), axis=1).astype(np.float64))
    scale = scale16.astype(np.float64)
    safe = np.where(scale > 0, scale, 1.0)
    values = groups.astype(np.float64) / safe[:, None]
    indices = kernels.nearest_centroid(values, stored, assignment)
    return indices, scale16, stored


def q4x_encode(x, cb, assignment) -> Q4XTensor:
    """Encode with a learned codebook and a per-group cluster assignment.

    The group scale is the fp16-rounded absmax; each element takes the
    index of the nearest centroid of its group's sub-codebook (ties go to
    the lower index).
    """
    centroids = _codebook_array(cb)
    if centroids.size != N_CLUSTERS * N_LEVELS or centroids.shape != (N_CLUSTERS, N_LEVELS):
        raise ShapeError(f"Q4X needs a 4x16 codebook (64 centroids), got shape {centroids.shape}")
    indices, scale16, _ = q4x_indices(x, cb, assignment)
    groups = np.zeros(indices.shape[0], dtype=Q4X_GROUP_RECORD)
    groups["scale"] = scale16
    groups["qs"] = pack_nibbles(indices).reshape(-1, 32)
    clusters = pack_2bit(np.asarray(assignment, dtype=np.uint8))
    return Q4XTensor(centroids.astype(np.float16), groups, clusters)


def q4x_reconstruct(indices, scale16, stored, assignment) -> np.ndarray:
    cb = np.asarray(stored, dtype=np.float32)
    values = cb[np.asarray(assignment, dtype=np.int64)[:, None], indices]
    return (np.asarray(scale16).astype(np.float32)[:, None] * values).ravel()


def q4x_decode(t) -> np.ndarray:
    if not isinstance(t, Q4XTensor):
        raise FormatError("q4x_decode needs a Q4XTensor; use Q4XTensor.decode_bytes for raw bytes")
    return q4x_reconstruct(t.indices, t.groups["scale"], t.codebook, t.assignment)


def q4x_fake_quant(x, cb, assignment) -> np.ndarray:
    """Quantize-dequantize with a codebook of any width (no serialization)."""
    indices, scale16, stored = q4x_indices(x, cb, assignment)
    return q4x_reconstruct(indices, scale16, stored, assignment)


# --- dispatch -------------------------------------------------------------------------

_FROM_BYTES = {
    "fp32": RawTensor.decode_bytes,
    "q40": Q40Tensor.decode_bytes,
    "q4k": Q4KTensor.decode_bytes,
    "q4x": Q4XTensor.decode_bytes,
}


def encode(m, codec: str, seed: int = 0, bins: Optional[int] = None,
           codebook=None, assignment=None) -> QuantizedTensor:
    """Quantize a tensor with ``codec``; Q4X learns its codebook unless given."""
    x = _values(m)
    if codec == "fp32":
        return RawTensor(x.astype(np.float32).copy())
    if codec == "q40":
        return q40_encode(x)
    if codec == "q4k":
        return q4k_encode(x)
    if codec == "q4x":
        if codebook is None:
            fit = build_codebook(x, **({"bins": bins} if bins else {}), seed=seed)
            codebook, assignment = fit.codebook, fit.assignment
        return q4x_encode(x, codebook, assignment)
    raise ValueError(f"unknown codec {codec!r}; expected one of {sorted(CODEC_IDS)}")


def decode(t: QuantizedTensor) -> np.ndarray:
    return t.dequantize()
