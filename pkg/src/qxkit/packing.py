"""Sub-byte field packing. Low bits come first within every byte."""
import numpy as np

from .errors import FormatError


def _codes(codes, bits):
    a = np.asarray(codes)
    if a.size and (a.min() < 0 or a.max() >= (1 << bits)):
        raise ValueError(f"codes out of range for {bits}-bit packing")
    return a.astype(np.uint8).ravel()


def _as_u8(packed):
    if isinstance(packed, (bytes, bytearray, memoryview)):
        return np.frombuffer(packed, dtype=np.uint8)
    return np.asarray(packed, dtype=np.uint8).ravel()


def pack_nibbles(codes) -> np.ndarray:
    """Pack 4-bit codes two per byte; element ``2i`` lands in the low nibble."""
    c = _codes(codes, 4)
    if c.size % 2:
        raise ValueError(f"pack_nibbles needs an even number of codes, got {c.size}")
    return (c[0::2] | (c[1::2] << 4)).astype(np.uint8)


def unpack_nibbles(packed, count=None) -> np.ndarray:
    p = _as_u8(packed)
    if count is not None and count != 2 * p.size:
        raise FormatError(f"{p.size} packed bytes hold {2 * p.size} nibbles, expected {count}")
    out = np.empty(2 * p.size, dtype=np.uint8)
    out[0::2] = p & 0x0F
    out[1::2] = p >> 4
    return out


def pack_2bit(codes) -> np.ndarray:
    """Pack 2-bit codes four per byte, zero-padding the final byte."""
    c = _codes(codes, 2)
    padded = np.zeros(-(-c.size // 4) * 4, dtype=np.uint8)
    padded[:c.size] = c
    q = padded.reshape(-1, 4)
    return (q[:, 0] | (q[:, 1] << 2) | (q[:, 2] << 4) | (q[:, 3] << 6)).astype(np.uint8)


def unpack_2bit(packed, count) -> np.ndarray:
    p = _as_u8(packed)
    need = -(-count // 4)
    if p.size != need:
        raise FormatError(f"{count} 2-bit codes need {need} bytes, got {p.size}")
    shifts = np.array([0, 2, 4, 6], dtype=np.uint8)
    out = ((p[:, None] >> shifts) & 0x3).astype(np.uint8).ravel()
    return out[:count]


def _pack_bits(c, bits):
    stream = ((c[:, None] >> np.arange(bits, dtype=np.uint8)) & 1).astype(np.uint8).ravel()
    nbytes = -(-stream.size // 8)
    padded = np.zeros(nbytes * 8, dtype=np.uint8)
    padded[:stream.size] = stream
    return np.packbits(padded.reshape(-1, 8), axis=1, bitorder="little").ravel()


def _unpack_bits(p, count, bits):
    need = -(-count * bits // 8)
    if p.size != need:
        raise FormatError(f"{count} {bits}-bit codes need {need} bytes, got {p.size}")
    stream = np.unpackbits(p, bitorder="little")[:count * bits].reshape(count, bits)
    weights = (1 << np.arange(bits)).astype(np.uint16)
    return (stream.astype(np.uint16) @ weights).astype(np.uint8)


def pack_6bit(codes) -> np.ndarray:
    """Pack 6-bit codes into a little-endian bit stream (16 codes -> 12 bytes)."""
    return _pack_bits(_codes(codes, 6), 6)


def unpack_6bit(packed, count) -> np.ndarray:
    p = _as_u8(packed)
    return _unpack_bits(p, count, 6)
