"""Activation quantization (symmetric int8, per token) and per-channel
scale migration between activations and weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import WeightMatrix, check_finite

INT8_MAX = 127
DEFAULT_ALPHA = 0.5


@dataclass
class QuantizedActivations:
    codes: np.ndarray  # int8 [T, d]
    scales: np.ndarray  # float32 [T]

    def dequantize(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.scales.astype(np.float64)[:, None]


@dataclass
class MigrationScales:
    scales: np.ndarray  # float32 [d], all > 0
    alpha: float


def _activations(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError(f"activations must be [tokens, channels], got shape {x.shape}")
    check_finite(x)
    return x


def int8_rtn_per_token(x) -> QuantizedActivations:
    """Round-to-nearest int8 with one scale per token (row).

    ``scale = max|x_t| / 127``; an all-zero row gets scale 1 and zero codes.
    """
    x = _activations(x).astype(np.float64)
    amax = np.abs(x).max(axis=1)
    scales = np.where(amax > 0, amax / INT8_MAX, 1.0).astype(np.float32)
    codes = np.clip(np.rint(x / scales.astype(np.float64)[:, None]), -INT8_MAX, INT8_MAX)
    return QuantizedActivations(codes.astype(np.int8), scales)


def fake_quant_int8(x) -> np.ndarray:
    """Quantize-dequantize ``x`` per token; returns an array of ``x``'s dtype."""
    x = np.asarray(x)
    return int8_rtn_per_token(x).dequantize().astype(x.dtype if x.dtype.kind == "f" else np.float64)


def migrate_scales(x, w, alpha: float = DEFAULT_ALPHA):
    """Per-channel scales moving quantization difficulty from ``x`` to ``w``.

    ``x`` is [T, d] and ``w`` is [d, n] (``y = x @ w``). With
    ``s_j = max|x_:j|**alpha / max|w_j:|**(1 - alpha)`` the pair
    ``(x / s, diag(s) @ w)`` has the same product. Channels where either
    maximum is zero keep ``s_j = 1``.

    Returns ``(MigrationScales, x_scaled, w_scaled)``; the scaled arrays are
    float64.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    x = _activations(x).astype(np.float64)
    w_arr = w.data if isinstance(w, WeightMatrix) else np.asarray(w)
    w_arr = np.asarray(w_arr, dtype=np.float64)
    if w_arr.ndim != 2 or w_arr.shape[0] != x.shape[1]:
        raise ShapeError(f"activations have {x.shape[1]} channels but weights have shape {w_arr.shape}")
    xmax = np.abs(x).max(axis=0)
    wmax = np.abs(w_arr).max(axis=1)
    ok = (xmax > 0) & (wmax > 0)
    s = np.ones(x.shape[1])
    s[ok] = xmax[ok] ** alpha / wmax[ok] ** (1.0 - alpha)
    s32 = s.astype(np.float32)
    s32[~np.isfinite(s32) | (s32 <= 0)] = 1.0
    s = s32.astype(np.float64)
    return MigrationScales(s32, float(alpha)), x / s, w_arr * s[:, None]
