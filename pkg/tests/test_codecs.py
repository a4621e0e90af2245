import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import f16, q40_bound_ok, q40_reference, q4k_reference, q4x_bounds, q4x_reference
from qxkit import codecs
from qxkit.codebook import Codebook, build_codebook, uniform_grid
from qxkit.codecs import (Q4KTensor, Q4XTensor, Q40Tensor, encode, payload_size, q40_decode,
                          q40_encode, q4k_decode, q4k_encode, q4x_decode, q4x_encode)
from qxkit.errors import FormatError, QxError, ShapeError
from qxkit.tensor import WeightMatrix, iter_groups

seeds = st.integers(0, 2 ** 32 - 1)


def weights(seed, n, kind="normal"):
    rng = np.random.default_rng(seed)
    if kind == "normal":
        x = rng.normal(0, 0.02, n)
    elif kind == "laplace":
        x = rng.laplace(0, 0.01, n)
    else:
        x = rng.standard_t(3, n) * 0.01
    return x.astype(np.float32)


# --- Q40 ---------------------------------------------------------------------------

def test_q40_zero_block():
    t = q40_encode(np.zeros(32))
    assert t.blocks["d"][0] == 0
    assert t.codes.tolist() == [[8] * 32]
    assert not q40_decode(t).any()


def test_q40_hand_example():
    x = np.full(32, 4.0, dtype=np.float32)
    x[5] = -8.0
    t = q40_encode(x)
    assert float(t.blocks["d"][0]) == 1.0
    assert t.codes[0, 5] == 0 and t.codes[0, 0] == 12
    assert np.array_equal(q40_decode(t), x)


def test_q40_uses_fp16_scale():
    # -8 * (1 + 2**-12) / -8 is not representable in fp16 and rounds to 1.0
    x = np.zeros(32, dtype=np.float32)
    x[0] = -8.0 * (1 + 2 ** -12)
    x[1] = 3.0
    t = q40_encode(x)
    assert float(t.blocks["d"][0]) == 1.0
    out = q40_decode(t)
    assert out[1] == 3.0 and out[0] == -8.0


def test_q40_block_size_and_group_view():
    m = WeightMatrix("w", np.random.default_rng(0).standard_normal((2, 64)))
    views = list(iter_groups(m, 32))
    for v in views:
        assert len(q40_encode(v).to_bytes()) == 18
    assert len(q40_encode(m).to_bytes()) == 4 * 18


@given(seeds, st.sampled_from(["normal", "laplace", "t"]))
def test_q40_matches_reference(seed, kind):
    x = weights(seed, 32 * 8, kind)
    t = q40_encode(x)
    for b in range(8):
        d, codes = q40_reference(x[32 * b:32 * b + 32])
        assert float(t.blocks["d"][b]) == d
        assert t.codes[b].tolist() == codes


@given(seeds, st.floats(1e-6, 1e4))
def test_q40_error_bound(seed, scale):
    x = (np.random.default_rng(seed).uniform(-1, 1, 32 * 16) * scale).astype(np.float32)
    recon = q40_decode(q40_encode(x))
    for b in range(16):
        ok, _ = q40_bound_ok(x[32 * b:32 * b + 32], recon[32 * b:32 * b + 32])
        assert ok


def test_q40_bytes_round_trip_and_truncation():
    x = weights(1, 32 * 4)
    raw = q40_encode(x).to_bytes()
    assert np.array_equal(q40_decode(raw), q40_decode(q40_encode(x)))
    with pytest.raises(FormatError):
        q40_decode(raw[:-1])
    with pytest.raises(FormatError):
        Q40Tensor.decode_bytes(raw[:-1], 128)


def test_q40_scale_overflow():
    with pytest.raises(QxError, match="fp16"):
        q40_encode(np.full(32, 1e6, dtype=np.float32))


# --- Q4K ---------------------------------------------------------------------------

@given(seeds, st.sampled_from(["normal", "laplace", "t"]), st.floats(-0.05, 0.05))
def test_q4k_matches_reference(seed, kind, shift):
    x = (weights(seed, 512, kind) + np.float32(shift)).astype(np.float32)
    t = q4k_encode(x)
    sq, mq = t.scale_codes
    for b in range(2):
        d, dmin, rsq, rmq, codes = q4k_reference(x[256 * b:256 * b + 256])
        assert float(t.blocks["d"][b]) == d and float(t.blocks["dmin"][b]) == dmin
        assert sq[b].tolist() == rsq and mq[b].tolist() == rmq
        assert t.codes[b].ravel().tolist() == codes
    assert len(t.to_bytes()) == 2 * 144


def test_q4k_decode_formula():
    x = weights(3, 256)
    t = q4k_encode(x)
    d, dmin, sq, mq, codes = q4k_reference(x)
    expect = [np.float32(np.float32(sq[i // 32]) * np.float32(d)) * np.float32(codes[i])
              - np.float32(np.float32(mq[i // 32]) * np.float32(dmin)) for i in range(256)]
    assert np.array_equal(q4k_decode(t), np.asarray(expect, dtype=np.float32))


@pytest.mark.parametrize("c", [-0.37, -1.0, -2.5e-3])
def test_q4k_constant_negative_block(c):
    # s = 0 in every chunk, so the value rides entirely on the min path
    t = q4k_encode(np.full(256, c, dtype=np.float32))
    assert not t.scale_codes[0].any()
    out = q4k_decode(t)
    assert np.allclose(out, c, rtol=2 ** -10)


def test_q4k_constant_chunk_in_mixed_block():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 0.05, 256).astype(np.float32)
    x[64:96] = -0.02
    t = q4k_encode(x)
    out = q4k_decode(t)
    dmin = float(t.blocks["dmin"][0])
    d = float(t.blocks["d"][0])
    # the chunk minimum is carried by a 6-bit offset and the spread collapses to
    # code 0 or 1; error is at most half an offset step plus one scale step
    assert np.abs(out[64:96] + 0.02).max() <= dmin / 2 + d * t.scale_codes[0][0, 2] + 1e-7


def test_q4k_zero_block():
    assert not q4k_decode(q4k_encode(np.zeros(256))).any()


def test_q4k_beats_q40_on_shifted_data():
    rng = np.random.default_rng(11)
    x = rng.uniform(0.2, 1.0, 256 * 64).astype(np.float32)
    mse = {c: float(np.mean((encode(x, c).dequantize() - x) ** 2)) for c in ("q40", "q4k")}
    assert mse["q4k"] <= mse["q40"]


def test_q4k_truncated():
    raw = q4k_encode(weights(0, 256)).to_bytes()
    with pytest.raises(FormatError):
        Q4KTensor.decode_bytes(raw[:-1], 256)


# --- Q4X ---------------------------------------------------------------------------

def exact_codebook():
    row = np.array([-1, -.75, -.5, -.375, -.25, -.125, -.0625, 0, .0625, .125, .25, .375, .5, .625,
                    .75, 1], dtype=np.float32)
    return Codebook(np.stack([row, row * 0.5, uniform_grid(16), row]))


def test_q4x_fixed_point():
    cb = exact_codebook()
    scale = np.float32(0.03125)
    g = np.repeat(cb.centroids[0], 4) * scale
    np.random.default_rng(0).shuffle(g)
    t = q4x_encode(g, cb, [0])
    assert np.array_equal(q4x_decode(t), g)


def test_q4x_ties_to_lower_index():
    cb = exact_codebook()
    g = np.zeros(64, dtype=np.float32)
    g[0] = 1.0
    g[1] = 0.03125  # midway between 0 and 0.0625
    t = q4x_encode(g, cb, [0])
    assert t.indices[0, 1] == 7


def test_q4x_cluster_padding():
    x = weights(2, 64 * 5)
    fit = build_codebook(x)
    a = np.array([3, 1, 2, 3, 3])
    t = q4x_encode(x, fit.codebook, a)
    assert t.clusters.size == 2
    assert t.clusters[1] == 3  # fifth id in the low bits, the rest zero
    assert t.assignment.tolist() == a.tolist()
    assert len(t.to_bytes()) == 128 + 5 * 34 + 2 == payload_size("q4x", 320)


def test_q4x_wrong_codebook_size():
    x = weights(2, 64)
    with pytest.raises(ShapeError):
        q4x_encode(x, np.zeros((4, 8)), [0])
    with pytest.raises(ShapeError):
        q4x_encode(x, exact_codebook(), [0, 1])
    with pytest.raises(ShapeError):
        q4x_encode(x, exact_codebook(), [4])


def test_q4x_zero_tensor():
    x = np.zeros(128, dtype=np.float32)
    t = q4x_encode(x, exact_codebook(), [1, 2])
    assert not q4x_decode(t).any()


@given(seeds, st.sampled_from(["normal", "laplace", "t"]))
def test_q4x_matches_reference(seed, kind):
    x = weights(seed, 64 * 6, kind)
    fit = build_codebook(x, seed=seed % 100)
    t = q4x_encode(x, fit.codebook, fit.assignment)
    for g in range(6):
        row = fit.codebook.centroids[fit.assignment[g]]
        scale, idx = q4x_reference(x[64 * g:64 * g + 64], row)
        assert float(t.groups["scale"][g]) == scale
        assert t.indices[g].tolist() == idx
    recon = q4x_decode(t).reshape(6, 64)
    stored = fit.codebook.stored.astype(np.float32)
    expect = t.groups["scale"].astype(np.float32)[:, None] * stored[fit.assignment[:, None], t.indices]
    assert np.array_equal(recon, expect)


@given(seeds, st.sampled_from(["normal", "laplace", "t", "uniform"]))
def test_q4x_edge_aware_bound_any_data(seed, kind):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, 64 * 8).astype(np.float32) if kind == "uniform" else weights(seed, 512, kind)
    fit = build_codebook(x)
    recon = q4x_decode(q4x_encode(x, fit.codebook, fit.assignment))
    stored = fit.codebook.stored
    for g in range(8):
        _, edge = q4x_bounds(x[64 * g:64 * g + 64], stored[fit.assignment[g]])
        assert np.abs(recon[64 * g:64 * g + 64] - x[64 * g:64 * g + 64]).max() <= edge


def test_q4x_bytes_round_trip():
    x = weights(4, 64 * 9)
    t = encode(x, "q4x")
    back = Q4XTensor.decode_bytes(t.to_bytes(), x.size)
    assert back.to_bytes() == t.to_bytes()
    assert np.array_equal(back.dequantize(), t.dequantize())
    with pytest.raises(FormatError):
        Q4XTensor.decode_bytes(t.to_bytes()[:-1], x.size)


def test_q4x_beats_uniform_grid_on_learned_support():
    """Groups drawn from their cluster's learned density: Lloyd-Max levels
    must not lose to the uniform grid on them."""
    x = weights(6, 64 * 400, "laplace")
    fit = build_codebook(x)
    edges = np.linspace(-1, 1, 33)
    grid = Codebook(np.tile(uniform_grid(16), (4, 1)))
    for c, lh in enumerate(fit.codebook.learned):
        if lh.member_count == 0:
            continue
        cdf = np.concatenate([[0], np.cumsum(lh.bins)])
        q = (np.arange(64) + 0.5) / 64
        g = np.interp(q, cdf, edges)
        g[np.argmax(np.abs(g))] = np.sign(g[np.argmax(np.abs(g))])  # absmax 1: scale is exact
        nu = codecs.q4x_fake_quant(g, fit.codebook, [c])
        un = codecs.q4x_fake_quant(g, grid, [c])
        assert np.mean((nu - g) ** 2) <= np.mean((un - g) ** 2)


# --- accounting ------------------------------------------------------------------------

@pytest.mark.parametrize("codec,bpw", [("q40", 4.5), ("q4k", 4.5), ("q4x", 4.28125), ("fp32", 32.0)])
def test_steady_state_bpw(codec, bpw):
    assert codecs.steady_state_bpw(codec) == bpw


def test_payload_sizes():
    assert payload_size("q40", 4096) == 2304
    assert payload_size("q4k", 512) == 288
    assert payload_size("q4x", 64) == 128 + 34 + 1
    with pytest.raises(ValueError):
        payload_size("q3", 64)


@pytest.mark.parametrize("codec", ["fp32", "q40", "q4k", "q4x"])
def test_from_bytes_dispatch(codec):
    x = weights(8, 512)
    t = encode(x, codec)
    back = codecs.QuantizedTensor.from_bytes(codec, t.to_bytes(), 512)
    assert np.array_equal(back.dequantize(), t.dequantize())
    assert t.nbytes == len(t.to_bytes())


def test_unknown_codec():
    with pytest.raises(ValueError):
        encode(np.zeros(64), "q8")
