import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qxkit.codebook import Codebook, build_codebook, uniform_grid
from qxkit.selector import (DEFAULT_TAU, LayerCriteria, Policy, SchemeCriteria, SelectionError,
                            attention_discrepancy, attention_map, decide_layer, outlier_score,
                            select_model)
from qxkit.errors import ShapeError
from qxkit.tensor import WeightMatrix


def oracle_attention(wq, wk, x, heads):
    """Per-element loops with math.exp."""
    t, dout = x.shape[0], wq.shape[1]
    dh = dout // heads
    q = [[sum(x[i, a] * wq[a, j] for a in range(x.shape[1])) for j in range(dout)] for i in range(t)]
    k = [[sum(x[i, a] * wk[a, j] for a in range(x.shape[1])) for j in range(dout)] for i in range(t)]
    out = np.zeros((heads, t, t))
    for h in range(heads):
        cols = range(h * dh, (h + 1) * dh)
        for i in range(t):
            logits = [sum(q[i][c] * k[j][c] for c in cols) / math.sqrt(dh) for j in range(t)]
            top = max(logits)
            e = [math.exp(v - top) for v in logits]
            out[h, i] = [v / sum(e) for v in e]
    return out


def outlier_case(seed, d=64, core=0.02, frac=0.04):
    """Q/K weights with a dense near-zero core, one absmax anchor per group and
    a sparse spread of mid-range weights the learned codebook under-serves."""
    rng = np.random.default_rng(seed)

    def mat():
        w = rng.laplace(0, 0.004, (d, d))
        mask = rng.random((d, d)) < frac
        w[mask] = rng.choice([-1, 1], mask.sum()) * rng.uniform(0.35, 0.75, mask.sum())
        w[:, 0] = np.where(rng.random(d) < 0.5, -1, 1)
        return (w * core).astype(np.float32)

    return mat(), mat(), rng.standard_normal((16, d)) * 3


# --- outliers -----------------------------------------------------------------------

def test_supported_on_centroids_has_no_outliers():
    row = np.array([-1, -.75, -.5, -.375, -.25, -.125, -.0625, 0, .0625, .125, .25, .375, .5, .625,
                    .75, 1], dtype=np.float32)
    cb = Codebook(np.tile(row, (4, 1)))
    g = np.repeat(row, 4) * np.float32(0.5)
    rep = outlier_score(g, cb, [0])
    assert rep.outlier_count == 0 and rep.max_quant_error == 0.0


def test_critical_outlier_flagged():
    # codebook packed near zero; one weight sits at the normalised extreme's neighbour
    row = np.concatenate([np.linspace(-0.15, 0.15, 14), [-1.0, 1.0]])
    cb = Codebook(np.tile(np.sort(row), (4, 1)))
    g = np.random.default_rng(0).uniform(-0.1, 0.1, 64).astype(np.float32)
    g[0] = 1.0
    g[1] = 0.55  # far from every centroid in this codebook
    rep = outlier_score(g, cb, [0])
    assert rep.outlier_count == 1
    assert rep.max_quant_error > rep.uniform_max_error
    assert rep.max_quant_error == pytest.approx(0.4, abs=1e-3)


@given(st.integers(0, 10_000))
def test_outlier_count_monotone_in_tau(seed):
    x = np.random.default_rng(seed).standard_t(3, 64 * 8).astype(np.float32)
    fit = build_codebook(x)
    counts = [outlier_score(x, fit.codebook, fit.assignment, tau).outlier_count
              for tau in (0.0, 0.01, 0.03, DEFAULT_TAU, 0.2, 0.5, np.inf)]
    assert all(b <= a for a, b in zip(counts, counts[1:]))
    assert counts[-1] == 0
    rep = outlier_score(x, fit.codebook, fit.assignment)
    assert 0.0 <= rep.outlier_fraction <= 1.0


def test_default_tau():
    assert DEFAULT_TAU == 1.5 * (1 / 16)


# --- attention maps ---------------------------------------------------------------------

def test_single_token():
    rng = np.random.default_rng(0)
    m = attention_map(rng.standard_normal((8, 8)), rng.standard_normal((8, 8)), rng.standard_normal((1, 8)), 2)
    assert m.shape == (2, 1, 1) and np.all(m == 1.0)


def test_zero_weights_uniform_map():
    m = attention_map(np.zeros((8, 8)), np.zeros((8, 8)), np.ones((5, 8)))
    assert np.all(m == 1 / 5)


@pytest.mark.parametrize("heads", [1, 2])
def test_matches_oracle(heads):
    rng = np.random.default_rng(1)
    wq, wk, x = rng.standard_normal((8, 8)), rng.standard_normal((8, 8)), rng.standard_normal((4, 8))
    assert np.allclose(attention_map(wq, wk, x, heads), oracle_attention(wq, wk, x, heads), atol=1e-6)


@given(st.integers(1, 24), st.sampled_from([1, 2, 4]), st.booleans(), st.integers(0, 2 ** 31))
def test_row_stochastic(t, heads, causal, seed):
    rng = np.random.default_rng(seed)
    m = attention_map(rng.standard_normal((16, 16)) * 3, rng.standard_normal((16, 16)) * 3,
                      rng.standard_normal((t, 16)), heads, causal=causal)
    assert np.all(np.abs(m.sum(-1) - 1) <= 1e-6) and np.all(m >= 0)
    if causal:
        assert not np.triu(m[0], 1).any()


def test_attention_shape_errors():
    with pytest.raises(ShapeError):
        attention_map(np.ones((8, 8)), np.ones((8, 4)), np.ones((3, 8)))
    with pytest.raises(ShapeError):
        attention_map(np.ones((8, 8)), np.ones((8, 8)), np.ones((3, 7)))
    with pytest.raises(ShapeError):
        attention_map(np.ones((8, 6)), np.ones((8, 6)), np.ones((3, 8)), heads=4)


# --- discrepancy ---------------------------------------------------------------------------

def test_identity_scheme_is_exactly_zero():
    q, k, x = outlier_case(0)
    d = attention_discrepancy(q, k, x, "identity")
    assert d.mean_abs_delta == 0.0 and d.max_abs_delta == 0.0
    assert d.kind == "identity"


@pytest.mark.parametrize("scheme", ["q40", "q4x"])
def test_shift_invariance(scheme):
    rng = np.random.default_rng(2)
    q, k = rng.normal(0, 0.05, (64, 64)), rng.normal(0, 0.05, (64, 64))
    x = rng.standard_normal((12, 64))
    base = attention_discrepancy(q, k, x, scheme)
    # a key bias adds q_i . b to every logit of row i, a per-row constant
    shifted = attention_discrepancy(q, k, x, scheme, k_bias=rng.standard_normal(64) * 5)
    assert shifted.mean_abs_delta == pytest.approx(base.mean_abs_delta, rel=1e-9, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_outlier_case_favours_uniform(seed):
    q, k, x = outlier_case(seed)
    u = attention_discrepancy(q, k, x, "q40")
    n = attention_discrepancy(q, k, x, "q4x")
    assert n.mean_abs_delta > u.mean_abs_delta
    assert 0 <= u.max_abs_delta <= 1 and 0 <= n.max_abs_delta <= 1
    assert sum(u.delta_histogram) == 16 * 16


def test_act_quant_and_migration_paths():
    q, k, x = outlier_case(1)
    plain = attention_discrepancy(q, k, x, "identity", act_quant=True)
    assert plain.mean_abs_delta > 0
    mig = attention_discrepancy(q, k, x, "identity", migrate_alpha=0.5)
    assert mig.mean_abs_delta < 1e-12  # exact equivalence up to rounding


# --- decisions -----------------------------------------------------------------------------

def crit(role, u, n, **kw):
    return LayerCriteria("m", role, SchemeCriteria("q40", *u), SchemeCriteria("q4x", *n), **kw)


def test_attention_precedence_over_frobenius():
    d = decide_layer(crit("Q", (0.2, 0.0, 0.01), (0.1, 0.0, 0.02)))
    assert d.scheme == "uniform" and d.codec == "q40"
    d = decide_layer(crit("K", (0.1, 0.0, 0.02), (0.2, 0.0, 0.01)))
    assert d.scheme == "nonuniform"


def test_attention_tie_then_frobenius_then_uniform():
    assert decide_layer(crit("Q", (0.2, 0.0, 0.01), (0.1, 0.0, 0.01))).scheme == "nonuniform"
    assert decide_layer(crit("Q", (0.1, 0.0, 0.01), (0.1, 0.5, 0.01))).scheme == "uniform"


def test_all_equal_is_uniform():
    for role in ("Q", "FC1", "V", "other"):
        d = decide_layer(crit(role, (0.1, 0.0, 0.01), (0.1, 0.0, 0.01)))
        assert d.scheme == "uniform" and "tie" in d.rule


def test_mlp_lower_frobenius_nonuniform():
    d = decide_layer(crit("FC1", (0.09, 0.0), (0.05, 0.0), variance=0.004, reference_variance=0.0004))
    assert d.scheme == "nonuniform"


def test_mlp_variance_prior():
    # within the 5 % margin: wide MLP goes non-uniform, narrow one does not
    wide = decide_layer(crit("FC2", (0.100, 0.0), (0.103, 0.0), variance=1.0, reference_variance=0.5))
    narrow = decide_layer(crit("FC2", (0.100, 0.0), (0.103, 0.0), variance=0.1, reference_variance=0.5))
    assert wide.scheme == "nonuniform" and narrow.scheme == "uniform"


def test_other_roles_ties_uniform():
    assert decide_layer(crit("V", (0.1, 0.0), (0.1, 0.3))).scheme == "uniform"
    assert decide_layer(crit("O", (0.1, 0.0), (0.09, 0.3))).scheme == "nonuniform"


def test_missing_criteria():
    with pytest.raises(SelectionError):
        decide_layer(crit("Q", (0.1, 0.0), (0.1, 0.0)))
    with pytest.raises(SelectionError):
        decide_layer(LayerCriteria("m", "V", SchemeCriteria("q40", None), SchemeCriteria("q4x", 0.1)))


def test_decision_replayable():
    c = crit("FC1", (0.09, 0.0), (0.095, 0.0), variance=1.0, reference_variance=0.2)
    d = decide_layer(c, Policy(mlp_margin=0.1))
    rec = d.to_dict()["criteria"]
    replay = LayerCriteria("m", "FC1", SchemeCriteria(**rec["uniform"]), SchemeCriteria(**rec["nonuniform"]),
                           variance=rec["variance"], reference_variance=rec["reference_variance"])
    again = decide_layer(replay, Policy(**rec["policy"]))
    assert again.to_dict() == d.to_dict()


# --- whole model -------------------------------------------------------------------------------

def small_model(seed=0):
    rng = np.random.default_rng(seed)
    ms = []
    for i in range(2):
        ms.append(WeightMatrix(f"layers.{i}.attn.q", rng.normal(0, 0.02, (64, 64))))
        ms.append(WeightMatrix(f"layers.{i}.attn.k", rng.normal(0, 0.02, (64, 64))))
        ms.append(WeightMatrix(f"layers.{i}.mlp.fc1", rng.normal(0, 0.06, (64, 128))))
    ms.append(WeightMatrix("layers.2.attn.q", rng.normal(0, 0.02, (64, 64))))
    return ms


def test_select_model():
    res = select_model(small_model(), tokens=8)
    assert [d.name for d in res.decisions] == [m.name for m in small_model()]
    assert len(res.attention) == 4  # two layers, two schemes
    lone = res.decisions[-1]
    assert lone.role == "Q" and lone.rule.startswith("no paired")
    for d in res.decisions[:2]:
        assert d.criteria["uniform"]["mean_abs_delta"] is not None
    again = select_model(small_model(), tokens=8)
    assert again.to_dict() == res.to_dict()
