"""Uniform vs non-uniform selection per weight matrix.

Three criteria feed :func:`decide_layer`:

* Frobenius reconstruction error of each scheme,
* an outlier score: weights whose distance to the nearest non-uniform
  centroid exceeds ``tau`` (in units of the group scale), compared with
  the same statistic for a 16-level uniform grid,
* for Q/K matrices, the discrepancy between attention maps computed with
  quantized and unquantized projections on calibration activations.
"""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import actquant, codecs
from .codebook import N_LEVELS, Q4X_GROUP, build_codebook, uniform_grid
from .errors import QxError, ShapeError
from .tensor import WeightMatrix, block_kind, grouped

UNIFORM_CODECS = ("q40", "q4k")
NONUNIFORM_CODECS = ("q4x",)
SCHEMES = ("identity",) + UNIFORM_CODECS + NONUNIFORM_CODECS
DEFAULT_TAU = 1.5 * (1.0 / N_LEVELS)  # 1.5 x half-step of the 16-level grid on [-1, 1]
DELTA_BINS = 40


class SelectionError(QxError):
    pass


def scheme_kind(scheme: str) -> str:
    if scheme in UNIFORM_CODECS:
        return "uniform"
    if scheme in NONUNIFORM_CODECS:
        return "nonuniform"
    if scheme == "identity":
        return "identity"
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def _matrix(w) -> np.ndarray:
    return w.data if isinstance(w, WeightMatrix) else np.asarray(w)


def quantize_dequantize(w, scheme: str, seed: int = 0) -> np.ndarray:
    """Round-trip ``w`` through ``scheme``; returns float32 of the same shape."""
    arr = np.asarray(_matrix(w), dtype=np.float32)
    if scheme == "identity":
        return arr.copy()
    scheme_kind(scheme)
    return codecs.encode(arr, scheme, seed=seed).dequantize().reshape(arr.shape)


# --- outliers --------------------------------------------------------------------

@dataclass
class OutlierReport:
    name: str
    tau: float
    count: int
    outlier_count: int
    outlier_fraction: float
    max_quant_error: float
    uniform_outlier_count: int
    uniform_max_error: float
    max_normalized_error: float
    uniform_max_normalized_error: float

    def to_dict(self):
        return asdict(self)


def _nearest_distance(values, table):
    """|v - nearest entry| for values [G, n] against per-group tables [G, L]."""
    out = np.empty(values.shape)
    for start in range(0, values.shape[0], 4096):
        v = values[start:start + 4096, :, None]
        t = table[start:start + 4096, None, :]
        out[start:start + 4096] = np.abs(v - t).min(axis=2)
    return out


def outlier_score(m, cb, assignment, tau: Optional[float] = None, name: Optional[str] = None) -> OutlierReport:
    """Count weights far from every centroid of their assigned sub-codebook.

    Distances are measured after dividing each group by its fp16 scale, so
    ``tau`` is a fraction of the group scale.
    """
    tau = DEFAULT_TAU if tau is None else float(tau)
    groups = grouped(_matrix(m), Q4X_GROUP).astype(np.float64)
    scale = codecs.to_fp16(np.abs(groups).max(axis=1)).astype(np.float64)
    safe = np.where(scale > 0, scale, 1.0)
    v = groups / safe[:, None]
    centroids = cb.stored if hasattr(cb, "stored") else np.asarray(cb, np.float32).astype(np.float16).astype(np.float64)
    assignment = np.asarray(assignment, dtype=np.int64)
    dist = _nearest_distance(v, centroids[assignment])
    grid = np.broadcast_to(uniform_grid(N_LEVELS), (v.shape[0], N_LEVELS))
    udist = _nearest_distance(v, grid)
    abs_err = dist * scale[:, None]
    uabs_err = udist * scale[:, None]
    count = v.size
    n_out = int(np.count_nonzero(dist > tau))
    return OutlierReport(
        name=name or getattr(m, "name", ""),
        tau=tau,
        count=int(count),
        outlier_count=n_out,
        outlier_fraction=n_out / count if count else 0.0,
        max_quant_error=float(abs_err.max()) if count else 0.0,
        uniform_outlier_count=int(np.count_nonzero(udist > tau)),
        uniform_max_error=float(uabs_err.max()) if count else 0.0,
        max_normalized_error=float(dist.max()) if count else 0.0,
        uniform_max_normalized_error=float(udist.max()) if count else 0.0,
    )


# --- attention ---------------------------------------------------------------------

def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention_map(q_w, k_w, x, heads: int = 1, causal: bool = False,
                  q_bias=None, k_bias=None) -> np.ndarray:
    """Row-stochastic maps ``softmax((x Wq)(x Wk)^T / sqrt(d_head))`` per head.

    ``x`` is [T, d_in]; both weights are [d_in, d_out] with ``d_out``
    divisible by ``heads``. Returns float64 [heads, T, T].
    """
    wq = np.asarray(_matrix(q_w), dtype=np.float64)
    wk = np.asarray(_matrix(k_w), dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"activations must be [T >= 1, d], got {x.shape}")
    if wq.shape != wk.shape:
        raise ShapeError(f"Q weight {wq.shape} and K weight {wk.shape} differ")
    if x.shape[1] != wq.shape[0]:
        raise ShapeError(f"activations have {x.shape[1]} channels, weights expect {wq.shape[0]}")
    if heads < 1 or wq.shape[1] % heads:
        raise ShapeError(f"{wq.shape[1]} output features do not split into {heads} heads")
    t = x.shape[0]
    dh = wq.shape[1] // heads
    q = x @ wq
    k = x @ wk
    if q_bias is not None:
        q = q + np.asarray(q_bias, dtype=np.float64)
    if k_bias is not None:
        k = k + np.asarray(k_bias, dtype=np.float64)
    q = q.reshape(t, heads, dh).transpose(1, 0, 2)
    k = k.reshape(t, heads, dh).transpose(1, 0, 2)
    logits = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
    if causal:
        logits = np.where(np.tril(np.ones((t, t), dtype=bool)), logits, -np.inf)
    return _softmax(logits)


@dataclass
class AttentionDiscrepancy:
    layer: Optional[int]
    scheme: str
    kind: str
    mean_abs_delta: float
    max_abs_delta: float
    delta_histogram: List[int]
    edges: List[float]

    def to_dict(self):
        return asdict(self)


def calibration_activations(tokens: int, channels: int, seed: int = 0) -> np.ndarray:
    """Seeded standard-normal stand-in for a calibration batch."""
    return np.random.default_rng(seed).standard_normal((tokens, channels))


def attention_discrepancy(q_w, k_w, x, scheme: str, heads: int = 1, causal: bool = False,
                          layer: Optional[int] = None, act_quant: bool = False,
                          migrate_alpha: Optional[float] = None, seed: int = 0,
                          bins: int = DELTA_BINS, q_bias=None, k_bias=None) -> AttentionDiscrepancy:
    """Element-wise difference between quantized and reference attention maps.

    The reference uses the unquantized weights and activations. The
    quantized path optionally migrates per-channel scales into the weights
    first (``migrate_alpha``) and fake-quantizes activations to int8 per
    token (``act_quant``).
    """
    kind = scheme_kind(scheme)
    wq = np.asarray(_matrix(q_w), dtype=np.float64)
    wk = np.asarray(_matrix(k_w), dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    ref = attention_map(wq, wk, x, heads, causal, q_bias, k_bias)

    xq, wq_s, wk_s = x, wq, wk
    if migrate_alpha is not None:
        both = np.concatenate([wq, wk], axis=1)
        _, xq, both_s = actquant.migrate_scales(x, both, migrate_alpha)
        wq_s, wk_s = both_s[:, :wq.shape[1]], both_s[:, wq.shape[1]:]
    if scheme != "identity":
        wq_s = quantize_dequantize(wq_s.astype(np.float32), scheme, seed)
        wk_s = quantize_dequantize(wk_s.astype(np.float32), scheme, seed)
    if act_quant:
        xq = actquant.int8_rtn_per_token(xq).dequantize()
    if scheme == "identity" and migrate_alpha is None and not act_quant:
        got = ref
    else:
        got = attention_map(wq_s, wk_s, xq, heads, causal, q_bias, k_bias)
    delta = got - ref
    hist, edges = np.histogram(delta, bins=bins, range=(-1.0, 1.0))
    return AttentionDiscrepancy(
        layer=layer,
        scheme=scheme,
        kind=kind,
        mean_abs_delta=float(np.mean(np.abs(delta))),
        max_abs_delta=float(np.max(np.abs(delta))),
        delta_histogram=hist.tolist(),
        edges=edges.tolist(),
    )


# --- decision ------------------------------------------------------------------------

@dataclass
class SchemeCriteria:
    codec: str
    frobenius_rel: float
    outlier_fraction: Optional[float] = None
    mean_abs_delta: Optional[float] = None


@dataclass
class LayerCriteria:
    name: str
    role: str
    uniform: SchemeCriteria
    nonuniform: SchemeCriteria
    layer: Optional[int] = None
    variance: Optional[float] = None
    reference_variance: Optional[float] = None


@dataclass
class Policy:
    """Decision parameters. ``mlp_margin`` is the relative Frobenius slack
    granted to the non-uniform scheme on MLP matrices whose variance is at
    least ``reference_variance`` (the attention matrices' mean when known)."""

    name: str = "default"
    uniform_codec: str = "q40"
    nonuniform_codec: str = "q4x"
    mlp_margin: float = 0.05
    tau: float = DEFAULT_TAU


POLICIES = {"default": Policy()}


@dataclass
class LayerDecision:
    name: str
    layer: Optional[int]
    role: str
    scheme: str
    codec: str
    rule: str
    criteria: Dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def decide_layer(criteria: LayerCriteria, policy: Optional[Policy] = None) -> LayerDecision:
    """Pick uniform or non-uniform quantization for one matrix.

    Q and K: lower attention ``mean_abs_delta`` wins, then lower Frobenius
    error, then uniform. MLP: lower Frobenius error, with the non-uniform
    side allowed ``policy.mlp_margin`` relative slack when the matrix's
    variance is at least the reference variance. Everything else: lower
    Frobenius error, ties to uniform. Fully equal criteria pick uniform.
    """
    policy = policy or Policy()
    if criteria is None or criteria.uniform is None or criteria.nonuniform is None:
        raise SelectionError("criteria for both schemes are required")
    u, n = criteria.uniform, criteria.nonuniform
    for sc, label in ((u, "uniform"), (n, "nonuniform")):
        if sc.frobenius_rel is None:
            raise SelectionError(f"{criteria.name}: missing {label} Frobenius error")
    role = criteria.role
    record = {"uniform": asdict(u), "nonuniform": asdict(n), "variance": criteria.variance,
              "reference_variance": criteria.reference_variance, "policy": asdict(policy)}

    def done(kind, rule):
        codec = u.codec if kind == "uniform" else n.codec
        return LayerDecision(criteria.name, criteria.layer, role, kind, codec, rule, record)

    if role in ("Q", "K") and (u.mean_abs_delta is None or n.mean_abs_delta is None):
        raise SelectionError(f"{criteria.name}: attention discrepancy required for role {role}")

    if asdict(u) | {"codec": None} == asdict(n) | {"codec": None}:
        return done("uniform", "all criteria equal: tie goes to uniform")

    if role in ("Q", "K"):
        if u.mean_abs_delta != n.mean_abs_delta:
            kind = "uniform" if u.mean_abs_delta < n.mean_abs_delta else "nonuniform"
            return done(kind, f"attention precedence: mean_abs_delta uniform={u.mean_abs_delta:.6g} "
                              f"nonuniform={n.mean_abs_delta:.6g}")
        if u.frobenius_rel != n.frobenius_rel:
            kind = "uniform" if u.frobenius_rel < n.frobenius_rel else "nonuniform"
            return done(kind, "attention delta tied; lower Frobenius error")
        return done("uniform", "attention delta and Frobenius error tied: uniform")

    if block_kind(role) == "mlp":
        prior = criteria.reference_variance is None or (
            criteria.variance is not None and criteria.variance >= criteria.reference_variance)
        margin = policy.mlp_margin if prior else 0.0
        if n.frobenius_rel < u.frobenius_rel * (1.0 + margin):
            return done("nonuniform", f"mlp: nonuniform Frobenius {n.frobenius_rel:.6g} < "
                                      f"uniform {u.frobenius_rel:.6g} x {1.0 + margin:g}")
        return done("uniform", f"mlp: uniform Frobenius {u.frobenius_rel:.6g} <= "
                               f"nonuniform {n.frobenius_rel:.6g} x {1.0 + margin:g}")

    if n.frobenius_rel < u.frobenius_rel:
        return done("nonuniform", "lower Frobenius error")
    return done("uniform", "lower or equal Frobenius error: uniform")


# --- whole-model selection ------------------------------------------------------------

_LAYER_RE = re.compile(r"(\d+)")


def layer_of(m: WeightMatrix) -> Optional[int]:
    if m.layer is not None:
        return int(m.layer)
    found = _LAYER_RE.search(m.name)
    return int(found.group(1)) if found else None


def _frob_rel(w, what):
    a = np.asarray(w, dtype=np.float64)
    b = np.asarray(what, dtype=np.float64).reshape(a.shape)
    norm = np.linalg.norm(a)
    diff = np.linalg.norm(a - b)
    return 0.0 if norm == 0 and diff == 0 else float(diff / norm) if norm else float("inf")


@dataclass
class SelectionResult:
    decisions: List[LayerDecision]
    outliers: List[OutlierReport]
    attention: List[AttentionDiscrepancy]

    def to_dict(self):
        return {
            "decisions": [d.to_dict() for d in self.decisions],
            "outliers": [o.to_dict() for o in self.outliers],
            "attention": [a.to_dict() for a in self.attention],
        }


def select_model(matrices: Sequence[WeightMatrix], calib=None, heads: int = 1,
                 policy: Optional[Policy] = None, seed: int = 0, tokens: int = 32,
                 causal: bool = False, act_quant: bool = False,
                 migrate_alpha: Optional[float] = None) -> SelectionResult:
    """Compute every criterion for each matrix and decide its scheme."""
    policy = policy or Policy()
    roles = {m.name: m.role for m in matrices}
    attn_var = [float(np.var(m.data)) for m in matrices if roles[m.name] in ("Q", "K", "V", "O")]
    ref_var = float(np.mean(attn_var)) if attn_var else None

    by_layer: Dict = {}
    for m in matrices:
        if roles[m.name] in ("Q", "K"):
            by_layer.setdefault(layer_of(m), {})[roles[m.name]] = m

    attention: Dict = {}
    reports = []
    for lid, pair in by_layer.items():
        if "Q" not in pair or "K" not in pair:
            continue
        q, k = pair["Q"], pair["K"]
        x = calib if calib is not None else calibration_activations(tokens, q.rows, seed)
        x = np.asarray(x, dtype=np.float64)
        res = {}
        for kind, codec in (("uniform", policy.uniform_codec), ("nonuniform", policy.nonuniform_codec)):
            d = attention_discrepancy(q, k, x, codec, heads=heads, causal=causal, layer=lid,
                                      act_quant=act_quant, migrate_alpha=migrate_alpha, seed=seed)
            res[kind] = d
            reports.append(d)
        attention[lid] = res

    decisions, outliers = [], []
    for m in matrices:
        role = roles[m.name]
        uq = quantize_dequantize(m, policy.uniform_codec, seed)
        fit = build_codebook(m, seed=seed)
        nq = codecs.q4x_fake_quant(m, fit.codebook, fit.assignment).reshape(m.data.shape)
        orep = outlier_score(m, fit.codebook, fit.assignment, policy.tau)
        outliers.append(orep)
        u = SchemeCriteria(policy.uniform_codec, _frob_rel(m.data, uq),
                           orep.uniform_outlier_count / orep.count)
        n = SchemeCriteria(policy.nonuniform_codec, _frob_rel(m.data, nq), orep.outlier_fraction)
        eff_role = role
        if role in ("Q", "K"):
            att = attention.get(layer_of(m))
            if att is None:
                eff_role = "other"
            else:
                u.mean_abs_delta = att["uniform"].mean_abs_delta
                n.mean_abs_delta = att["nonuniform"].mean_abs_delta
        crit = LayerCriteria(m.name, eff_role, u, n, layer=layer_of(m),
                             variance=float(np.var(m.data.astype(np.float64))),
                             reference_variance=ref_var)
        dec = decide_layer(crit, policy)
        dec.role = role
        if eff_role != role:
            dec.rule = "no paired Q/K matrix for attention criteria; " + dec.rule
        decisions.append(dec)
    return SelectionResult(decisions, outliers, reports)
