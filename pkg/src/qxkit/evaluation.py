"""Reconstruction metrics, bits-per-weight accounting, codec comparison
reports and a small transformer used to measure logit fidelity."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import actquant, codecs
from .codebook import build_codebook
from .errors import ShapeError
from .selector import outlier_score
from .tensor import WeightMatrix

SCHEMA = "qxkit.report/1"
CODEC_ORDER = ("q4x", "q40", "q4k", "fp32")


def frobenius_error(m, m_hat) -> Dict[str, float]:
    a = np.asarray(m.data if isinstance(m, WeightMatrix) else m, dtype=np.float64)
    b = np.asarray(m_hat.data if isinstance(m_hat, WeightMatrix) else m_hat, dtype=np.float64)
    if a.shape != b.shape:
        if a.size == b.size and b.ndim == 1:
            b = b.reshape(a.shape)
        else:
            raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = float(np.linalg.norm(a - b))
    norm = float(np.linalg.norm(a))
    if norm == 0.0:
        rel = 0.0 if diff == 0.0 else float("inf")
    else:
        rel = diff / norm
    return {"abs": diff, "rel": rel}


def bpw_accounting(qt: codecs.QuantizedTensor) -> Dict[str, float]:
    nbytes = len(qt.to_bytes())
    return {
        "steady_state": qt.steady_state_bpw,
        "effective": 8.0 * nbytes / qt.n,
        "bytes": nbytes,
    }


@dataclass
class TensorEntry:
    name: str
    codec: str
    rows: int
    cols: int
    bpw_steady_state: float
    bpw_effective: float
    bytes: int
    frobenius_abs: float
    frobenius_rel_error: float
    mse: float
    max_abs_error: float
    outliers: Optional[Dict] = None

    def to_dict(self):
        return asdict(self)


def tensor_entry(m: WeightMatrix, qt: codecs.QuantizedTensor, outliers=None) -> TensorEntry:
    recon = qt.dequantize().reshape(m.data.shape)
    acc = bpw_accounting(qt)
    fe = frobenius_error(m.data, recon)
    err = m.data.astype(np.float64) - recon
    return TensorEntry(
        name=m.name, codec=qt.codec, rows=m.rows, cols=m.cols,
        bpw_steady_state=acc["steady_state"], bpw_effective=acc["effective"], bytes=acc["bytes"],
        frobenius_abs=fe["abs"], frobenius_rel_error=fe["rel"],
        mse=float(np.mean(err ** 2)), max_abs_error=float(np.max(np.abs(err))),
        outliers=outliers,
    )


def _codec_rank(codec):
    return CODEC_ORDER.index(codec) if codec in CODEC_ORDER else len(CODEC_ORDER)


def compare_codecs(m: WeightMatrix, codecs_: Sequence[str] = ("q40", "q4k", "q4x"),
                   seed: int = 0) -> List[TensorEntry]:
    """One report row per codec, ordered by steady-state then effective BPW."""
    rows = []
    for codec in codecs_:
        if codec == "q4x":
            fit = build_codebook(m, seed=seed)
            qt = codecs.q4x_encode(m, fit.codebook, fit.assignment)
            orep = outlier_score(m, fit.codebook, fit.assignment).to_dict()
            rows.append(tensor_entry(m, qt, orep))
        else:
            rows.append(tensor_entry(m, codecs.encode(m, codec, seed=seed)))
    rows.sort(key=lambda r: (r.bpw_steady_state, r.bpw_effective, _codec_rank(r.codec)))
    return rows


@dataclass
class QuantReport:
    tensors: List[TensorEntry] = field(default_factory=list)
    decisions: List[Dict] = field(default_factory=list)
    container_bytes: Optional[int] = None
    meta: Dict = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return sum(t.bytes for t in self.tensors)

    @property
    def total_elements(self) -> int:
        return sum(t.rows * t.cols for t in self.tensors)

    @property
    def weighted_bpw(self) -> float:
        n = self.total_elements
        return 8.0 * self.total_bytes / n if n else 0.0

    def to_dict(self):
        return {
            "schema": SCHEMA,
            "meta": self.meta,
            "tensors": [t.to_dict() for t in self.tensors],
            "totals": {
                "total_bytes": self.total_bytes,
                "elements": self.total_elements,
                "weighted_bpw": self.weighted_bpw,
                "container_bytes": self.container_bytes,
            },
            "decisions": self.decisions,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def format_table(rows: Sequence[TensorEntry]) -> str:
    """Aligned text table: configuration, BPW, size, error metrics."""
    header = ["tensor", "codec", "BPW", "BPW eff", "size (MiB)", "frob rel", "MSE", "outliers"]
    body = []
    for r in rows:
        out = "-" if not r.outliers else f"{r.outliers['outlier_fraction']:.4%}"
        body.append([r.name, r.codec.upper(), f"{r.bpw_steady_state:.6g}", f"{r.bpw_effective:.5f}",
                     f"{r.bytes / 2 ** 20:.4f}", f"{r.frobenius_rel_error:.5f}", f"{r.mse:.4e}", out])
    widths = [max(len(str(c)) for c in col) for col in zip(header, *body)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
    return "\n".join(lines) + "\n"


# --- toy transformer -------------------------------------------------------------------

@dataclass(frozen=True)
class ToyModelConfig:
    layers: int = 2
    d_model: int = 128
    heads: int = 4
    d_ff: int = 256
    vocab: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ShapeError("d_model must be divisible by heads")
        for a, b in ((self.d_model, self.d_model), (self.d_model, self.d_ff)):
            if (a * b) % 256:
                raise ShapeError("every linear weight must hold a multiple of 256 elements")


LINEAR_SUFFIXES = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2")


def init_toy_weights(cfg: ToyModelConfig) -> Dict[str, np.ndarray]:
    """Seeded weights; attention projections are narrower than MLP ones."""
    rng = np.random.default_rng(cfg.seed)
    d, f = cfg.d_model, cfg.d_ff
    w = {"embed": rng.standard_normal((cfg.vocab, d)).astype(np.float32)}
    for i in range(cfg.layers):
        p = f"layers.{i}."
        for name in ("attn.q", "attn.k", "attn.v", "attn.o"):
            w[p + name] = (rng.standard_normal((d, d)) * 0.5 / np.sqrt(d)).astype(np.float32)
        w[p + "mlp.fc1"] = (rng.standard_normal((d, f)) * 1.5 / np.sqrt(d)).astype(np.float32)
        w[p + "mlp.fc2"] = (rng.standard_normal((f, d)) * 1.5 / np.sqrt(f)).astype(np.float32)
    w["head"] = (rng.standard_normal((d, cfg.vocab)) / np.sqrt(d)).astype(np.float32)
    return w


def linear_weight_names(cfg: ToyModelConfig) -> List[str]:
    return [f"layers.{i}.{s}" for i in range(cfg.layers) for s in LINEAR_SUFFIXES]


def _norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def toy_forward(cfg: ToyModelConfig, weights: Dict[str, np.ndarray], tokens,
                act_quant: bool = False) -> np.ndarray:
    """Pre-norm causal transformer forward pass; returns float64 logits [T, vocab].

    Parameter-free layer norm, tanh-GELU MLP, untied output head.
    ``act_quant`` fake-quantizes every linear-layer input to int8 per token.
    """
    tokens = np.asarray(tokens, dtype=np.int64).ravel()
    if tokens.size == 0 or tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ShapeError(f"token ids must lie in [0, {cfg.vocab})")
    W = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
    aq = actquant.fake_quant_int8 if act_quant else (lambda a: a)
    t, h, dh = tokens.size, cfg.heads, cfg.d_model // cfg.heads
    mask = np.tril(np.ones((t, t), dtype=bool))
    x = W["embed"][tokens]
    for i in range(cfg.layers):
        p = f"layers.{i}."
        a = aq(_norm(x))
        q = (a @ W[p + "attn.q"]).reshape(t, h, dh).transpose(1, 0, 2)
        k = (a @ W[p + "attn.k"]).reshape(t, h, dh).transpose(1, 0, 2)
        v = (a @ W[p + "attn.v"]).reshape(t, h, dh).transpose(1, 0, 2)
        logits = np.where(mask, q @ k.transpose(0, 2, 1) / np.sqrt(dh), -np.inf)
        logits = logits - logits.max(axis=-1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=-1, keepdims=True)
        ctx = (probs @ v).transpose(1, 0, 2).reshape(t, cfg.d_model)
        x = x + aq(ctx) @ W[p + "attn.o"]
        m = aq(_norm(x))
        x = x + aq(_gelu(m @ W[p + "mlp.fc1"])) @ W[p + "mlp.fc2"]
    return _norm(x) @ W["head"]


def quantize_toy_weights(cfg: ToyModelConfig, weights: Dict[str, np.ndarray], codec="q4x",
                         seed: int = 0) -> Dict[str, np.ndarray]:
    """Dequantized copy of ``weights`` with every linear layer round-tripped.

    ``codec`` is a codec name or a mapping from weight name to codec.
    Embedding and output head stay in fp32.
    """
    out = dict(weights)
    for name in linear_weight_names(cfg):
        c = codec.get(name, "fp32") if isinstance(codec, dict) else codec
        arr = np.asarray(weights[name], dtype=np.float32)
        out[name] = codecs.encode(arr, c, seed=seed).dequantize().reshape(arr.shape)
    return out


def logit_delta(cfg, weights, quantized, tokens, act_quant=False) -> float:
    ref = toy_forward(cfg, weights, tokens)
    got = toy_forward(cfg, quantized, tokens, act_quant=act_quant)
    return float(np.mean(np.abs(got - ref)))


def levels_sweep(cfg: ToyModelConfig, weights, tokens, levels=(4, 8, 16), seed: int = 0) -> Dict[int, float]:
    """Mean-abs logit delta of codebook quantization at each sub-codebook width."""
    deltas = {}
    for n_levels in levels:
        q = dict(weights)
        for name in linear_weight_names(cfg):
            arr = np.asarray(weights[name], dtype=np.float32)
            fit = build_codebook(arr, levels=n_levels, seed=seed)
            q[name] = codecs.q4x_fake_quant(arr, fit.codebook, fit.assignment).reshape(arr.shape)
        deltas[int(n_levels)] = logit_delta(cfg, weights, q, tokens)
    return deltas


def toy_tokens(cfg: ToyModelConfig, n: int = 32, seed: Optional[int] = None) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed + 1 if seed is None else seed)
    return rng.integers(0, cfg.vocab, size=n)
