"""Weight matrices, group tiling, distribution statistics and manifest I/O."""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional

import numpy as np

from .errors import GroupSizeError, NonFiniteError, QxError, ShapeError

SUPPORTED_GROUP_SIZES = (32, 64, 256)
ZERO_EPS = 1e-6
ROLES = ("Q", "K", "V", "O", "FC1", "FC2", "other")


def check_finite(values, name=None) -> None:
    flat = np.asarray(values).ravel()
    bad = ~np.isfinite(flat)
    if bad.any():
        i = int(np.argmax(bad))
        raise NonFiniteError(i, flat[i], name)


@dataclass(eq=False)
class WeightMatrix:
    """Row-major fp32 matrix plus identity metadata.

    ``tags`` may carry ``layer`` (int), ``block`` (attention|mlp|other) and
    ``role`` (one of :data:`ROLES`).
    """

    name: str
    data: np.ndarray
    tags: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim == 1:
            data = data.reshape(1, -1)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeError(f"{self.name}: expected a non-empty 2-D matrix, got {data.shape}")
        check_finite(data, self.name)
        data.flags.writeable = False
        self.data = data

    @classmethod
    def from_flat(cls, name, rows, cols, values, **tags):
        values = np.asarray(values, dtype=np.float32).ravel()
        if values.size != rows * cols:
            raise ShapeError(f"{name}: {values.size} values for a {rows}x{cols} matrix")
        return cls(name, values.reshape(rows, cols), dict(tags))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def role(self) -> str:
        return self.tags.get("role") or infer_role(self.name)

    @property
    def layer(self) -> Optional[int]:
        return self.tags.get("layer")


@dataclass(frozen=True)
class GroupView:
    parent: WeightMatrix
    offset: int
    len: int

    @property
    def values(self) -> np.ndarray:
        return self.parent.flat[self.offset:self.offset + self.len]


@dataclass
class TensorStats:
    mean: float
    variance: float
    absmax: float
    histogram: np.ndarray
    edges: np.ndarray
    zero_fraction: float
    count: int

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "variance": self.variance,
            "absmax": self.absmax,
            "zero_fraction": self.zero_fraction,
            "count": self.count,
            "histogram": self.histogram.tolist(),
            "edges": self.edges.tolist(),
        }


def _as_values(m) -> np.ndarray:
    if isinstance(m, WeightMatrix):
        return m.flat
    if isinstance(m, GroupView):
        return m.values
    values = np.asarray(m, dtype=np.float32).ravel()
    check_finite(values)
    return values


def compute_stats(m, bins: int = 64, eps: float = ZERO_EPS) -> TensorStats:
    """Moments and a ``bins``-bin histogram over ``[min, max]`` of the tensor."""
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    x = _as_values(m).astype(np.float64)
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        # a constant tensor still needs a non-empty range containing it
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(x, bins=bins, range=(lo, hi))
    return TensorStats(
        mean=float(x.mean()),
        variance=float(x.var()),
        absmax=float(np.abs(x).max()),
        histogram=counts.astype(np.int64),
        edges=edges,
        zero_fraction=float(np.mean(np.abs(x) < eps)),
        count=int(x.size),
    )


def check_group_size(group_size: int) -> None:
    if group_size not in SUPPORTED_GROUP_SIZES:
        raise ValueError(f"group size must be one of {SUPPORTED_GROUP_SIZES}, got {group_size}")


def iter_groups(m: WeightMatrix, group_size: int) -> Iterator[GroupView]:
    """Contiguous non-overlapping views tiling the flattened tensor."""
    check_group_size(group_size)
    if m.size % group_size:
        raise GroupSizeError(m.size, group_size)
    for offset in range(0, m.size, group_size):
        yield GroupView(m, offset, group_size)


def grouped(m, group_size: int) -> np.ndarray:
    """The flattened tensor as a ``(n_groups, group_size)`` array."""
    x = _as_values(m)
    if x.size % group_size:
        raise GroupSizeError(x.size, group_size)
    return x.reshape(-1, group_size)


def pad_to_multiple(m, group_size: int):
    """Zero-pad the flattened tensor to a multiple of ``group_size``.

    Returns ``(padded, n_valid)``. Only the first ``n_valid`` elements of a
    reconstruction should enter error metrics.
    """
    x = _as_values(m)
    n = x.size
    padded = np.zeros(-(-n // group_size) * group_size, dtype=np.float32)
    padded[:n] = x
    return padded, n


_ROLE_TOKENS = {
    "Q": {"q", "wq", "query"},
    "K": {"k", "wk", "key"},
    "V": {"v", "wv", "value"},
    "O": {"o", "wo", "out", "output"},
    "FC1": {"fc1", "w1", "up", "gate", "w3"},
    "FC2": {"fc2", "w2", "down"},
}


def infer_role(name: str) -> str:
    """Guess a matrix role from common naming schemes (``layers.0.attn.q``,
    ``blk.0.attn_k``, ``model.layers.3.mlp.down_proj`` ...)."""
    tokens = set(re.split(r"[^a-z0-9]+", name.lower()))
    for role, names in _ROLE_TOKENS.items():
        if tokens & names:
            return role
    return "other"


def block_kind(role: str) -> str:
    if role in ("Q", "K", "V", "O"):
        return "attention"
    if role in ("FC1", "FC2"):
        return "mlp"
    return "other"


# --- manifest -----------------------------------------------------------------

_ENTRY_KEYS = ("name", "rows", "cols", "path")


def read_manifest(path) -> List[dict]:
    """Entries ``{name, rows, cols, dtype, path, ...}`` with absolute paths."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    entries = doc.get("tensors") if isinstance(doc, dict) else doc
    if not isinstance(entries, list):
        raise QxError(f"{path}: manifest must be a list or an object with a 'tensors' list")
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for i, entry in enumerate(entries):
        missing = [k for k in _ENTRY_KEYS if k not in entry]
        if missing:
            raise QxError(f"{path}: entry {i} missing {', '.join(missing)}")
        dtype = entry.get("dtype", "fp32")
        if dtype != "fp32":
            raise QxError(f"{path}: entry {entry['name']!r} has unsupported dtype {dtype!r}")
        e = dict(entry)
        e["dtype"] = "fp32"
        e["path"] = os.path.join(base, entry["path"])
        out.append(e)
    return out


def load_entry(entry: dict) -> WeightMatrix:
    rows, cols = int(entry["rows"]), int(entry["cols"])
    raw = np.fromfile(entry["path"], dtype="<f4")
    if raw.size != rows * cols:
        raise QxError(
            f"{entry['path']}: expected {rows * cols} fp32 values for {entry['name']!r}, "
            f"found {raw.size}"
        )
    tags = {k: entry[k] for k in ("layer", "role", "block") if k in entry}
    return WeightMatrix(entry["name"], raw.reshape(rows, cols), tags)


def load_manifest(path) -> List[WeightMatrix]:
    return [load_entry(e) for e in read_manifest(path)]


def save_manifest(path, matrices, blob_dir=None) -> None:
    """Write little-endian fp32 blobs and a manifest listing them.

    Blobs default to ``<manifest stem>.blobs/`` beside the manifest, so two
    manifests in one directory never overwrite each other's data.
    """
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    blob_dir = blob_dir or os.path.splitext(os.path.abspath(path))[0] + ".blobs"
    os.makedirs(blob_dir, exist_ok=True)
    entries = []
    for m in matrices:
        fname = _safe_filename(m.name) + ".f32"
        np.asarray(m.data, dtype="<f4").tofile(os.path.join(blob_dir, fname))
        entry = {
            "name": m.name,
            "rows": m.rows,
            "cols": m.cols,
            "dtype": "fp32",
            "path": os.path.relpath(os.path.join(blob_dir, fname), base),
        }
        entry.update({k: v for k, v in m.tags.items() if k in ("layer", "role", "block")})
        entries.append(entry)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"tensors": entries}, fh, indent=2)
        fh.write("\n")


def _safe_filename(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)
