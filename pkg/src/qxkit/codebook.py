"""Per-tensor codebook learning for the Q4X codec.

Pipeline: absmax-normalised group histograms -> k-means in histogram space
(k = 4) -> a Lloyd-Max scalar quantizer fitted to each learned histogram,
giving 4 sub-codebooks of 16 ascending centroids in [-1, 1].
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import kernels
from .errors import DegenerateHistogramError, ShapeError
from .tensor import GroupView, grouped

Q4X_GROUP = 64
N_CLUSTERS = 4
N_LEVELS = 16
DEFAULT_BINS = 32
_EMPTY_CELL = 1e-15


@dataclass
class GroupHistogram:
    bins: np.ndarray
    group_index: int
    degenerate: bool = False


@dataclass
class LearnedHistogram:
    bins: np.ndarray
    member_count: int


@dataclass
class KMeansResult:
    centers: np.ndarray  # (k, B)
    assignment: np.ndarray  # (N,) cluster id per input histogram
    objective: float
    history: List[float]
    iterations: int
    duplicate_centers: bool = False

    @property
    def learned(self) -> List[LearnedHistogram]:
        counts = np.bincount(self.assignment, minlength=len(self.centers))
        return [LearnedHistogram(c.copy(), int(n)) for c, n in zip(self.centers, counts)]


@dataclass
class LloydMaxResult:
    centroids: np.ndarray
    mse: float
    history: List[float]
    iterations: int


@dataclass
class Codebook:
    centroids: np.ndarray  # (4, 16) float32, rows ascending
    learned: List[LearnedHistogram] = field(default_factory=list)
    warning: Optional[str] = None

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float32)
        if c.ndim != 2:
            raise ShapeError(f"codebook must be 2-D, got shape {c.shape}")
        self.centroids = c

    @property
    def fp16(self) -> np.ndarray:
        """Centroids as stored on disk (IEEE binary16)."""
        return self.centroids.astype(np.float16)

    @property
    def stored(self) -> np.ndarray:
        """The fp16-rounded centroids as float64, the values decode sees."""
        return self.fp16.astype(np.float64)


# --- histograms --------------------------------------------------------------

def group_histogram(g, bins: int = DEFAULT_BINS, group_index: int = 0) -> GroupHistogram:
    """Histogram of one group after dividing by its absmax."""
    if isinstance(g, GroupView):
        group_index = g.offset // g.len
        values = g.values
    else:
        values = np.asarray(g, dtype=np.float32).ravel()
    if values.size != Q4X_GROUP:
        raise ShapeError(f"Q4X groups hold {Q4X_GROUP} weights, got {values.size}")
    hist, degenerate = kernels.group_histograms(values[None, :], bins)
    return GroupHistogram(hist[0], group_index, bool(degenerate[0]))


def group_histograms(m, bins: int = DEFAULT_BINS):
    """All group histograms of a tensor as ``(hist[G, B], degenerate[G])``."""
    return kernels.group_histograms(grouped(m, Q4X_GROUP), bins)


# --- k-means in histogram space ---------------------------------------------------

def _kmeans_pp(points, k, rng):
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    duplicate = False
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than clusters
            centers[c:] = centers[0]
            duplicate = True
            break
        idx = rng.choice(n, p=d2 / total)
        centers[c] = points[idx]
        d2 = np.minimum(d2, ((points - centers[c]) ** 2).sum(axis=1))
    return centers, duplicate


def learn_histograms(hists, k: int = N_CLUSTERS, max_iter: int = 100, tol: float = 1e-12,
                     seed: int = 0) -> KMeansResult:
    """k-means under squared L2 with k-means++ seeding.

    The objective history is non-increasing: a step that would raise it
    (only possible through rounding) ends the run with the previous state.
    Empty clusters are reseeded from the point farthest from its centroid.
    """
    if isinstance(hists, (list, tuple)) and hists and isinstance(hists[0], GroupHistogram):
        points = np.stack([h.bins for h in hists])
    else:
        points = np.asarray(hists, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ShapeError("learn_histograms needs a non-empty (N, B) array")
    rng = np.random.default_rng(seed)
    centers, duplicate = _kmeans_pp(points, k, rng)
    if not duplicate and len(np.unique(points, axis=0)) < k:
        duplicate = True

    labels, d2 = kernels.kmeans_assign(points, centers)
    objective = float(d2.sum())
    history = [objective]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        new_centers = centers.copy()
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, points)
        filled = counts > 0
        new_centers[filled] = sums[filled] / counts[filled, None]
        taken = set()
        for c in np.flatnonzero(~filled):
            # farthest point from its own centroid
            order = np.argsort(-d2, kind="stable")
            pick = next((int(i) for i in order if int(i) not in taken), int(order[0]))
            taken.add(pick)
            new_centers[c] = points[pick]
        new_labels, new_d2 = kernels.kmeans_assign(points, new_centers)
        new_objective = float(new_d2.sum())
        if new_objective > objective:
            break
        improvement = objective - new_objective
        centers, labels, d2, objective = new_centers, new_labels, new_d2, new_objective
        history.append(objective)
        if improvement < tol:
            break
    if duplicate:
        warnings.warn("fewer distinct histograms than clusters; learned histograms repeat",
                      RuntimeWarning, stacklevel=2)
    return KMeansResult(centers, labels, objective, history, iterations, duplicate)


# --- Lloyd-Max on a piecewise-constant density ----------------------------------

class _Density:
    """Piecewise-constant density on [-1, 1] from a normalised histogram."""

    def __init__(self, hist):
        p = np.asarray(hist, dtype=np.float64)
        self.bins = p.size
        self.width = 2.0 / self.bins
        self.edges = np.linspace(-1.0, 1.0, self.bins + 1)
        self.p = p
        self.rho = p / self.width
        self.cdf0 = np.concatenate([[0.0], np.cumsum(p)])
        first = self.rho * (self.edges[1:] ** 2 - self.edges[:-1] ** 2) / 2.0
        self.cdf1 = np.concatenate([[0.0], np.cumsum(first)])
        second = self.rho * (self.edges[1:] ** 3 - self.edges[:-1] ** 3) / 3.0
        self.cdf2 = np.concatenate([[0.0], np.cumsum(second)])

    def _locate(self, x):
        x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
        k = np.clip(np.floor((x + 1.0) / self.width).astype(np.int64), 0, self.bins - 1)
        return x, k

    def mass(self, x):
        """Integral of the density from -1 to x."""
        x, k = self._locate(x)
        return self.cdf0[k] + self.rho[k] * (x - self.edges[k])

    def moment(self, x):
        """Integral of t * density(t) from -1 to x."""
        x, k = self._locate(x)
        return self.cdf1[k] + self.rho[k] * (x ** 2 - self.edges[k] ** 2) / 2.0

    def moment2(self, x):
        """Integral of t**2 * density(t) from -1 to x."""
        x, k = self._locate(x)
        return self.cdf2[k] + self.rho[k] * (x ** 3 - self.edges[k] ** 3) / 3.0

    def median(self, lo, hi):
        target = (self.mass(lo) + self.mass(hi)) / 2.0
        k = int(np.searchsorted(self.cdf0, target, side="right")) - 1
        k = min(max(k, 0), self.bins - 1)
        if self.rho[k] == 0:
            return float(np.clip(self.edges[k], lo, hi))
        return float(np.clip(self.edges[k] + (target - self.cdf0[k]) / self.rho[k], lo, hi))

    def cell_moments(self, bounds):
        m0 = np.diff(self.mass(bounds))
        m1 = np.diff(self.moment(bounds))
        return m0, m1


def quantizer_mse(hist, centroids) -> float:
    """Mean-squared error of nearest-centroid quantization against the
    piecewise-constant density of ``hist``, integrated in closed form."""
    dens = hist if isinstance(hist, _Density) else _Density(hist)
    c = np.sort(np.asarray(centroids, dtype=np.float64))
    bounds = np.concatenate([[-1.0], (c[1:] + c[:-1]) / 2.0, [1.0]])
    m0, m1 = dens.cell_moments(bounds)
    m2 = np.diff(dens.moment2(bounds))
    return float(np.sum(m2 - 2.0 * c * m1 + c * c * m0))


def uniform_grid(levels: int = N_LEVELS) -> np.ndarray:
    """``levels`` cell midpoints of an equal partition of [-1, 1]."""
    return -1.0 + (2.0 * np.arange(levels) + 1.0) / levels


def lloyd_max(h, levels: int = N_LEVELS, max_iter: int = 200, tol: float = 1e-12,
              return_result: bool = False):
    """Lloyd-Max quantizer for the density implied by histogram ``h``.

    Starts from the uniform grid and returns the best centroids seen, so
    the result never has a larger MSE than the uniform grid. Empty cells
    are repaired by splitting the most massive cell at its mass median.
    """
    bins = h.bins if isinstance(h, LearnedHistogram) else h
    p = np.asarray(bins, dtype=np.float64)
    total_mass = p.sum()
    if total_mass <= 0:
        raise DegenerateHistogramError("cannot fit a quantizer to an all-zero histogram")
    p = p / total_mass
    dens = _Density(p)

    c = uniform_grid(levels)
    best_c = c.copy()
    best = uniform_mse = quantizer_mse(dens, c)
    history = [best]
    it = 0
    for it in range(1, max_iter + 1):
        bounds = np.concatenate([[-1.0], (c[1:] + c[:-1]) / 2.0, [1.0]])
        m0, m1 = dens.cell_moments(bounds)
        live = m0 > _EMPTY_CELL
        new_c = np.where(live, m1 / np.where(live, m0, 1.0), c)
        empty = np.flatnonzero(~live)
        if empty.size:
            new_c = _repair_empty(dens, bounds, m0, new_c, empty)
        new_c = np.clip(np.sort(new_c), -1.0, 1.0)
        mse = quantizer_mse(dens, new_c)
        history.append(mse)
        improvement = history[-2] - mse
        c = new_c
        if mse < best:
            best, best_c = mse, new_c.copy()
        if abs(improvement) < tol:
            break
    centroids = best_c.astype(np.float32)
    if quantizer_mse(dens, centroids) > uniform_mse:
        # fp32 rounding ate a negligible gain; the grid is exact in fp32
        centroids = uniform_grid(levels).astype(np.float32)
        best = uniform_mse
    if return_result:
        return LloydMaxResult(centroids, best, history, it)
    return centroids


def _repair_empty(dens, bounds, m0, centroids, empty):
    keep = [j for j in range(centroids.size) if j not in set(empty.tolist())]
    cells = [(bounds[j], bounds[j + 1], m0[j]) for j in keep]
    out = [centroids[j] for j in keep]
    for _ in range(empty.size):
        # split the most massive cell at its mass median
        j = int(np.argmax([mass for _, _, mass in cells]))
        lo, hi, mass = cells[j]
        if mass <= 0:
            break
        med = dens.median(lo, hi)
        halves = []
        for a, b in ((lo, med), (med, hi)):
            w0, w1 = dens.cell_moments(np.array([a, b]))
            halves.append((a, b, float(w0[0]), float(w1[0] / w0[0]) if w0[0] > 0 else (a + b) / 2))
        cells[j:j + 1] = [(a, b, w) for a, b, w, _ in halves]
        out[j:j + 1] = [cen for _, _, _, cen in halves]
    while len(out) < centroids.size:
        # nothing left to split: pad with duplicates of an existing level
        out.append(out[-1])
    return np.asarray(out, dtype=np.float64)


# --- composition -----------------------------------------------------------------

@dataclass
class CodebookFit:
    codebook: Codebook
    assignment: np.ndarray  # (G,) cluster id per group
    kmeans: Optional[KMeansResult]
    degenerate: np.ndarray  # (G,) all-zero groups


def assign_groups(hists, centers) -> np.ndarray:
    labels, _ = kernels.kmeans_assign(hists, centers)
    return labels


def build_codebook(m, bins: int = DEFAULT_BINS, k: int = N_CLUSTERS, levels: int = N_LEVELS,
                   seed: int = 0, max_iter: int = 100) -> CodebookFit:
    """Learn a codebook for tensor ``m`` and assign every group a cluster."""
    hists, degenerate = group_histograms(m, bins)
    live = hists[~degenerate]
    if live.shape[0] == 0:
        grid = np.tile(uniform_grid(levels), (k, 1))
        flat = np.full(bins, 1.0 / bins)
        learned = [LearnedHistogram(flat.copy(), 0) for _ in range(k)]
        cb = Codebook(grid, learned, warning="all groups are zero; uniform grid codebook")
        return CodebookFit(cb, np.zeros(hists.shape[0], dtype=np.int64), None, degenerate)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        km = learn_histograms(live, k=k, max_iter=max_iter, seed=seed)
    centroids = np.stack([lloyd_max(c, levels) for c in km.centers])
    assignment = assign_groups(hists, km.centers)
    counts = np.bincount(assignment[~degenerate], minlength=k)
    learned = [LearnedHistogram(c.copy(), int(n)) for c, n in zip(km.centers, counts)]
    note = "fewer distinct group histograms than clusters" if km.duplicate_centers else None
    return CodebookFit(Codebook(centroids, learned, warning=note), assignment, km, degenerate)
