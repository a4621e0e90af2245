"""Hot inner loops, each with a numba and a pure-numpy implementation.

The public names at the bottom dispatch on :data:`qxkit._backend.BACKEND`.
Both implementations do their rounding decisions in float64 on identical
formulas so they produce the same codes; ``tests/test_kernels.py`` checks
that and ``benchmarks/bench_kernels.py`` times them against each other.
"""
import numpy as np

from ._backend import BACKEND, njit

# Bounds the temporary (chunk, group_len, levels) array in the numpy
# nearest-centroid search.
_NEAREST_CHUNK = 2048


# --- group histograms -------------------------------------------------------

def _np_group_histograms(groups, bins):
    groups = np.asarray(groups, dtype=np.float64)
    n_groups, group_len = groups.shape
    absmax = np.max(np.abs(groups), axis=1) if group_len else np.zeros(n_groups)
    safe = np.where(absmax > 0, absmax, 1.0)
    v = groups / safe[:, None]
    idx = np.floor((v + 1.0) * (bins / 2.0)).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    flat = idx + (np.arange(n_groups, dtype=np.int64) * bins)[:, None]
    counts = np.bincount(flat.ravel(), minlength=n_groups * bins).astype(np.float64)
    hist = counts.reshape(n_groups, bins) / group_len
    degenerate = absmax == 0
    hist[degenerate] = 0.0
    return hist, degenerate


@njit(cache=True)
def _nb_group_histograms(groups, bins):
    n_groups, group_len = groups.shape
    hist = np.zeros((n_groups, bins), dtype=np.float64)
    degenerate = np.zeros(n_groups, dtype=np.bool_)
    half = bins / 2.0
    for g in range(n_groups):
        absmax = 0.0
        for i in range(group_len):
            a = abs(np.float64(groups[g, i]))
            if a > absmax:
                absmax = a
        if absmax == 0.0:
            degenerate[g] = True
            continue
        for i in range(group_len):
            v = np.float64(groups[g, i]) / absmax
            k = int(np.floor((v + 1.0) * half))
            if k < 0:
                k = 0
            elif k > bins - 1:
                k = bins - 1
            hist[g, k] += 1.0
        for k in range(bins):
            hist[g, k] = hist[g, k] / group_len
    return hist, degenerate


# --- nearest centroid -------------------------------------------------------

def _np_nearest_centroid(values, codebooks, assignment):
    values = np.asarray(values, dtype=np.float64)
    codebooks = np.asarray(codebooks, dtype=np.float64)
    out = np.empty(values.shape, dtype=np.uint8)
    for start in range(0, values.shape[0], _NEAREST_CHUNK):
        stop = start + _NEAREST_CHUNK
        cb = codebooks[assignment[start:stop]]  # (c, L)
        dist = np.abs(values[start:stop, :, None] - cb[:, None, :])
        out[start:stop] = np.argmin(dist, axis=2)
    return out


@njit(cache=True)
def _nb_nearest_centroid(values, codebooks, assignment):
    n_groups, group_len = values.shape
    levels = codebooks.shape[1]
    out = np.empty((n_groups, group_len), dtype=np.uint8)
    for g in range(n_groups):
        c = assignment[g]
        for i in range(group_len):
            v = values[g, i]
            best = 0
            best_d = abs(v - codebooks[c, 0])
            for j in range(1, levels):
                d = abs(v - codebooks[c, j])
                if d < best_d:
                    best_d = d
                    best = j
            out[g, i] = best
    return out


# --- k-means assignment -----------------------------------------------------

def _np_kmeans_assign(points, centers):
    # accumulate bin by bin: same summation order as the compiled loop
    d2 = np.zeros((points.shape[0], centers.shape[0]))
    for b in range(points.shape[1]):
        d2 += (points[:, b, None] - centers[None, :, b]) ** 2
    labels = np.argmin(d2, axis=1)
    return labels.astype(np.int64), d2[np.arange(points.shape[0]), labels]


@njit(cache=True)
def _nb_kmeans_assign(points, centers):
    n, dim = points.shape
    k = centers.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    for i in range(n):
        best_d = np.inf
        for c in range(k):
            d = 0.0
            for b in range(dim):
                t = points[i, b] - centers[c, b]
                d += t * t
            if d < best_d:
                best_d = d
                labels[i] = c
        best[i] = best_d
    return labels, best


# --- block codes ------------------------------------------------------------

def _np_q40_codes(blocks, d):
    x = np.asarray(blocks, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    safe = np.where(d != 0, d, 1.0)
    q = np.rint(x / safe[:, None]) + 8.0
    np.clip(q, 0, 15, out=q)
    q[d == 0] = 8
    return q.astype(np.uint8)


@njit(cache=True)
def _nb_q40_codes(blocks, d):
    nb, n = blocks.shape
    out = np.empty((nb, n), dtype=np.uint8)
    for b in range(nb):
        db = d[b]
        for i in range(n):
            if db == 0.0:
                out[b, i] = 8
                continue
            q = np.rint(np.float64(blocks[b, i]) / db) + 8.0
            if q < 0.0:
                q = 0.0
            elif q > 15.0:
                q = 15.0
            out[b, i] = np.uint8(q)
    return out


def _np_affine_codes(chunks, scale, offset):
    """Codes ``clamp(rint((x + offset) / scale), 0, 15)`` per (block, chunk)."""
    x = np.asarray(chunks, dtype=np.float64)
    safe = np.where(scale != 0, scale, 1.0)
    q = np.rint((x + offset[..., None]) / safe[..., None])
    np.clip(q, 0, 15, out=q)
    q[scale == 0] = 0
    return q.astype(np.uint8)


@njit(cache=True)
def _nb_affine_codes(chunks, scale, offset):
    nb, nc, n = chunks.shape
    out = np.empty((nb, nc, n), dtype=np.uint8)
    for b in range(nb):
        for c in range(nc):
            s = scale[b, c]
            o = offset[b, c]
            for i in range(n):
                if s == 0.0:
                    out[b, c, i] = 0
                    continue
                q = np.rint((np.float64(chunks[b, c, i]) + o) / s)
                if q < 0.0:
                    q = 0.0
                elif q > 15.0:
                    q = 15.0
                out[b, c, i] = np.uint8(q)
    return out


IMPLEMENTATIONS = {
    "group_histograms": (_np_group_histograms, _nb_group_histograms),
    "nearest_centroid": (_np_nearest_centroid, _nb_nearest_centroid),
    "kmeans_assign": (_np_kmeans_assign, _nb_kmeans_assign),
    "q40_codes": (_np_q40_codes, _nb_q40_codes),
    "affine_codes": (_np_affine_codes, _nb_affine_codes),
}


def get(name, backend=None):
    """Return the implementation of kernel ``name`` for ``backend``."""
    backend = backend or BACKEND
    np_impl, nb_impl = IMPLEMENTATIONS[name]
    return nb_impl if backend == "numba" else np_impl


def group_histograms(groups, bins):
    """Absmax-normalised histograms over [-1, 1], one row per group.

    Returns ``(hist, degenerate)`` where ``hist`` rows sum to 1 and all-zero
    groups get an all-zero row with ``degenerate`` set.
    """
    groups = np.ascontiguousarray(groups, dtype=np.float32)
    return get("group_histograms")(groups, int(bins))


def nearest_centroid(values, codebooks, assignment):
    """Index of the nearest centroid in each group's assigned sub-codebook.

    Ties resolve to the lower index.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    codebooks = np.ascontiguousarray(codebooks, dtype=np.float64)
    assignment = np.ascontiguousarray(assignment, dtype=np.int64)
    return get("nearest_centroid")(values, codebooks, assignment)


def kmeans_assign(points, centers):
    points = np.ascontiguousarray(points, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    return get("kmeans_assign")(points, centers)


def q40_codes(blocks, d):
    blocks = np.ascontiguousarray(blocks, dtype=np.float32)
    d = np.ascontiguousarray(d, dtype=np.float64)
    return get("q40_codes")(blocks, d)


def affine_codes(chunks, scale, offset):
    chunks = np.ascontiguousarray(chunks, dtype=np.float32)
    scale = np.ascontiguousarray(scale, dtype=np.float64)
    offset = np.ascontiguousarray(offset, dtype=np.float64)
    return get("affine_codes")(chunks, scale, offset)
