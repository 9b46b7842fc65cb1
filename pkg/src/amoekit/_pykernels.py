"""Pure-Python/numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or disabled with
``AMOEKIT_PURE_PYTHON=1``. Semantics must match ``_ckernels.pyx`` exactly
(integer outputs) or to rounding (float outputs).
"""

import heapq

import numpy as np

BACKEND = "python"

# Bounds the (rows, k, dim) temporary in nearest_centroid.
_MAX_BLOCK = 1 << 21


def ffd_assign(lengths, capacity, max_items):
    """First-fit placement of items already sorted by decreasing length.

    Returns ``(bin_of_item, n_bins)``.
    """
    free = []
    counts = []
    out = np.empty(len(lengths), dtype=np.int64)
    for i, length in enumerate(lengths):
        length = int(length)
        for b in range(len(free)):
            if free[b] >= length and counts[b] < max_items:
                free[b] -= length
                counts[b] += 1
                out[i] = b
                break
        else:
            free.append(capacity - length)
            counts.append(1)
            out[i] = len(free) - 1
    return out, len(free)


def lpt_assign(loads, num_bins):
    """Greedy placement onto the least-loaded bin (ties to the lowest index)."""
    heap = [(0, b) for b in range(num_bins)]
    out = np.empty(len(loads), dtype=np.int64)
    for i, load in enumerate(loads):
        current, b = heapq.heappop(heap)
        out[i] = b
        heapq.heappush(heap, (current + int(load), b))
    return out


def nearest_centroid(points, centroids):
    """Index of and squared distance to the nearest centroid for each point.

    Distances are sums of squared coordinate differences in float64, so a
    point coinciding with a centroid gets exactly 0. Ties go to the lowest
    centroid index.
    """
    n = points.shape[0]
    k, d = centroids.shape
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    step = max(1, _MAX_BLOCK // max(1, k * d))
    c = np.asarray(centroids, dtype=np.float64)
    for start in range(0, n, step):
        x = np.asarray(points[start:start + step], dtype=np.float64)
        diff = x[:, None, :] - c[None, :, :]
        dist = np.einsum("nkd,nkd->nk", diff, diff)
        idx = np.argmin(dist, axis=1)
        labels[start:start + step] = idx
        best[start:start + step] = dist[np.arange(len(idx)), idx]
    return labels, best


def pairwise_distances(x):
    """Condensed Euclidean distances for pairs ``i < j`` in row-major order."""
    x = np.asarray(x, dtype=np.float64)
    b = x.shape[0]
    out = np.empty(b * (b - 1) // 2, dtype=np.float64)
    pos = 0
    for i in range(b - 1):
        diff = x[i + 1:] - x[i]
        seg = np.sqrt(np.einsum("nd,nd->n", diff, diff))
        out[pos:pos + seg.size] = seg
        pos += seg.size
    return out
