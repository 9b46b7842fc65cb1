"""Kernel dispatch: compiled core when built, numpy fallback otherwise.

Set ``AMOEKIT_PURE_PYTHON=1`` before import to force the fallback.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _pykernels

if os.environ.get("AMOEKIT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND: str = _impl.BACKEND

# Fixed chunking keeps outputs identical for any thread count.
ROW_CHUNK = 4096


def available_backends() -> dict:
    backends = {"python": _pykernels}
    try:
        from . import _ckernels

        backends["cython"] = _ckernels
    except ImportError:
        pass
    return backends


def ffd_assign(lengths, capacity: int, max_items: int, impl=None):
    impl = impl or _impl
    lengths = np.ascontiguousarray(lengths, dtype=np.int64)
    return impl.ffd_assign(lengths, int(capacity), int(max_items))


def lpt_assign(loads, num_bins: int, impl=None):
    impl = impl or _impl
    return impl.lpt_assign(np.ascontiguousarray(loads, dtype=np.int64), int(num_bins))


def nearest_centroid(points, centroids, threads: int = 1, impl=None):
    """Nearest centroid (ties to lowest index) and squared distance per row."""
    impl = impl or _impl
    points = np.ascontiguousarray(points, dtype=np.float32)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    n = points.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    starts = range(0, n, ROW_CHUNK)
    chunks = [points[s:s + ROW_CHUNK] for s in starts]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: impl.nearest_centroid(c, centroids), chunks))
    else:
        parts = [impl.nearest_centroid(c, centroids) for c in chunks]
    labels = np.concatenate([p[0] for p in parts])
    dist = np.concatenate([p[1] for p in parts])
    return labels, dist


def pairwise_distances(x, impl=None):
    impl = impl or _impl
    return impl.pairwise_distances(np.ascontiguousarray(x, dtype=np.float64))
