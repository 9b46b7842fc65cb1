"""Hierarchical k-means curation and balanced sampling.

Points are clustered into fine leaves, leaf centroids are clustered again,
and so on up the tree. Sampling then walks the tree top-down giving every
node an equal share of the budget, which flattens long-tailed concept
distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .core import DimMismatch, KTooLarge, TargetTooLarge, ValidationError, as_embedding

# Desk-scale default; the paper-scale tree is kept as a preset only.
DEFAULT_LEVEL_KS = (1000, 100, 20, 5)
PAPER_LEVEL_KS = (20_000_000, 500_000, 50_000, 20_000)


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_history: tuple[float, ...]
    n_iter: int


@dataclass(frozen=True)
class ClusterLevel:
    centroids: np.ndarray
    parent_of: np.ndarray | None  # None at the top level


@dataclass(frozen=True)
class ClusterTree:
    levels: tuple[ClusterLevel, ...]  # levels[0] is the finest
    point_assignments: np.ndarray | None = None
    inertia_histories: tuple[tuple[float, ...], ...] = ()  # per level, from the winning k-means run

    @property
    def level_sizes(self) -> list[int]:
        return [lvl.centroids.shape[0] for lvl in self.levels]

    @property
    def dim(self) -> int:
        return self.levels[0].centroids.shape[1]


@dataclass(frozen=True)
class AssignmentTable:
    ids: tuple[str, ...]
    leaf: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.ids) != len(self.leaf):
            raise ValidationError("ids and leaf assignments differ in length")


def _l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x.astype(np.float64), axis=1, keepdims=True)
    return (x / np.where(norms > 0, norms, 1.0)).astype(np.float32)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator, threads: int = 1) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    _, d2 = kernels.nearest_centroid(x, x[chosen], threads)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # Remaining points coincide with chosen centroids.
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        _, dn = kernels.nearest_centroid(x, x[[nxt]], threads)
        d2 = np.minimum(d2, dn)
    return x[chosen].astype(np.float64)


def _centroid_means(x: np.ndarray, labels: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(labels, minlength=k)
    # bincount accumulates in float64 in row order: deterministic.
    sums = np.stack(
        [np.bincount(labels, weights=x[:, c], minlength=k) for c in range(x.shape[1])], axis=1
    )
    return sums, counts


def _reseed_empty(x, centroids, labels, dist, counts):
    """Move each empty centroid onto the point farthest from its own centroid."""
    taken = set()
    order = np.argsort(-dist, kind="stable")
    for j in np.flatnonzero(counts == 0):
        for i in order:
            if int(i) not in taken and counts[labels[i]] > 1:
                break
        else:
            continue
        i = int(i)
        taken.add(i)
        counts[labels[i]] -= 1
        centroids[j] = x[i]
        labels[i] = j
        counts[j] = 1
        dist[i] = 0.0


def kmeans(points, k: int, max_iters: int = 100, seed: int = 0, threads: int = 1,
           n_init: int = 1) -> KMeansResult:
    """Lloyd's algorithm from seeded k-means++ starts.

    ``inertia_history`` holds the inertia after each assignment step and
    never increases: iteration stops once assignments settle or an update
    fails to lower the inertia (the last improving state is kept). With
    ``n_init > 1`` the run with the lowest final inertia wins (earliest on
    ties).
    """
    x = as_embedding(points, "points")
    n = x.shape[0]
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k > n:
        raise KTooLarge(f"k={k} exceeds the {n} points available")
    if n_init < 1:
        raise ValidationError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = _lloyd(x, k, max_iters, rng, threads)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def _lloyd(x: np.ndarray, k: int, max_iters: int, rng: np.random.Generator, threads: int) -> KMeansResult:
    centroids = kmeans_plusplus(x, k, rng, threads)
    labels, dist = kernels.nearest_centroid(x, centroids, threads)
    inertia = float(dist.sum())
    history = [inertia]
    it = 0
    for it in range(1, max_iters + 1):
        sums, counts = _centroid_means(x, labels, k)
        new_centroids = centroids.copy()
        filled = counts > 0
        new_centroids[filled] = sums[filled] / counts[filled, None]
        if not filled.all():
            _reseed_empty(x, new_centroids, labels.copy(), dist.copy(), counts.copy())
        new_labels, new_dist = kernels.nearest_centroid(x, new_centroids, threads)
        new_inertia = float(new_dist.sum())
        if new_inertia > inertia:
            break
        settled = np.array_equal(new_labels, labels)
        centroids, labels, dist = new_centroids, new_labels, new_dist
        if new_inertia < inertia:
            history.append(new_inertia)
        inertia = new_inertia
        if settled:
            break
    counts = np.bincount(labels, minlength=k)
    if (counts == 0).any():
        # Guarantee non-empty clusters on exit so every tree node has members.
        _reseed_empty(x, centroids, labels, dist, counts)
        inertia = float(dist.sum())
        if inertia < history[-1]:
            history.append(inertia)
    return KMeansResult(centroids.astype(np.float32), labels, inertia, tuple(history), it)


def build_hierarchy(
    points,
    level_ks: Sequence[int],
    max_iters: int = 100,
    seed: int = 0,
    normalize: bool = False,
    threads: int = 1,
    n_init: int = 1,
) -> ClusterTree:
    """Cluster points into ``level_ks[0]`` leaves, then centroids into coarser levels."""
    level_ks = [int(k) for k in level_ks]
    if not level_ks:
        raise ValidationError("level_ks must not be empty")
    if any(b >= a for a, b in zip(level_ks, level_ks[1:])):
        raise ValidationError(f"level_ks must be strictly decreasing, got {level_ks}")
    x = as_embedding(points, "points")
    if normalize:
        x = _l2_normalize(x)
    if level_ks[0] > x.shape[0]:
        raise KTooLarge(f"level-1 k={level_ks[0]} exceeds the {x.shape[0]} points available")
    results = []
    data = x
    for depth, k in enumerate(level_ks):
        res = kmeans(data, k, max_iters, seed + depth, threads, n_init)
        results.append(res)
        data = res.centroids
    levels = []
    for depth, res in enumerate(results):
        parent = results[depth + 1].assignments.astype(np.int64) if depth + 1 < len(results) else None
        levels.append(ClusterLevel(res.centroids, parent))
    return ClusterTree(tuple(levels), results[0].assignments.astype(np.int64),
                       tuple(res.inertia_history for res in results))


def assign(points, tree: ClusterTree, ids: Sequence[str] | None = None, threads: int = 1,
           normalize: bool = False) -> AssignmentTable:
    """Nearest level-1 centroid per point, ties to the lowest index."""
    x = as_embedding(points, "points")
    if x.shape[1] != tree.dim:
        raise DimMismatch(f"points have dim {x.shape[1]}, tree has dim {tree.dim}")
    if normalize:
        x = _l2_normalize(x)
    labels, _ = kernels.nearest_centroid(x, tree.levels[0].centroids, threads)
    if ids is None:
        ids = [str(i) for i in range(x.shape[0])]
    return AssignmentTable(tuple(ids), labels.astype(np.int64))


def allocate_quota(quota: int, capacities: Sequence[int]) -> list[int]:
    """Split ``quota`` as evenly as capacities allow.

    Whatever a saturated node cannot take is spread evenly over the
    unsaturated ones; indivisible remainders go one each to the
    lowest-index unsaturated nodes.
    """
    caps = [int(c) for c in capacities]
    if quota > sum(caps):
        raise TargetTooLarge(f"quota {quota} exceeds capacity {sum(caps)}")
    alloc = [0] * len(caps)
    remaining = quota
    active = [i for i, c in enumerate(caps) if c > 0]
    while remaining > 0:
        share, extra = divmod(remaining, len(active))
        if share == 0:
            for i in active[:extra]:
                alloc[i] += 1
            break
        for i in active:
            give = min(share, caps[i] - alloc[i])
            alloc[i] += give
            remaining -= give
        active = [i for i in active if alloc[i] < caps[i]]
    return alloc


def _children(tree: ClusterTree) -> list[list[list[int]]]:
    out = []
    for depth in range(1, len(tree.levels)):
        kids: list[list[int]] = [[] for _ in range(tree.levels[depth].centroids.shape[0])]
        for child, parent in enumerate(tree.levels[depth - 1].parent_of):
            kids[int(parent)].append(child)
        out.append(kids)
    return out


def hierarchical_sample(tree: ClusterTree, table: AssignmentTable, target_n: int, seed: int = 0) -> list[str]:
    """Balanced top-down sample of exactly ``target_n`` distinct ids."""
    n_total = len(table.ids)
    if target_n < 0:
        raise ValidationError("target_n must be >= 0")
    if target_n > n_total:
        raise TargetTooLarge(f"target {target_n} exceeds the {n_total} assigned points")
    n_leaves = tree.levels[0].centroids.shape[0]
    if len(table.leaf) and (table.leaf.min() < 0 or table.leaf.max() >= n_leaves):
        raise ValidationError("assignment table refers to leaves outside the tree")
    members: list[list[int]] = [[] for _ in range(n_leaves)]
    for idx, leaf in enumerate(table.leaf):
        members[int(leaf)].append(idx)

    kids = _children(tree)
    # sizes[depth][node]: number of points in the subtree.
    sizes = [[len(m) for m in members]]
    for depth in range(1, len(tree.levels)):
        sizes.append([sum(sizes[depth - 1][c] for c in ch) for ch in kids[depth - 1]])

    rng = np.random.default_rng(seed)
    picked: list[str] = []

    def visit(depth: int, nodes: list[int], quota: int) -> None:
        alloc = allocate_quota(quota, [sizes[depth][v] for v in nodes])
        for v, q in zip(nodes, alloc):
            if q == 0:
                continue
            if depth == 0:
                pool = members[v]
                chosen = rng.choice(len(pool), size=q, replace=False)
                picked.extend(table.ids[pool[int(i)]] for i in np.sort(chosen))
            else:
                visit(depth - 1, kids[depth - 1][v], q)

    top = len(tree.levels) - 1
    visit(top, list(range(tree.levels[top].centroids.shape[0])), target_n)
    return picked


def random_sample(ids: Sequence[str], target_n: int, seed: int = 0) -> list[str]:
    """Uniform sample without replacement (the baseline curation is measured against)."""
    if target_n > len(ids):
        raise TargetTooLarge(f"target {target_n} exceeds the {len(ids)} points available")
    idx = np.sort(np.random.default_rng(seed).choice(len(ids), size=target_n, replace=False))
    return [ids[int(i)] for i in idx]
