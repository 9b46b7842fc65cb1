"""PHI-S: PCA-Hadamard isotropic standardization of teacher features.

The fitted map is ``y = R (x - mu) / s`` with ``R = H V^T``: rotate into the
PCA basis, then spread the variance evenly over channels with a normalized
Hadamard matrix. A single scalar ``s`` keeps the map isotropic, so
distances are only rescaled, never distorted.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .core import (
    DegenerateInput,
    DimMismatch,
    InsufficientSamples,
    NotPSD,
    OrderNotConstructible,
    ValidationError,
    as_embedding,
)

_CHUNK = 8192
# Between/total variance of the optimal 2-means split of a 1-D Gaussian.
GAUSSIAN_SPLIT_RATIO = 2.0 / math.pi


@dataclass(frozen=True)
class MomentEstimate:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int


@dataclass(frozen=True)
class PhisTransform:
    mean: np.ndarray
    rotation: np.ndarray
    scale: float

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def linear_map(self) -> np.ndarray:
        return self.rotation / self.scale


@dataclass(frozen=True)
class MultimodalityReport:
    score: float
    flagged: bool
    split_ratio: float
    threshold: float


def estimate_moments(samples) -> MomentEstimate:
    """Mean and unbiased covariance, accumulated chunk-wise in float64."""
    x = as_embedding(samples, "samples")
    n, d = x.shape
    if n < 2:
        raise InsufficientSamples(f"need at least 2 samples to estimate moments, got {n}")
    total = np.zeros(d, dtype=np.float64)
    for start in range(0, n, _CHUNK):
        total += x[start:start + _CHUNK].astype(np.float64).sum(axis=0)
    mean = total / n
    cov = np.zeros((d, d), dtype=np.float64)
    for start in range(0, n, _CHUNK):
        c = x[start:start + _CHUNK].astype(np.float64) - mean
        cov += c.T @ c
    cov /= n - 1
    cov = 0.5 * (cov + cov.T)
    return MomentEstimate(mean, cov, n)


# --- Hadamard matrices ------------------------------------------------------


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    if n % 2 == 0:
        return n == 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return False
        f += 2
    return True


def _jacobsthal(q: int) -> np.ndarray:
    residues = np.zeros(q, dtype=np.int64)
    residues[[(i * i) % q for i in range(1, q)]] = 1
    chi = np.where(residues == 1, 1, -1)
    chi[0] = 0
    idx = (np.arange(q)[None, :] - np.arange(q)[:, None]) % q
    return chi[idx]


def _paley1(q: int) -> np.ndarray:
    n = q + 1
    s = np.zeros((n, n), dtype=np.int64)
    s[0, 1:] = 1
    s[1:, 0] = -1
    s[1:, 1:] = _jacobsthal(q)
    return s + np.eye(n, dtype=np.int64)


def _paley2(q: int) -> np.ndarray:
    n = q + 1
    c = np.zeros((n, n), dtype=np.int64)
    c[0, 1:] = 1
    c[1:, 0] = 1
    c[1:, 1:] = _jacobsthal(q)
    a = np.array([[1, 1], [1, -1]], dtype=np.int64)
    b = np.array([[1, -1], [-1, -1]], dtype=np.int64)
    return np.kron(c, a) + np.kron(np.eye(n, dtype=np.int64), b)


def _base_recipe(order: int):
    if order == 1:
        return ("unit",)
    if order & (order - 1) == 0:
        return ("sylvester", order)
    if _is_prime(order - 1) and (order - 1) % 4 == 3:
        return ("paley1", order - 1)
    if order % 2 == 0 and _is_prime(order // 2 - 1) and (order // 2 - 1) % 4 == 1:
        return ("paley2", order // 2 - 1)
    return None


@lru_cache(maxsize=None)
def _recipe(order: int):
    base = _base_recipe(order)
    if base is not None:
        return base
    if order % 4 != 0:
        return None
    for a in range(2, order // 2 + 1):
        if order % a == 0 and _base_recipe(a) is not None:
            rest = _recipe(order // a)
            if rest is not None:
                return ("kron", _base_recipe(a), rest)
    return None


def _build(recipe) -> np.ndarray:
    kind = recipe[0]
    if kind == "unit":
        return np.ones((1, 1), dtype=np.int64)
    if kind == "sylvester":
        h = np.ones((1, 1), dtype=np.int64)
        while h.shape[0] < recipe[1]:
            h = np.block([[h, h], [h, -h]])
        return h
    if kind == "paley1":
        return _paley1(recipe[1])
    if kind == "paley2":
        return _paley2(recipe[1])
    return np.kron(_build(recipe[1]), _build(recipe[2]))


def hadamard_construction(order: int) -> str:
    """Human-readable construction used for ``order`` (for logs and errors)."""
    recipe = _recipe(order) if order >= 1 else None
    if recipe is None:
        raise OrderNotConstructible(order)

    def fmt(r):
        if r[0] == "kron":
            return f"{fmt(r[1])} x {fmt(r[2])}"
        if r[0] == "unit":
            return "1"
        return f"{r[0]}({r[1]})"

    return fmt(recipe)


def hadamard(order: int) -> np.ndarray:
    """Orthonormal Hadamard matrix of the given order (entries +-1/sqrt(order)).

    Sylvester doubling for powers of two, Paley I (q prime, q = 3 mod 4,
    order q+1), Paley II (q prime, q = 1 mod 4, order 2(q+1)), and
    Kronecker products of those.
    """
    recipe = _recipe(order) if order >= 1 else None
    if recipe is None:
        raise OrderNotConstructible(order)
    return _build(recipe).astype(np.float64) / math.sqrt(order)


# --- fit / apply / invert ---------------------------------------------------


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of each column positive."""
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def fit_phis(m: MomentEstimate, psd_tol: float = 1e-6) -> PhisTransform:
    cov = np.asarray(m.covariance, dtype=np.float64)
    d = cov.shape[0]
    if cov.shape != (d, d) or not np.allclose(cov, cov.T, atol=1e-6):
        raise ValidationError("covariance must be a symmetric square matrix")
    h = hadamard(d)
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(evals, kind="stable")[::-1]
    evals, evecs = evals[order], _fix_signs(evecs[:, order])
    top = max(1.0, abs(float(evals[0])))
    if evals[-1] < -psd_tol * top:
        raise NotPSD(f"covariance has eigenvalue {evals[-1]:.3e}")
    evals = np.maximum(evals, 0.0)
    scale = math.sqrt(float(evals.mean()))
    if scale == 0.0:
        raise DegenerateInput("features have zero variance; PHI-S scale would be 0")
    return PhisTransform(np.asarray(m.mean, np.float64), h @ evecs.T, scale)


def _row_map(x: np.ndarray, fn, threads: int) -> np.ndarray:
    chunks = [x[s:s + _CHUNK] for s in range(0, x.shape[0], _CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    if not parts:
        return np.zeros((0, x.shape[1]), dtype=np.float32)
    return np.concatenate(parts)


def apply_phis(t: PhisTransform, x, threads: int = 1) -> np.ndarray:
    x = as_embedding(x, "features")
    if x.shape[1] != t.dim:
        raise DimMismatch(f"features have dim {x.shape[1]}, transform expects {t.dim}")
    rt = t.rotation.T / t.scale
    return _row_map(x, lambda c: ((c.astype(np.float64) - t.mean) @ rt).astype(np.float32), threads)


def invert_phis(t: PhisTransform, y, threads: int = 1) -> np.ndarray:
    y = as_embedding(y, "features")
    if y.shape[1] != t.dim:
        raise DimMismatch(f"features have dim {y.shape[1]}, transform expects {t.dim}")
    r = t.rotation * t.scale
    return _row_map(y, lambda c: (c.astype(np.float64) @ r + t.mean).astype(np.float32), threads)


def transformed_covariance(t: PhisTransform, cov: np.ndarray) -> np.ndarray:
    r = t.rotation
    return r @ cov @ r.T / t.scale**2


def _best_split_ratio(p: np.ndarray) -> float:
    """Between/total variance of the optimal two-cluster split of 1-D data."""
    p = np.sort(p - p.mean())
    total = float(np.dot(p, p))
    if total <= 0.0:
        return 0.0
    n = p.size
    csum = np.cumsum(p)
    left = csum[:-1]
    k = np.arange(1, n, dtype=np.float64)
    right = csum[-1] - left
    between = left**2 / k + right**2 / (n - k)
    return float(min(1.0, between.max() / total))


def multimodality_score(samples, threshold: float = 0.5) -> MultimodalityReport:
    """How strongly the leading principal component splits into two modes.

    The samples are projected on their top principal component and split
    optimally into two groups. The between-group share of variance is 2/pi
    for a Gaussian and tends to 1 for two well separated modes; the score
    rescales that share so a Gaussian maps to 0 and perfect separation to 1.
    """
    x = as_embedding(samples, "samples")
    if x.shape[0] < 10:
        raise InsufficientSamples(f"need at least 10 samples, got {x.shape[0]}")
    m = estimate_moments(x)
    if not np.any(m.covariance):
        return MultimodalityReport(0.0, False, 0.0, threshold)
    evals, evecs = np.linalg.eigh(m.covariance)
    top = _fix_signs(evecs[:, -1:])[:, 0]
    proj = (x.astype(np.float64) - m.mean) @ top
    ratio = _best_split_ratio(proj)
    score = min(1.0, max(0.0, (ratio - GAUSSIAN_SPLIT_RATIO) / (1.0 - GAUSSIAN_SPLIT_RATIO)))
    return MultimodalityReport(score, score > threshold, ratio, threshold)


# --- serialization ----------------------------------------------------------


def save_transform(t: PhisTransform, path) -> None:
    """JSON header plus raw little-endian float32 payloads beside it."""
    path = Path(path)
    stem = path.name[:-5] if path.name.endswith(".json") else path.name
    mean_file, rot_file = f"{stem}.mean.f32", f"{stem}.rotation.f32"
    t.mean.astype("<f4").tofile(path.parent / mean_file)
    t.rotation.astype("<f4").tofile(path.parent / rot_file)
    header = {"dim": t.dim, "scale": t.scale, "mean_file": mean_file, "rotation_file": rot_file}
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_transform(path) -> PhisTransform:
    path = Path(path)
    header = json.loads(path.read_text())
    d = int(header["dim"])
    mean = np.fromfile(path.parent / header["mean_file"], dtype="<f4")
    rot = np.fromfile(path.parent / header["rotation_file"], dtype="<f4")
    if mean.size != d or rot.size != d * d:
        raise ValidationError(f"PHI-S payload sizes do not match dim {d}")
    scale = float(header["scale"])
    if not scale > 0:
        raise ValidationError("PHI-S scale must be positive")
    return PhisTransform(mean.astype(np.float64), rot.reshape(d, d).astype(np.float64), scale)
