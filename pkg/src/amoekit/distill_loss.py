"""Multi-teacher distillation losses.

Per-image summary/patch/register terms are normalized by the image's own
token count before a flat mean over the global batch, so an image
contributes the same weight whatever its resolution or packing. The
relational term (ARKD) penalizes pairwise-distance errors one-sidedly,
gated on whether a pair sits below the batch-median teacher distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .core import (
    EmptyBatch,
    EmptyTeacherSet,
    ShapeMismatch,
    TeacherConfig,
    ValidationError,
    ZeroNormVector,
)


@dataclass(frozen=True)
class PerImageFeatures:
    teacher_summary: np.ndarray
    student_summary: np.ndarray
    teacher_patches: np.ndarray
    student_patches: np.ndarray
    teacher_registers: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), np.float32))
    student_registers: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), np.float32))

    def __post_init__(self):
        ts, ss = np.ravel(self.teacher_summary), np.ravel(self.student_summary)
        if ts.shape != ss.shape:
            raise ShapeMismatch(f"summary shapes differ: {ts.shape} vs {ss.shape}")
        tp, sp = np.atleast_2d(self.teacher_patches), np.atleast_2d(self.student_patches)
        if tp.shape != sp.shape:
            raise ShapeMismatch(f"patch shapes differ: {tp.shape} vs {sp.shape}")
        if tp.shape[0] < 1:
            raise ShapeMismatch("an image needs at least one patch token")
        tr, sr = np.atleast_2d(self.teacher_registers), np.atleast_2d(self.student_registers)
        if tr.shape != sr.shape:
            raise ShapeMismatch(f"register shapes differ: {tr.shape} vs {sr.shape}")

    @property
    def num_tokens(self) -> int:
        return np.atleast_2d(self.teacher_patches).shape[0]


@dataclass(frozen=True)
class SmoothL1Config:
    beta: float = 1.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValidationError("smooth-L1 beta must be positive")


@dataclass(frozen=True)
class ArkdReport:
    loss: float
    teacher_scale: float
    median: float
    pair_count: int
    degenerate: bool = False
    grad_student: np.ndarray | None = None


def _sq_err_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = np.atleast_2d(np.asarray(a, np.float64)) - np.atleast_2d(np.asarray(b, np.float64))
    return np.einsum("nd,nd->n", diff, diff)


def summary_loss(f: PerImageFeatures) -> float:
    """``1 - cos(teacher, student)`` on the summary vectors."""
    t = np.ravel(f.teacher_summary).astype(np.float64)
    s = np.ravel(f.student_summary).astype(np.float64)
    nt, ns = np.linalg.norm(t), np.linalg.norm(s)
    if nt == 0 or ns == 0:
        raise ZeroNormVector("summary vector has zero norm")
    cos = float(np.dot(t, s) / (nt * ns))
    return 1.0 - min(1.0, max(-1.0, cos))


def patch_loss(f: PerImageFeatures) -> float:
    """Squared L2 error summed over channels, averaged over the image's tokens."""
    return math.fsum(_sq_err_rows(f.teacher_patches, f.student_patches)) / f.num_tokens


def register_loss(f: PerImageFeatures, t: TeacherConfig) -> float:
    if not t.has_register_loss:
        return 0.0
    tr = np.atleast_2d(f.teacher_registers)
    if tr.shape[0] != t.num_registers or tr.size == 0:
        raise ShapeMismatch(
            f"teacher {t.name!r} expects {t.num_registers} registers, got {tr.shape[0]} rows"
        )
    return math.fsum(_sq_err_rows(f.teacher_registers, f.student_registers)) / t.num_registers


def per_image_loss(f: PerImageFeatures, t: TeacherConfig) -> float:
    return summary_loss(f) + patch_loss(f) + register_loss(f, t)


def _flatten(nested) -> list[float]:
    if isinstance(nested, (int, float, np.floating, np.integer)):
        return [float(nested)]
    out: list[float] = []
    for item in nested:
        out.extend(_flatten(item))
    return out


def global_aggregate(per_image_losses) -> float:
    """Mean of per-image losses over a ``[rank][sequence][image]`` nesting.

    Any nesting depth is accepted. The sum is exactly rounded, so the
    result does not depend on how images were grouped or ordered.
    """
    flat = _flatten(per_image_losses)
    if not flat:
        raise EmptyBatch("global batch contains no images")
    return math.fsum(flat) / len(flat)


def total_loss(per_teacher_globals: Mapping[str, float]) -> float:
    if not per_teacher_globals:
        raise EmptyTeacherSet("no teachers given")
    return math.fsum(per_teacher_globals.values())


def per_teacher_objective(global_loss: float, arkd: float) -> float:
    return global_loss + arkd


def smooth_l1(x, cfg: SmoothL1Config = SmoothL1Config()):
    """Huber-style smooth L1: quadratic below ``beta``, linear above."""
    ax = np.abs(x)
    out = np.where(ax < cfg.beta, 0.5 * np.square(x) / cfg.beta, ax - 0.5 * cfg.beta)
    return float(out) if np.ndim(out) == 0 else out


def _smooth_l1_grad(x: np.ndarray, beta: float) -> np.ndarray:
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


def lower_median(values: np.ndarray) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    return float(v[(v.size - 1) // 2])


def arkd_loss(
    teacher_summaries,
    student_summaries,
    cfg: SmoothL1Config = SmoothL1Config(),
    eps: float = 1e-8,
    symmetric: bool = False,
    return_grad: bool = False,
) -> ArkdReport:
    """Asymmetric relational distillation loss over a gathered global batch.

    Distances are normalized by the mean teacher distance. Pairs strictly
    below the median teacher distance are penalized only when the student
    pulls them apart; the rest only when the student pulls them together.
    ``symmetric=True`` gives the two-sided variant (both penalties, weight 1).

    Distances are symmetric, so the mean over ordered pairs ``i != j`` is
    computed as the mean over unordered pairs.
    """
    t = np.atleast_2d(np.asarray(teacher_summaries, np.float64))
    s = np.atleast_2d(np.asarray(student_summaries, np.float64))
    if t.shape != s.shape:
        raise ShapeMismatch(f"teacher {t.shape} and student {s.shape} summaries differ")
    b = t.shape[0]
    pair_count = b * (b - 1)
    zero_grad = np.zeros_like(s) if return_grad else None
    if b < 2:
        return ArkdReport(0.0, 0.0, 0.0, pair_count, True, zero_grad)

    dt = kernels.pairwise_distances(t)
    ds = kernels.pairwise_distances(s)
    scale = math.fsum(dt) / dt.size
    if scale < eps:
        return ArkdReport(0.0, scale, 0.0, pair_count, True, zero_grad)
    dt_hat = dt / scale
    ds_hat = ds / scale
    median = lower_median(dt_hat)

    shrink = np.maximum(ds_hat - dt_hat, 0.0)
    expand = np.maximum(dt_hat - ds_hat, 0.0)
    if symmetric:
        w_shrink = np.ones_like(dt_hat)
        w_expand = np.ones_like(dt_hat)
    else:
        w_shrink = (dt_hat < median).astype(np.float64)
        w_expand = 1.0 - w_shrink
    terms = w_expand * smooth_l1(expand, cfg) + w_shrink * smooth_l1(shrink, cfg)
    loss = math.fsum(terms) / terms.size

    grad = None
    if return_grad:
        # d loss / d ds_hat per unordered pair, then chain through ||s_i - s_j|| / scale.
        g_pair = (
            w_shrink * _smooth_l1_grad(shrink, cfg.beta) * (ds_hat > dt_hat)
            - w_expand * _smooth_l1_grad(expand, cfg.beta) * (dt_hat > ds_hat)
        ) / (terms.size * scale)
        iu, ju = np.triu_indices(b, k=1)
        diff = s[iu] - s[ju]
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(ds[:, None] > 0, diff / ds[:, None], 0.0)
        contrib = g_pair[:, None] * unit
        grad = np.zeros_like(s)
        np.add.at(grad, iu, contrib)
        np.add.at(grad, ju, -contrib)
    return ArkdReport(float(loss), float(scale), median, pair_count, False, grad)


def teacher_losses(
    features: Sequence[PerImageFeatures],
    teacher: TeacherConfig,
    grouping=None,
    arkd: str = "on",
    cfg: SmoothL1Config = SmoothL1Config(),
) -> dict:
    """Every loss term for one teacher over a global batch.

    ``grouping`` optionally nests image indices as ``[rank][sequence][image]``;
    the global term is identical either way. ``arkd`` is ``"on"``,
    ``"off"`` or ``"symmetric"``.
    """
    if arkd not in ("on", "off", "symmetric"):
        raise ValidationError(f"arkd mode must be on, off or symmetric, not {arkd!r}")
    if not features:
        raise EmptyBatch("global batch contains no images")
    parts = [(summary_loss(f), patch_loss(f), register_loss(f, teacher)) for f in features]
    per_image = [a + b + c for a, b, c in parts]
    if grouping is None:
        nested = per_image
    else:
        nested = [[[per_image[i] for i in seq] for seq in rank] for rank in grouping]
        if sorted(_flatten(grouping)) != list(range(len(features))):
            raise ValidationError("grouping must cover every image exactly once")
    n = len(features)
    glob = global_aggregate(nested)
    report = {
        "summary": math.fsum(p[0] for p in parts) / n,
        "patch": math.fsum(p[1] for p in parts) / n,
        "register": math.fsum(p[2] for p in parts) / n,
        "global": glob,
        "arkd": 0.0,
        "b_global": n,
    }
    if arkd != "off":
        t = np.stack([np.ravel(f.teacher_summary) for f in features])
        s = np.stack([np.ravel(f.student_summary) for f in features])
        rep = arkd_loss(t, s, cfg, symmetric=(arkd == "symmetric"))
        report.update(
            arkd=rep.loss, arkd_teacher_scale=rep.teacher_scale, arkd_median=rep.median,
            arkd_pair_count=rep.pair_count, arkd_degenerate=rep.degenerate,
        )
    report["objective"] = per_teacher_objective(glob, report["arkd"])
    return report
