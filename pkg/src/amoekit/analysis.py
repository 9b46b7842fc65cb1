"""Linear CKA between expert-routed student tokens and teacher layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import DegenerateInput, RowMismatch, ValidationError, as_matrix64

DEFAULT_CLIP = (-10.0, 10.0)


@dataclass(frozen=True)
class RoutedTokenSet:
    expert_id: str
    student_tokens: np.ndarray
    teacher_tokens_per_layer: Mapping[str, np.ndarray]
    provenance: str = ""

    def __post_init__(self):
        n = np.shape(self.student_tokens)[0]
        for layer, t in self.teacher_tokens_per_layer.items():
            if np.shape(t)[0] != n:
                raise RowMismatch(
                    f"expert {self.expert_id!r}: layer {layer!r} has {np.shape(t)[0]} rows, student has {n}"
                )
        if n < 2:
            raise ValidationError(f"expert {self.expert_id!r} needs at least 2 routed tokens")


def centered_cross_cov(a, b) -> np.ndarray:
    """``A^T B - (1/N) (sum a_i)(sum b_i)^T``, evaluated on centered columns."""
    a = as_matrix64(a, "a")
    b = as_matrix64(b, "b")
    if a.shape[0] != b.shape[0]:
        raise RowMismatch(f"row counts differ: {a.shape[0]} vs {b.shape[0]}")
    return (a - a.mean(axis=0)).T @ (b - b.mean(axis=0))


def linear_cka(x, y) -> float:
    cxy = centered_cross_cov(x, y)
    nx = np.linalg.norm(centered_cross_cov(x, x))
    ny = np.linalg.norm(centered_cross_cov(y, y))
    if nx == 0 or ny == 0:
        raise DegenerateInput("CKA undefined: an input has zero centered variance")
    value = float(np.sum(cxy * cxy) / (nx * ny))
    if not -1e-8 <= value <= 1 + 1e-8:
        raise DegenerateInput(f"CKA value {value} outside [0, 1]")
    return min(1.0, max(0.0, value))


def expert_teacher_alignment(
    sets: Sequence[RoutedTokenSet], clip_range: tuple[float, float] | None = DEFAULT_CLIP
) -> tuple[np.ndarray, list[str], list[str]]:
    """CKA matrix of shape (experts, layers) plus expert and layer labels.

    Teacher tokens are clipped to ``clip_range`` first (pass ``None`` to
    skip). Every set must provide the same teacher layers.
    """
    if not sets:
        raise ValidationError("no routed token sets given")
    layers = list(sets[0].teacher_tokens_per_layer)
    for s in sets[1:]:
        if list(s.teacher_tokens_per_layer) != layers:
            raise ValidationError(f"expert {s.expert_id!r} lists different teacher layers")
    out = np.zeros((len(sets), len(layers)), dtype=np.float64)
    for i, s in enumerate(sets):
        for j, layer in enumerate(layers):
            y = np.asarray(s.teacher_tokens_per_layer[layer], dtype=np.float32)
            if clip_range is not None:
                y = np.clip(y, clip_range[0], clip_range[1])
            out[i, j] = linear_cka(s.student_tokens, y)
    return out, [s.expert_id for s in sets], layers
