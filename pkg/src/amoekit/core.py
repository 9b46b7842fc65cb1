"""Shared domain types, validated constructors and the error hierarchy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FLOAT = np.float32


class AmoeError(Exception):
    """Base class for every error raised by the library."""

    exit_code = 2


class ValidationError(AmoeError, ValueError):
    exit_code = 2


class NumericError(AmoeError, ArithmeticError):
    exit_code = 3


class FormatError(AmoeError, OSError):
    """Malformed input file."""

    exit_code = 1


class LengthMismatch(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class DimMismatch(ShapeMismatch):
    pass


class RowMismatch(ShapeMismatch):
    pass


class NonFinite(NumericError):
    pass


class ZeroNormVector(NumericError):
    pass


class DegenerateInput(NumericError):
    pass


class NotPSD(NumericError):
    pass


class InsufficientSamples(ValidationError):
    pass


class EmptyBatch(ValidationError):
    pass


class EmptyTeacherSet(ValidationError):
    pass


class ImageTooLarge(ValidationError):
    def __init__(self, image_id: str, tokens: int, c_max: int):
        super().__init__(
            f"image {image_id!r} needs {tokens} tokens but the sequence budget is {c_max}"
        )
        self.image_id = image_id


class EmptyPool(ValidationError):
    pass


class OrderNotConstructible(ValidationError):
    def __init__(self, order: int):
        super().__init__(f"no Hadamard construction available for order {order}")
        self.order = order


class KTooLarge(ValidationError):
    pass


class TargetTooLarge(ValidationError):
    pass


class EmptyTrain(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def validate_embedding_matrix(rows: int, dim: int, data: Sequence[float] | np.ndarray) -> np.ndarray:
    """Build an immutable ``(rows, dim)`` float32 matrix from flat row-major data."""
    if rows < 0 or dim < 0:
        raise LengthMismatch(f"negative shape ({rows}, {dim})")
    flat = np.asarray(data, dtype=FLOAT).reshape(-1)
    if flat.size != rows * dim:
        raise LengthMismatch(f"expected {rows}x{dim}={rows * dim} values, got {flat.size}")
    if not np.all(np.isfinite(flat)):
        raise NonFinite("embedding matrix contains NaN or Inf")
    return _freeze(flat.reshape(rows, dim).copy())


def as_embedding(x, name: str = "matrix") -> np.ndarray:
    """Coerce an array-like to a validated 2-D float32 embedding matrix."""
    arr = np.asarray(x)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype != FLOAT:
        arr = arr.astype(FLOAT)
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return arr


def as_matrix64(x, name: str = "matrix") -> np.ndarray:
    """Like :func:`as_embedding` but keeps float64 precision (analysis inputs)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return arr


def num_patch_tokens(width_px: int, height_px: int, patch_size: int) -> int:
    if width_px <= 0 or height_px <= 0 or patch_size <= 0:
        raise ValidationError(
            f"image dimensions and patch size must be positive, got {width_px}x{height_px}/{patch_size}"
        )
    return -(-height_px // patch_size) * -(-width_px // patch_size)


@dataclass(frozen=True)
class ImageTokenRecord:
    """An image and the number of patch tokens it occupies.

    Partial patches at the border are padded up to full patches, so the
    token count uses ceiling division on both axes.
    """

    id: str
    width_px: int
    height_px: int
    patch_size: int = 16
    num_tokens: int = field(default=-1)

    def __post_init__(self):
        expected = num_patch_tokens(self.width_px, self.height_px, self.patch_size)
        if self.num_tokens == -1:
            object.__setattr__(self, "num_tokens", expected)
        elif self.num_tokens != expected:
            raise ValidationError(
                f"image {self.id!r}: num_tokens={self.num_tokens} but {expected} patches expected"
            )

    @classmethod
    def with_tokens(cls, image_id: str, num_tokens: int) -> "ImageTokenRecord":
        """Record for a 1-pixel-high strip with exactly ``num_tokens`` patches.

        Handy when only token counts matter (tests, synthetic load).
        """
        return cls(image_id, width_px=num_tokens, height_px=1, patch_size=1)


@dataclass(frozen=True)
class TeacherConfig:
    name: str
    summary_dim: int
    patch_dim: int
    num_registers: int = 0
    has_register_loss: bool = False

    def __post_init__(self):
        if self.num_registers < 0:
            raise ValidationError("num_registers must be >= 0")
        if self.has_register_loss and self.num_registers == 0:
            raise ValidationError(f"teacher {self.name!r} has a register loss but no registers")
        if self.summary_dim <= 0 or self.patch_dim <= 0:
            raise ValidationError("feature dimensions must be positive")


@dataclass(frozen=True)
class GlobalBatchView:
    """Packed sequences grouped by rank: ``per_rank_sequences[r][j]``."""

    per_rank_sequences: tuple

    @property
    def num_ranks(self) -> int:
        return len(self.per_rank_sequences)

    @property
    def b_global(self) -> int:
        return sum(len(seq.entries) for rank in self.per_rank_sequences for seq in rank)

    def rank_loads(self) -> list[int]:
        return [sum(seq.used_tokens for seq in rank) for rank in self.per_rank_sequences]

    def image_ids(self) -> list[list[list[str]]]:
        return [[[e.image_id for e in seq.entries] for seq in rank] for rank in self.per_rank_sequences]

