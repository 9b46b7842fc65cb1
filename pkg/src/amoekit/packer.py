"""Token-balanced batching.

Images of varying native resolution are packed into sequences under a
fixed token budget, each sequence gets a segment-id vector that makes
attention block-diagonal, and sequences are spread across ranks so that
per-rank token loads stay even.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .core import (
    EmptyPool,
    GlobalBatchView,
    ImageTokenRecord,
    ImageTooLarge,
    ValidationError,
)

PADDING_SEGMENT = 0


@dataclass(frozen=True)
class PackerConfig:
    c_max: int
    extra_tokens_per_image: int = 5  # CLS + 4 registers
    max_images_per_sequence: int = 16

    def __post_init__(self):
        if self.c_max <= 0:
            raise ValidationError("c_max must be positive")
        if self.max_images_per_sequence < 1:
            raise ValidationError("max_images_per_sequence must be >= 1")
        if self.extra_tokens_per_image < 0:
            raise ValidationError("extra_tokens_per_image must be >= 0")


@dataclass(frozen=True)
class SequenceEntry:
    image_id: str
    token_offset: int
    token_length: int


@dataclass(frozen=True)
class PackedSequence:
    entries: tuple[SequenceEntry, ...]

    @property
    def used_tokens(self) -> int:
        return sum(e.token_length for e in self.entries)

    @classmethod
    def from_lengths(cls, items: Iterable[tuple[str, int]]) -> "PackedSequence":
        entries = []
        offset = 0
        for image_id, length in items:
            entries.append(SequenceEntry(image_id, offset, length))
            offset += length
        return cls(tuple(entries))


@dataclass(frozen=True)
class PackingPlan:
    sequences: tuple[PackedSequence, ...]
    unassigned: tuple[str, ...] = ()

    def image_ids(self) -> list[str]:
        return [e.image_id for seq in self.sequences for e in seq.entries]


def plan_packing(images: Sequence[ImageTokenRecord], cfg: PackerConfig, seed: int = 0) -> PackingPlan:
    """First-fit-decreasing packing followed by a seeded shuffle of sequences.

    Each image occupies ``num_tokens + cfg.extra_tokens_per_image`` slots.
    Ties in length keep input order, so the plan is a pure function of
    ``(images, cfg, seed)``.
    """
    lengths = [img.num_tokens + cfg.extra_tokens_per_image for img in images]
    for img, length in zip(images, lengths):
        if length > cfg.c_max:
            raise ImageTooLarge(img.id, length, cfg.c_max)
    if not images:
        return PackingPlan(())

    order = sorted(range(len(images)), key=lambda i: (-lengths[i], i))
    sorted_lengths = [lengths[i] for i in order]
    bin_of, n_bins = kernels.ffd_assign(sorted_lengths, cfg.c_max, cfg.max_images_per_sequence)

    bins: list[list[tuple[str, int]]] = [[] for _ in range(n_bins)]
    for pos, b in enumerate(bin_of):
        i = order[pos]
        bins[int(b)].append((images[i].id, lengths[i]))
    random.Random(seed).shuffle(bins)
    return PackingPlan(tuple(PackedSequence.from_lengths(b) for b in bins))


def singleton_plan(images: Sequence[ImageTokenRecord], cfg: PackerConfig) -> PackingPlan:
    """One image per sequence: the naive baseline packing is compared against."""
    return PackingPlan(
        tuple(
            PackedSequence.from_lengths([(img.id, img.num_tokens + cfg.extra_tokens_per_image)])
            for img in images
        )
    )


def build_segment_mask(seq: PackedSequence, c_max: int) -> np.ndarray:
    """Per-token segment ids: ``1..n`` for the images, 0 for padding."""
    if seq.used_tokens > c_max:
        raise ValidationError(f"sequence uses {seq.used_tokens} tokens, budget is {c_max}")
    ids = np.full(c_max, PADDING_SEGMENT, dtype=np.int32)
    for k, e in enumerate(seq.entries, start=1):
        ids[e.token_offset:e.token_offset + e.token_length] = k
    return ids


def dense_attention_mask(segment_ids: np.ndarray) -> np.ndarray:
    """Boolean ``allowed[i, j]``; padding tokens attend to nothing."""
    seg = np.asarray(segment_ids)
    same = seg[:, None] == seg[None, :]
    real = seg != PADDING_SEGMENT
    return same & real[:, None] & real[None, :]


def partition_across_ranks(plan: PackingPlan, num_ranks: int) -> GlobalBatchView:
    """Longest-processing-time greedy split of sequences over ranks.

    Sequences keep their plan order within a rank.
    """
    if num_ranks < 1:
        raise ValidationError("num_ranks must be >= 1")
    loads = [seq.used_tokens for seq in plan.sequences]
    order = sorted(range(len(loads)), key=lambda i: (-loads[i], i))
    rank_of_sorted = kernels.lpt_assign([loads[i] for i in order], num_ranks)
    rank_of = [0] * len(loads)
    for pos, r in enumerate(rank_of_sorted):
        rank_of[order[pos]] = int(r)
    per_rank = tuple(
        tuple(seq for i, seq in enumerate(plan.sequences) if rank_of[i] == r) for r in range(num_ranks)
    )
    return GlobalBatchView(per_rank)


def padding_stats(plan: PackingPlan, cfg: PackerConfig) -> dict:
    capacity = len(plan.sequences) * cfg.c_max
    used = sum(seq.used_tokens for seq in plan.sequences)
    padded = capacity - used
    return {
        "padding_fraction": padded / capacity if capacity else 0.0,
        "tokens_total": capacity,
        "tokens_padded": padded,
        "num_sequences": len(plan.sequences),
    }


def validate_plan(plan: PackingPlan, cfg: PackerConfig, images: Sequence[ImageTokenRecord] | None = None) -> None:
    """Raise ``ValidationError`` unless every plan invariant holds."""
    seen: set[str] = set()
    for seq in plan.sequences:
        if len(seq.entries) > cfg.max_images_per_sequence:
            raise ValidationError("sequence holds too many images")
        if seq.used_tokens > cfg.c_max:
            raise ValidationError("sequence exceeds the token budget")
        offset = 0
        for e in seq.entries:
            if e.token_offset != offset or e.token_length <= 0:
                raise ValidationError("token spans are not contiguous from 0")
            offset += e.token_length
            if e.image_id in seen:
                raise ValidationError(f"image {e.image_id!r} assigned twice")
            seen.add(e.image_id)
    if images is not None:
        expected = {img.id for img in images}
        if seen != expected:
            raise ValidationError("plan does not cover the input images exactly once")


# --- multi-resolution blend -------------------------------------------------


@dataclass(frozen=True)
class ResolutionPool:
    """Images eligible for a blend, filtered by their native longer side."""

    name: str
    images: tuple[ImageTokenRecord, ...]
    native_resolution_range: tuple[int, int] = (1, 1 << 30)

    def eligible(self) -> list[ImageTokenRecord]:
        lo, hi = self.native_resolution_range
        return [img for img in self.images if lo <= max(img.width_px, img.height_px) <= hi]


@dataclass(frozen=True)
class BlendTarget:
    pool: str
    resolution_cap: int
    weight: float


@dataclass(frozen=True)
class BlendItem:
    image_id: str
    width: int
    height: int
    pool: str
    resolution_cap: int


def _apportion(weights: Sequence[float], total: int) -> list[int]:
    """Largest-remainder rounding; every count is within one of ``w * total``."""
    exact = [w * total for w in weights]
    counts = [math.floor(x) for x in exact]
    leftover = total - sum(counts)
    by_remainder = sorted(range(len(weights)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in by_remainder[:leftover]:
        counts[i] += 1
    return counts


def _downscale(img: ImageTokenRecord, cap: int) -> tuple[int, int]:
    side = max(img.width_px, img.height_px)
    if side <= cap:
        return img.width_px, img.height_px
    scale = cap / side
    return max(1, round(img.width_px * scale)), max(1, round(img.height_px * scale))


def plan_multires_blend(
    pools: Sequence[ResolutionPool],
    targets: Sequence[BlendTarget],
    total_items: int | None = None,
    seed: int = 0,
) -> list[BlendItem]:
    """Sampling manifest mixing resolution pools in the requested proportions.

    Each target draws ``round(weight * total_items)`` images (largest
    remainder) from its pool and down-samples any whose longer side exceeds
    ``resolution_cap``; images are never up-sampled. A target asking for the
    whole pool gets it in pool order; smaller draws are seeded permutations,
    larger ones repeat full passes before a seeded partial pass.
    """
    if not targets:
        raise ValidationError("at least one blend target is required")
    weights = [t.weight for t in targets]
    if any(w <= 0 for w in weights):
        raise ValidationError("blend weights must be positive")
    if not math.isclose(sum(weights), 1.0, rel_tol=0.0, abs_tol=1e-9):
        raise ValidationError(f"blend weights sum to {sum(weights)!r}, expected 1")
    by_name = {p.name: p for p in pools}
    eligible = {}
    for t in targets:
        if t.pool not in by_name:
            raise ValidationError(f"blend target refers to unknown pool {t.pool!r}")
        if t.resolution_cap <= 0:
            raise ValidationError("resolution_cap must be positive")
        items = by_name[t.pool].eligible()
        if not items:
            raise EmptyPool(f"pool {t.pool!r} has no images in its native resolution range")
        eligible[t.pool] = items
    if total_items is None:
        total_items = sum(len(eligible[name]) for name in dict.fromkeys(t.pool for t in targets))
    if total_items < 0:
        raise ValidationError("total_items must be >= 0")

    rng = np.random.default_rng(seed)
    manifest = []
    for t, count in zip(targets, _apportion(weights, total_items)):
        items = eligible[t.pool]
        full, rest = divmod(count, len(items))
        chosen = items * full
        if rest:
            picks = np.sort(rng.permutation(len(items))[:rest])
            chosen = chosen + [items[int(i)] for i in picks]
        for img in chosen:
            w, h = _downscale(img, t.resolution_cap)
            manifest.append(BlendItem(img.id, w, h, t.pool, t.resolution_cap))
    return manifest
