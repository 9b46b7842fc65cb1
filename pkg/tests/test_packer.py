import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amoekit.core import EmptyPool, ImageTokenRecord, ImageTooLarge, ValidationError
from amoekit.packer import (
    BlendTarget,
    PackedSequence,
    PackerConfig,
    PackingPlan,
    ResolutionPool,
    build_segment_mask,
    dense_attention_mask,
    padding_stats,
    partition_across_ranks,
    plan_multires_blend,
    plan_packing,
    singleton_plan,
    validate_plan,
)


def _images(tokens):
    return [ImageTokenRecord.with_tokens(f"im{i}", t) for i, t in enumerate(tokens)]


def test_two_images_share_one_sequence():
    # 256x256 and 768x768 at patch 16.
    imgs = [ImageTokenRecord("small", 256, 256), ImageTokenRecord("large", 768, 768)]
    plan = plan_packing(imgs, PackerConfig(2600, 5), seed=0)
    assert len(plan.sequences) == 1
    assert plan.sequences[0].used_tokens == 2570
    assert [e.image_id for e in plan.sequences[0].entries] == ["large", "small"]


def test_empty_and_oversized():
    assert plan_packing([], PackerConfig(2600)).sequences == ()
    with pytest.raises(ImageTooLarge) as err:
        plan_packing(_images([3000]), PackerConfig(2600, 5))
    assert err.value.image_id == "im0"


def test_image_cap_is_respected():
    plan = plan_packing(_images([1] * 40), PackerConfig(1000, 0, max_images_per_sequence=16))
    assert sorted(len(s.entries) for s in plan.sequences) == [8, 16, 16]


def test_seed_shuffles_sequences_only():
    imgs = _images([900, 800, 700, 600, 500, 400, 300])
    cfg = PackerConfig(1000, 0)
    a, b = plan_packing(imgs, cfg, 1), plan_packing(imgs, cfg, 2)
    assert plan_packing(imgs, cfg, 1) == a
    key = lambda p: sorted(tuple(e.image_id for e in s.entries) for s in p.sequences)
    assert key(a) == key(b)


@pytest.mark.parametrize(
    "lengths,c_max,expected",
    [([4], 6, [1, 1, 1, 1, 0, 0]), ([2, 3], 6, [1, 1, 2, 2, 2, 0]), ([], 4, [0, 0, 0, 0])],
)
def test_segment_mask(lengths, c_max, expected):
    seq = PackedSequence.from_lengths([(f"i{k}", n) for k, n in enumerate(lengths)])
    assert build_segment_mask(seq, c_max).tolist() == expected


def test_dense_mask_is_block_diagonal():
    ids = np.array([1, 1, 2, 2, 2, 0])
    m = dense_attention_mask(ids)
    for i in range(6):
        for j in range(6):
            assert m[i, j] == (ids[i] == ids[j] and ids[i] != 0)


def _plan_with_loads(loads):
    return PackingPlan(tuple(PackedSequence.from_lengths([(f"s{i}", n)]) for i, n in enumerate(loads)))


def test_partition_examples():
    view = partition_across_ranks(_plan_with_loads([10, 9, 2, 1]), 2)
    assert sorted(view.rank_loads()) == [11, 11]
    view = partition_across_ranks(_plan_with_loads([5, 5, 5, 5]), 2)
    assert view.rank_loads() == [10, 10] and [len(r) for r in view.per_rank_sequences] == [2, 2]
    view = partition_across_ranks(_plan_with_loads([7]), 3)
    assert [len(r) for r in view.per_rank_sequences] == [1, 0, 0]
    with pytest.raises(ValidationError):
        partition_across_ranks(_plan_with_loads([7]), 0)


def test_padding_stats_examples():
    cfg = PackerConfig(2600)
    assert padding_stats(_plan_with_loads([2600]), cfg)["padding_fraction"] == 0
    assert padding_stats(_plan_with_loads([2570]), cfg)["padding_fraction"] == pytest.approx(30 / 2600)
    assert padding_stats(PackingPlan(()), cfg)["padding_fraction"] == 0


@settings(max_examples=150, deadline=None)
@given(
    tokens=st.lists(st.integers(1, 400), max_size=60),
    c_max=st.integers(420, 1200),
    cap=st.integers(1, 16),
    seed=st.integers(0, 2**32 - 1),
)
def test_packing_properties(tokens, c_max, cap, seed):
    imgs = _images(tokens)
    cfg = PackerConfig(c_max, extra_tokens_per_image=5, max_images_per_sequence=cap)
    plan = plan_packing(imgs, cfg, seed)
    validate_plan(plan, cfg, imgs)
    assert plan == plan_packing(imgs, cfg, seed)
    ours = padding_stats(plan, cfg)["padding_fraction"]
    naive = padding_stats(singleton_plan(imgs, cfg), cfg)["padding_fraction"]
    assert ours <= naive + 1e-12


@settings(max_examples=150, deadline=None)
@given(loads=st.lists(st.integers(1, 3000), max_size=40), ranks=st.integers(1, 9))
def test_rank_balance_bound(loads, ranks):
    view = partition_across_ranks(_plan_with_loads(loads), ranks)
    assert view.b_global == len(loads)
    got = view.rank_loads()
    assert max(got) - min(got) <= max(loads, default=0)
    placed = sorted(e.image_id for rank in view.per_rank_sequences for s in rank for e in s.entries)
    assert placed == sorted(f"s{i}" for i in range(len(loads)))


# --- multi-resolution blend ---------------------------------------------------

def _pool(name, n, side=256):
    return ResolutionPool(name, tuple(ImageTokenRecord(f"{name}{i}", side, side) for i in range(n)))


def test_blend_single_pool_identity():
    pool = _pool("lvd", 7)
    items = plan_multires_blend([pool], [BlendTarget("lvd", 256, 1.0)])
    assert [it.image_id for it in items] == [img.id for img in pool.images]
    assert all((it.width, it.height) == (256, 256) for it in items)


def test_blend_even_split():
    pools = [_pool("a", 20), _pool("b", 20, side=768)]
    items = plan_multires_blend(pools, [BlendTarget("a", 256, 0.5), BlendTarget("b", 512, 0.5)], total_items=10)
    assert sum(it.pool == "a" for it in items) == 5
    assert sum(it.pool == "b" for it in items) == 5
    assert all((it.width, it.height) == (512, 512) for it in items if it.pool == "b")
    assert len({it.image_id for it in items if it.pool == "a"}) == 5


def test_blend_rejects_bad_weights_and_empty_pools():
    with pytest.raises(ValidationError):
        plan_multires_blend([_pool("a", 3)], [BlendTarget("a", 256, 0.7), BlendTarget("a", 512, 0.4)])
    empty = ResolutionPool("e", (ImageTokenRecord("x", 100, 100),), native_resolution_range=(256, 384))
    with pytest.raises(EmptyPool):
        plan_multires_blend([empty], [BlendTarget("e", 256, 1.0)])


@settings(max_examples=100, deadline=None)
@given(
    raw=st.lists(st.integers(1, 50), min_size=1, max_size=5),
    total=st.integers(0, 500),
    seed=st.integers(0, 1000),
)
def test_blend_proportions_within_one_item(raw, total, seed):
    weights = [r / sum(raw) for r in raw]
    weights[-1] = 1.0 - sum(weights[:-1])
    pools = [_pool(f"p{i}", 13) for i in range(len(raw))]
    targets = [BlendTarget(f"p{i}", 256, w) for i, w in enumerate(weights)]
    items = plan_multires_blend(pools, targets, total, seed)
    assert len(items) == total
    for i, w in enumerate(weights):
        assert abs(sum(it.pool == f"p{i}" for it in items) - w * total) < 1
