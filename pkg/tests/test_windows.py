"""Window planning: partition invariants, inversion, reference sampling."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stvod import windows as W
from stvod.errors import ContractError


# ---------------------------------------------------------------------------
# expansion
# ---------------------------------------------------------------------------


def test_expand_rounds_up():
    assert W.expand_video(10, 4) == (12, [11, 12])
    assert W.expand_video(12, 4) == (12, [])
    assert W.expand_video(1, 8) == (8, [2, 3, 4, 5, 6, 7, 8])


def test_expand_rejects_bad_counts():
    with pytest.raises(ContractError):
        W.expand_video(0, 4)
    with pytest.raises(ContractError):
        W.expand_video(5, 0)


# ---------------------------------------------------------------------------
# sequential planning
# ---------------------------------------------------------------------------


def test_sequential_interval_one_is_chunking():
    plan = W.plan_sequential(8, 4, 1)
    assert plan.windows == [(1, 2, 3, 4), (5, 6, 7, 8)]


def test_sequential_strided_example():
    plan = W.plan_sequential(16, 4, 2)
    assert plan.windows[0] == (1, 3, 5, 7)
    assert plan.windows[1] == (2, 4, 6, 8)
    assert plan.windows[2] == (9, 11, 13, 15)
    assert plan.windows[3] == (10, 12, 14, 16)


def test_sequential_tail_blocks_are_chunked_in_order():
    # 20 slots, window 4, interval 2: one full 8-slot block x2, 4-slot tail
    plan = W.plan_sequential(20, 4, 2)
    assert plan.windows[-1] == (17, 18, 19, 20)
    plan.validate()


@settings(max_examples=200, deadline=None)
@given(
    n=st.integers(1, 200),
    window=st.integers(1, 16),
    interval=st.integers(1, 6),
)
def test_sequential_partitions_all_slots(n, window, interval):
    plan = W.plan_sequential(n, window, interval)
    plan.validate()
    slots = sorted(s for w in plan.windows for s in w)
    assert slots == list(range(1, plan.expanded + 1))


# ---------------------------------------------------------------------------
# shuffled planning
# ---------------------------------------------------------------------------


def test_shuffled_same_seed_is_deterministic():
    a = W.plan_shuffled(23, 4, seed=5)
    b = W.plan_shuffled(23, 4, seed=5)
    assert a.windows == b.windows
    c = W.plan_shuffled(23, 4, seed=6)
    assert a.windows != c.windows


def test_shuffled_whole_video_window():
    plan = W.plan_shuffled(7, 8, seed=0)
    assert len(plan.windows) == 1
    assert sorted(plan.windows[0]) == list(range(1, 9))


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 150), window=st.integers(1, 12), seed=st.integers(0, 2**31))
def test_shuffled_partitions_all_slots(n, window, seed):
    plan = W.plan_shuffled(n, window, seed)
    plan.validate()


# ---------------------------------------------------------------------------
# reassembly
# ---------------------------------------------------------------------------


def _frame_labels(plan):
    # run the "model" that just reports which real frame each slot shows
    return [
        [plan.slot_to_frame(s) for s in slots]
        for slots in plan.windows
    ]


def test_reassemble_sequential_is_concatenation():
    plan = W.plan_sequential(10, 4, 1)
    out = W.reassemble(plan, _frame_labels(plan))
    assert out == list(range(1, 11))


def test_reassemble_inverts_shuffle():
    for seed in range(20):
        plan = W.plan_shuffled(29, 6, seed)
        out = W.reassemble(plan, _frame_labels(plan))
        assert out == list(range(1, 30))


def test_reassemble_drops_padding():
    plan = W.plan_shuffled(10, 4, seed=3)
    assert plan.expanded == 12
    out = W.reassemble(plan, _frame_labels(plan))
    assert len(out) == 10


def test_reassemble_rejects_misaligned_outputs():
    plan = W.plan_sequential(8, 4, 1)
    with pytest.raises(ContractError):
        W.reassemble(plan, [[1, 2, 3, 4]])
    with pytest.raises(ContractError):
        W.reassemble(plan, [[1, 2, 3], [1, 2, 3, 4]])


def test_plan_json_round_trip():
    plan = W.plan_shuffled(13, 4, seed=9)
    again = W.WindowPlan.from_json(plan.to_json())
    assert again.windows == plan.windows
    assert (again.n, again.window, again.mode, again.seed) == (13, 4, "shuffled", 9)


def test_plan_validate_catches_corruption():
    plan = W.plan_sequential(8, 4, 1)
    plan.windows[0] = (1, 2, 3, 3)
    with pytest.raises(ContractError):
        plan.validate()


# ---------------------------------------------------------------------------
# bilateral reference sampling
# ---------------------------------------------------------------------------


def test_bilateral_balanced_in_the_middle():
    rng = np.random.default_rng(0)
    refs = W.bilateral_sample(14, 29, 4, rng)
    assert sum(1 for r in refs if r < 14) == 2
    assert sum(1 for r in refs if r > 14) == 2


def test_bilateral_first_frame_takes_all_from_after():
    rng = np.random.default_rng(0)
    refs = W.bilateral_sample(0, 20, 4, rng)
    assert all(r > 0 for r in refs)
    assert len(set(refs)) == 4


def test_bilateral_last_frame_takes_all_from_before():
    rng = np.random.default_rng(0)
    refs = W.bilateral_sample(19, 20, 4, rng)
    assert all(r < 19 for r in refs)
    assert len(set(refs)) == 4


def test_bilateral_single_frame_clip_returns_self():
    refs = W.bilateral_sample(0, 1, 4, np.random.default_rng(0))
    assert refs == [0, 0, 0, 0]


def test_bilateral_fuzz_in_range_and_duplicate_free(seeded=1000):
    rng = np.random.default_rng(99)
    for _ in range(seeded):
        n_ref = int(rng.integers(1, 7))
        n = int(rng.integers(n_ref + 1, n_ref + 40))
        current = int(rng.integers(0, n))
        refs = W.bilateral_sample(current, n, n_ref, rng)
        assert len(refs) == n_ref
        assert all(0 <= r < n for r in refs)
        assert current not in refs
        before = [r for r in refs if r < current]
        after = [r for r in refs if r > current]
        assert len(set(before)) == len(before)
        assert len(set(after)) == len(after)


def test_bilateral_rejects_out_of_range():
    with pytest.raises(ContractError):
        W.bilateral_sample(5, 5, 2, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# throughput measurement
# ---------------------------------------------------------------------------


def test_measure_fps_counts_real_frames_only():
    plan = W.plan_sequential(10, 4, 1)
    calls = []
    stats = W.measure_fps(lambda slots: calls.append(slots), plan, warmup=1, repeats=2)
    assert stats["frames"] == 10
    # 1 warmup + 2 timed passes over 3 windows each
    assert len(calls) == 9
    assert stats["fps"] > 0
    assert len(stats["pass_seconds"]) == 2


def test_measure_fps_requires_warmup():
    plan = W.plan_sequential(4, 4, 1)
    with pytest.raises(ContractError):
        W.measure_fps(lambda s: None, plan, warmup=0)
