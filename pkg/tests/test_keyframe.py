"""Tests for keyframe schedules, masking, merging and chunking."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from sparsemotion.errors import ValidationError  # noqa: E402
from sparsemotion.keyframe import (  # noqa: E402
    MOTION_MASK,
    MOTION_PAD,
    FrameType,
    kf_chunks,
    keyframe_tokens,
    left_pad_history,
    mask_sequence,
    merge,
    schedule,
)


def _dense(T, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(4, T))


def test_schedule_anchor_sets():
    sched = schedule(30, 6)
    assert sched.anchors.tolist() == [0, 6, 12, 18, 24]
    assert sched.K == 5
    assert schedule(120, 6).K == 20
    dense = schedule(9, 1)
    assert dense.K == 9 and dense.complement.size == 0


def test_schedule_rejects_bad_arguments():
    for T, s in ((0, 6), (10, 0)):
        with pytest.raises(ValidationError):
            schedule(T, s)


def test_last_frame_is_fixed_but_not_an_anchor():
    sched = schedule(7, 3)
    assert sched.anchors.tolist() == [0, 3, 6]
    sched = schedule(8, 3)
    assert 7 not in sched.anchors
    assert sched.fixed.tolist() == [0, 3, 6, 7]
    assert sched.masked_positions.tolist() == [1, 2, 4, 5]


def test_mask_sequence_masks_interior_frames():
    dense = _dense(7)
    masked = mask_sequence(dense, schedule(7, 3))
    assert masked.masked_positions.tolist() == [1, 2, 4, 5]
    assert np.all(masked.tokens[:, [1, 2, 4, 5]] == MOTION_MASK)
    assert np.array_equal(masked.tokens[:, [0, 3, 6]], dense[:, [0, 3, 6]])
    assert masked.frame_type.tolist() == [0, 1, 1, 0, 1, 1, 0]


def test_stride_one_masks_nothing():
    dense = _dense(5)
    masked = mask_sequence(dense, schedule(5, 1))
    assert np.array_equal(masked.tokens, dense)
    assert masked.masked_positions.size == 0


def test_padding_is_tagged_and_uses_pad_id():
    masked = mask_sequence(_dense(4), schedule(4, 2), length=6)
    assert masked.frame_type[4:].tolist() == [FrameType.PAD, FrameType.PAD]
    assert np.all(masked.tokens[:, 4:] == MOTION_PAD)
    assert masked.valid.tolist() == [True] * 4 + [False] * 2


def test_mask_sequence_validates_inputs():
    with pytest.raises(ValidationError):
        mask_sequence(np.full((4, 3), 256), schedule(3, 2))
    with pytest.raises(ValidationError):
        mask_sequence(_dense(5), schedule(6, 2))
    with pytest.raises(ValidationError):
        mask_sequence(_dense(5), schedule(5, 2), length=3)
    with pytest.raises(ValidationError):
        mask_sequence(np.zeros((3, 5), dtype=int), schedule(5, 2))


def test_mask_sequence_accepts_part_mapping():
    dense = _dense(6)
    parts = {p: dense[i] for i, p in enumerate(("face", "hand", "upper", "lower"))}
    assert np.array_equal(mask_sequence(parts, schedule(6, 2)).tokens, mask_sequence(dense, schedule(6, 2)).tokens)


def test_merge_with_ground_truth_restores_the_stream():
    dense = _dense(13)
    masked = mask_sequence(dense, schedule(13, 4))
    pos = masked.masked_positions
    assert np.array_equal(merge(masked, pos, dense[:, pos]), dense)


def test_merge_never_touches_fixed_frames():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        T = int(rng.integers(1, 40))
        s = int(rng.integers(1, 9))
        dense = rng.integers(0, 256, size=(4, T))
        masked = mask_sequence(dense, schedule(T, s))
        pos = masked.masked_positions
        out = merge(masked, pos, rng.integers(0, 256, size=(4, pos.size)))
        fixed = masked.schedule.fixed
        assert np.array_equal(out[:, fixed], dense[:, fixed])
        assert not np.any(out == MOTION_MASK)


def test_merge_with_no_masked_frames_returns_anchors():
    dense = _dense(3)
    masked = mask_sequence(dense, schedule(3, 1))
    assert np.array_equal(merge(masked, np.array([], dtype=int), np.zeros((4, 0))), dense)


def test_merge_rejects_missing_or_extra_positions():
    masked = mask_sequence(_dense(7), schedule(7, 3))
    with pytest.raises(ValidationError, match="missing=\\[5\\]"):
        merge(masked, np.array([1, 2, 4]), np.zeros((4, 3)))
    with pytest.raises(ValidationError, match="extra=\\[3\\]"):
        merge(masked, np.array([1, 2, 3, 4]), np.zeros((4, 4)))
    with pytest.raises(ValidationError):
        merge(masked, np.array([1, 2, 4, 5]), np.full((4, 4), MOTION_MASK))


def test_keyframe_tokens_pick_anchor_columns():
    dense = _dense(30)
    assert np.array_equal(keyframe_tokens(dense, 6), dense[:, ::6])


def test_left_pad_history():
    kf = np.arange(12).reshape(4, 3)
    history, mask = left_pad_history(kf, 2, 4)
    assert mask.tolist() == [False, False, True, True]
    assert np.all(history[:, :2] == MOTION_PAD)
    assert np.array_equal(history[:, 2:], kf[:, :2])
    empty, empty_mask = left_pad_history(kf, 0, 2)
    assert not empty_mask.any()
    assert left_pad_history(kf, 3, 0)[0].shape == (4, 0)


def test_chunks_after_prefill():
    kf = _dense(20)
    chunks = list(kf_chunks(kf, P=10, N=5, prefill=10))
    assert [c.start for c in chunks] == [10, 15]
    assert all(c.history_mask.all() for c in chunks)
    assert np.array_equal(chunks[1].history, kf[:, 5:15])


def test_chunks_tile_targets_without_gaps():
    kf = _dense(17)
    chunks = list(kf_chunks(kf, P=4, N=5))
    assert [c.target_len for c in chunks] == [5, 5, 5, 2]
    assert np.array_equal(np.concatenate([c.target for c in chunks], axis=1), kf)
    assert chunks[0].history_mask.sum() == 0
    assert chunks[1].history_mask.sum() == 4


def test_single_window_when_n_covers_stream():
    chunks = list(kf_chunks(_dense(6), P=3, N=6))
    assert len(chunks) == 1


def test_chunk_frame_span():
    chunk = list(kf_chunks(_dense(10), P=2, N=3))[1]
    assert chunk.frame_span(6) == ((3 - 2) * 6, (3 + 3) * 6)


def test_chunking_rejects_bad_geometry():
    with pytest.raises(ValidationError):
        list(kf_chunks(_dense(5), P=1, N=0))
    with pytest.raises(ValidationError):
        list(kf_chunks(_dense(5), P=1, N=2, prefill=6))
