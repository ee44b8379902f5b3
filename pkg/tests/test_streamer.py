"""
Tests for chunk-wise streaming: commit buffer, session stepping and reports.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from sparsemotion.backbone import Sampling, build_model  # noqa: E402
from sparsemotion.errors import EndOfStream, ValidationError  # noqa: E402
from sparsemotion.interpnet import InterpNet  # noqa: E402
from sparsemotion.keyframe import MOTION_BASE  # noqa: E402
from sparsemotion.streamer import (  # noqa: E402
    STAGE_LABELS,
    StreamBuffer,
    compare_strides,
    format_runtime_table,
    run_to_end,
    start_session,
    step,
)
from sparsemotion.tokenstream import synth_sample  # noqa: E402


@pytest.fixture
def model(tiny_backbone):
    return build_model(tiny_backbone, seed=0)


@pytest.fixture
def audio():
    # 200 audio tokens cover 120 motion frames
    return synth_sample(0, 0, 120).audio


def _kf(n, value=0):
    return np.full((4, n), value, dtype=np.int64)


def test_buffer_commits_are_chained_and_append_only():
    buf = StreamBuffer(P=2, N=3, s=4, n_frames=40)
    assert buf.n_keyframes == 10
    buf.commit_keyframes(_kf(3, 1))
    first_head = buf.head[0]
    buf.commit_keyframes(_kf(3, 2))
    assert buf.cursor == 6
    assert buf.keyframe_chain[1] == first_head
    assert buf.head[0] != first_head
    assert buf.verify_chain()
    with pytest.raises(ValueError):
        buf.keyframes[0, 0] = 5
    with pytest.raises(ValidationError):
        buf.commit_keyframes(_kf(5))


def test_buffer_chain_depends_on_content():
    a = StreamBuffer(P=0, N=2, s=2, n_frames=8)
    b = StreamBuffer(P=0, N=2, s=2, n_frames=8)
    a.commit_keyframes(_kf(2, 1))
    b.commit_keyframes(_kf(2, 2))
    assert a.head != b.head


@pytest.mark.parametrize("P,N,s,frames", [(-1, 2, 2, 8), (0, 0, 2, 8), (0, 2, 0, 8), (0, 2, 2, 0)])
def test_buffer_rejects_bad_geometry(P, N, s, frames):
    with pytest.raises(ValidationError):
        StreamBuffer(P, N, s, frames)


def test_session_covers_every_frame(model, audio):
    session = start_session(model, None, audio, P=2, N=5, s=6, interp_mode="linear")
    report = run_to_end(session)
    buf = session.buffer
    assert buf.n_frames == 120
    assert report.frames == 120
    # ceil(120 / 6) = 20 keyframes in 4 chunks of 5
    assert report.decoder_steps == 20
    assert len(report.profiles) == 4
    assert [p.frames for p in report.profiles] == [25, 30, 30, 35]
    np.testing.assert_array_equal(buf.dense[:, ::6], buf.keyframes)
    assert buf.dense.max() < MOTION_BASE
    assert buf.verify_chain()
    with pytest.raises(EndOfStream):
        step(session)


def test_audio_reads_never_run_past_the_chunk(model, audio):
    session = start_session(model, None, audio, P=2, N=5, s=6, interp_mode="linear")
    run_to_end(session)
    reads = session.audio.reads
    assert reads[0] == (-12, 30)
    assert all(end - start == (2 + 5) * 6 for start, end in reads)
    assert [start for start, _ in reads] == [-12, 18, 48, 78]


def test_pipelined_matches_sequential(model, audio):
    results = []
    for pipelined in (False, True):
        session = start_session(model, None, audio, P=2, N=5, s=6, interp_mode="linear")
        report = run_to_end(session, pipelined=pipelined)
        results.append((np.array(session.buffer.dense), session.buffer.head, report.meta["pipelined"]))
    (seq_dense, seq_head, _), (pipe_dense, pipe_head, flag) = results
    np.testing.assert_array_equal(seq_dense, pipe_dense)
    assert seq_head == pipe_head
    assert flag is True


def test_prefill_shifts_dense_start(model, audio):
    prefill = np.arange(8).reshape(4, 2)
    session = start_session(model, None, audio, P=2, N=5, s=6, prefill=prefill, interp_mode="linear")
    report = run_to_end(session)
    buf = session.buffer
    assert buf.prefilled == 2
    assert buf.dense_start == 7
    np.testing.assert_array_equal(buf.keyframes[:, :2], prefill)
    assert report.frames == 120 - 7
    assert report.decoder_steps == 20


def test_prefill_must_hold_exactly_p_keyframes(model, audio):
    with pytest.raises(ValidationError):
        start_session(model, None, audio, P=2, N=5, s=6, prefill=_kf(1), interp_mode="linear")


def test_network_mode_needs_interp_model(model, audio):
    with pytest.raises(ValidationError):
        start_session(model, None, audio, P=2, N=5, s=6)
    with pytest.raises(ValidationError):
        start_session(model, None, audio, P=2, N=5, s=6, interp_mode="cubic")


def test_network_interpolation_keeps_decoded_anchors(model, audio, tiny_interp):
    interp = InterpNet(tiny_interp, seed=0)
    session = start_session(model, interp, audio, P=1, N=4, s=6)
    report = run_to_end(session)
    assert report.frames == 120
    np.testing.assert_array_equal(session.buffer.dense[:, ::6], session.buffer.keyframes)


def test_seeded_sampling_is_reproducible(model, audio):
    heads = []
    for _ in range(2):
        session = start_session(model, None, audio, P=2, N=5, s=6, sampling=Sampling(1.0, seed=3), interp_mode="linear")
        run_to_end(session)
        heads.append(session.buffer.head)
    assert heads[0] == heads[1]


def test_report_and_runtime_table(model, audio):
    session = start_session(model, None, audio, P=2, N=5, s=6, interp_mode="linear")
    report = run_to_end(session)
    data = report.to_dict()
    assert data["frames"] == 120
    assert data["stride"] == 6 and data["chunk_n"] == 5
    assert set(data["stages_ms"]) == set(STAGE_LABELS)
    assert len(data["chunks"]) == 4
    assert report.memory_mb > 0
    assert report.ttff_ms > 0
    table = format_runtime_table(report)
    assert "Interpolation" in table
    assert "FPS" in table
    profile = report.profiles[0]
    assert profile.stages_ms["decode_other"] >= 0.0


def test_compare_strides_step_ratio(model, audio):
    rows = compare_strides({3: (model, None), 6: (model, None)}, [3, 6], [5], audio, P=2, interp_mode="linear")
    by_stride = {row.stride: row for row in rows}
    assert by_stride[6].decoder_steps == 20
    assert by_stride[3].decoder_steps == 40
    assert by_stride[6].dense_steps == 120
    assert by_stride[6].step_ratio == pytest.approx(1 / 6)
    assert by_stride[3].step_ratio == pytest.approx(1 / 3)
    assert all(row.frames == 120 for row in rows)
    with pytest.raises(ValidationError):
        compare_strides({6: (model, None)}, [4], [5], audio, P=2)


def test_decoder_steps_scale_inversely_with_stride(model, audio):
    rows = compare_strides({s: (model, None) for s in (4, 6, 8)}, [4, 6, 8], [5], audio, P=2, interp_mode="linear")
    for row in rows:
        assert row.step_ratio == pytest.approx(1 / row.stride)


@pytest.mark.slow
def test_fps_grows_with_stride(model, audio):
    rows = compare_strides({s: (model, None) for s in (2, 8)}, [2, 8], [5], audio, P=2, interp_mode="linear")
    by_stride = {row.stride: row for row in rows}
    assert by_stride[8].fps > by_stride[2].fps
