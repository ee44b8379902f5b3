"""Chunk-wise streaming generation.

Each step reads the last ``P`` committed keyframes and the audio under the
chunk's frame span, decodes ``N`` keyframe steps with the backbone, commits
the new keyframes and fills the frames between consecutive anchors with the
interpolation network (or linear blending). Commits are append-only and
hash-chained.

The dense output of a chunk runs from the frame after the previous committed
anchor to its last new anchor, so the first chunk of an unprefilled session
emits ``(N - 1) * s + 1`` frames and later chunks emit ``N * s``. Frames after
the final anchor repeat it.
"""

from __future__ import annotations

import hashlib
import logging
import math
import queue
import threading
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import psutil

from sparsemotion.backbone import ChunkWindow, PrefixLM, Sampling, chunk_predict
from sparsemotion.errors import EndOfStream, ValidationError
from sparsemotion.interpnet import InterpNet, interpolate, interpolate_linear, net_tables
from sparsemotion.keyframe import left_pad_history, schedule
from sparsemotion.metrics_store import MetricsStore
from sparsemotion.profiling import StageClock
from sparsemotion.tokenstream import (
    PARTS,
    TokenStream,
    audio_index,
    motion_length_for,
    padded_audio_window,
)
from sparsemotion.trainer import task_prompt

logger = logging.getLogger(__name__)

STAGES = (
    "tokenize_audio",
    "tokenize_motion",
    "encode_attention",
    "encode_moe_ffn",
    "decode_attention",
    "decode_moe_ffn",
    "decode_other",
    "interpolation",
)
STAGE_LABELS = {
    "tokenize_audio": "Tokenize audio",
    "tokenize_motion": "Tokenize motion",
    "encode_attention": "Encoder attention",
    "encode_moe_ffn": "Encoder MoE FFN",
    "decode_attention": "Decoder attention",
    "decode_moe_ffn": "Decoder MoE FFN",
    "decode_other": "Decoder other",
    "interpolation": "Interpolation",
}
INTERP_MODES = ("network", "linear")


class AudioSource:
    """Audio token stream that records the furthest token any read touched."""

    def __init__(self, stream: TokenStream):
        self.stream = stream
        self.high_water = 0
        self.reads: list[tuple[int, int]] = []

    @property
    def n_frames(self) -> int:
        return motion_length_for(len(self.stream))

    def window(self, start_frame: int, end_frame: int) -> TokenStream:
        out = padded_audio_window(self.stream, start_frame, end_frame)
        end = min(audio_index(end_frame), len(self.stream))
        self.high_water = max(self.high_water, end)
        self.reads.append((start_frame, end_frame))
        return out


def _chain(previous: str, kind: str, tokens: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(previous.encode())
    h.update(kind.encode())
    h.update(np.ascontiguousarray(tokens, dtype=np.int64).tobytes())
    return h.hexdigest()


class StreamBuffer:
    """Append-only keyframe and dense-frame history of one session."""

    def __init__(self, P: int, N: int, s: int, n_frames: int):
        if P < 0 or N < 1 or s < 1:
            raise ValidationError(f"invalid streaming geometry P={P}, N={N}, s={s}")
        if n_frames < 1:
            raise ValidationError("audio covers no motion frames")
        self.P, self.N, self.s = P, N, s
        self.n_frames = n_frames
        self.n_keyframes = math.ceil(n_frames / s)
        self._keyframes = np.zeros((len(PARTS), 0), dtype=np.int64)
        self._dense = np.zeros((len(PARTS), 0), dtype=np.int64)
        self.prefilled = 0
        self.dense_start = 0
        self.keyframe_chain: list[str] = [""]
        self.dense_chain: list[str] = [""]
        self._log: list[tuple[str, np.ndarray]] = []
        self.lock = threading.Lock()

    @property
    def cursor(self) -> int:
        return int(self._keyframes.shape[1])

    @property
    def keyframes(self) -> np.ndarray:
        view = self._keyframes.view()
        view.setflags(write=False)
        return view

    @property
    def dense(self) -> np.ndarray:
        view = self._dense.view()
        view.setflags(write=False)
        return view

    @property
    def remaining(self) -> int:
        return self.n_keyframes - self.cursor

    @property
    def head(self) -> tuple[str, str]:
        return self.keyframe_chain[-1], self.dense_chain[-1]

    def commit_keyframes(self, tokens: np.ndarray) -> None:
        tokens = np.array(tokens, dtype=np.int64)
        with self.lock:
            if self.cursor + tokens.shape[1] > self.n_keyframes:
                raise ValidationError("commit runs past the last keyframe of the stream")
            self._keyframes = np.concatenate([self._keyframes, tokens], axis=1)
            self.keyframe_chain.append(_chain(self.keyframe_chain[-1], "kf", tokens))
            self._log.append(("kf", tokens))

    def commit_dense(self, frames: np.ndarray) -> None:
        frames = np.array(frames, dtype=np.int64)
        with self.lock:
            self._dense = np.concatenate([self._dense, frames], axis=1)
            self.dense_chain.append(_chain(self.dense_chain[-1], "dense", frames))
            self._log.append(("dense", frames))

    def verify_chain(self) -> bool:
        """Recompute both hash chains from the commit log."""
        heads = {"kf": "", "dense": ""}
        expected = {"kf": [""], "dense": [""]}
        for kind, tokens in self._log:
            heads[kind] = _chain(heads[kind], kind, tokens)
            expected[kind].append(heads[kind])
        return expected["kf"] == self.keyframe_chain and expected["dense"] == self.dense_chain


@dataclass
class StepProfile:
    chunk_index: int
    decoder_steps: int
    frames: int
    total_ms: float
    stages_ms: dict[str, float]

    @classmethod
    def from_clock(cls, clock: StageClock, chunk_index: int, decoder_steps: int, frames: int) -> StepProfile:
        ms = {name: clock.elapsed(name) * 1000.0 for name in STAGES}
        other = clock.elapsed("decode_total") - clock.elapsed("decode_attention") - clock.elapsed("decode_moe_ffn")
        ms["decode_other"] = max(0.0, other * 1000.0)
        return cls(chunk_index, decoder_steps, frames, clock.elapsed("total") * 1000.0, ms)

    def to_dict(self) -> dict[str, Any]:
        return {
            "chunk_index": self.chunk_index,
            "decoder_steps": self.decoder_steps,
            "frames": self.frames,
            "total_ms": round(self.total_ms, 4),
            "stages_ms": {k: round(v, 4) for k, v in self.stages_ms.items()},
        }


@dataclass
class ChunkResult:
    chunk_index: int
    keyframes: np.ndarray
    dense: np.ndarray
    profile: StepProfile


@dataclass
class _PendingChunk:
    chunk_index: int
    start: int
    keyframes: np.ndarray
    anchors: np.ndarray
    first: bool
    last: bool
    decoder_steps: int
    clock: StageClock


@dataclass
class Session:
    model: PrefixLM
    interp: InterpNet | None
    audio: AudioSource
    buffer: StreamBuffer
    sampling: Sampling
    interp_mode: str = "network"
    tables: list[np.ndarray] = field(default_factory=list)
    chunks: int = 0
    started: float | None = None
    ttff_s: float | None = None


def backbone_part_tables(model: PrefixLM) -> list[np.ndarray]:
    """The backbone's own embedding rows for each part codebook."""
    layout = model.layout
    table = model.embed.table.data
    return [table[layout.offsets[p] : layout.offsets[p] + layout.sizes[p]] for p in PARTS]


def start_session(
    model: PrefixLM,
    interp_model: InterpNet | None,
    audio: TokenStream,
    P: int,
    N: int,
    s: int,
    prefill: np.ndarray | None = None,
    sampling: Sampling | None = None,
    interp_mode: str = "network",
) -> Session:
    """Open a session over ``audio``; ``prefill`` is a (4, P) ground-truth history."""
    if interp_mode not in INTERP_MODES:
        raise ValidationError(f"unknown interp mode '{interp_mode}', expected one of {INTERP_MODES}")
    if interp_mode == "network" and interp_model is None:
        raise ValidationError("network interpolation needs an interpolation model")
    source = AudioSource(audio)
    buffer = StreamBuffer(P, N, s, source.n_frames)
    if prefill is not None:
        prefill = np.asarray(prefill, dtype=np.int64)
        if prefill.shape != (len(PARTS), P):
            raise ValidationError(f"prefill must hold exactly P={P} keyframes per part, got shape {prefill.shape}")
        buffer.commit_keyframes(prefill)
        buffer.prefilled = P
        buffer.dense_start = (P - 1) * s + 1 if P else 0
    if buffer.remaining < 1:
        raise ValidationError(f"audio of {source.n_frames} frames leaves no keyframes after the prefill")
    if interp_mode == "linear":
        tables = net_tables(interp_model) if interp_model is not None else backbone_part_tables(model)
    else:
        tables = []
    logger.debug(
        "Session: %d frames, %d keyframes, P=%d N=%d s=%d prefill=%s",
        buffer.n_frames,
        buffer.n_keyframes,
        P,
        N,
        s,
        prefill is not None,
    )
    return Session(model, interp_model, source, buffer, sampling or Sampling(), interp_mode, tables)


def _chunk_sampling(sampling: Sampling, chunk_index: int) -> Sampling:
    if sampling.greedy or sampling.seed is None:
        return sampling
    return Sampling(sampling.temperature, seed=sampling.seed * 100_003 + chunk_index)


def _decode_chunk(session: Session) -> _PendingChunk:
    buf = session.buffer
    if buf.remaining < 1:
        raise EndOfStream
    if session.started is None:
        session.started = time.perf_counter()
    P, N, s = buf.P, buf.N, buf.s
    c = buf.cursor
    n = min(N, buf.remaining)
    clock = StageClock()
    with clock.stage("total"):
        with clock.stage("tokenize_audio"):
            audio = session.audio.window((c - P) * s, (c + N) * s)
        with clock.stage("tokenize_motion"):
            history, mask = left_pad_history(buf.keyframes, c, P)
            window = ChunkWindow(task_prompt("a2m"), audio, history, mask, N, session.chunks)
        prediction = chunk_predict(session.model, window, _chunk_sampling(session.sampling, session.chunks), clock)
        new = prediction.tokens[:, :n]
        buf.commit_keyframes(new)
    first = c == 0
    anchors = new if first else np.concatenate([buf.keyframes[:, c - 1 : c], new], axis=1)
    pending = _PendingChunk(
        chunk_index=session.chunks,
        start=c,
        keyframes=new,
        anchors=anchors,
        first=first,
        last=buf.remaining == 0,
        decoder_steps=prediction.decoder_steps,
        clock=clock,
    )
    session.chunks += 1
    return pending


def _fill(session: Session, anchors: np.ndarray) -> np.ndarray:
    s = session.buffer.s
    length = (anchors.shape[1] - 1) * s + 1
    sched = schedule(length, s)
    dense = np.zeros((len(PARTS), length), dtype=np.int64)
    dense[:, sched.anchors] = anchors
    if session.interp_mode == "linear":
        return interpolate_linear(session.tables, dense, sched)
    return interpolate(session.interp, dense, sched)


def _finish_chunk(session: Session, pending: _PendingChunk) -> ChunkResult:
    buf = session.buffer
    clock = pending.clock
    with clock.stage("total"):
        with clock.stage("interpolation"):
            dense = _fill(session, pending.anchors)
            if not pending.first:
                dense = dense[:, 1:]
            if pending.last:
                end = (buf.n_keyframes - 1) * buf.s
                tail = buf.n_frames - 1 - end
                if tail > 0:
                    dense = np.concatenate([dense, np.repeat(pending.keyframes[:, -1:], tail, axis=1)], axis=1)
        buf.commit_dense(dense)
    if session.ttff_s is None and dense.shape[1]:
        session.ttff_s = time.perf_counter() - session.started
    profile = StepProfile.from_clock(clock, pending.chunk_index, pending.decoder_steps, int(dense.shape[1]))
    return ChunkResult(pending.chunk_index, pending.keyframes, dense, profile)


def step(session: Session) -> ChunkResult:
    """Decode, commit and interpolate the next chunk; raises ``EndOfStream`` when done."""
    return _finish_chunk(session, _decode_chunk(session))


class InterpolationWorker(threading.Thread):
    """Interpolates decoded chunks in arrival order while the next one decodes."""

    def __init__(self, session: Session, pending: queue.Queue, results: list[ChunkResult]):
        super().__init__(daemon=True)
        self.session = session
        self.pending = pending
        self.results = results
        self.stop_event = threading.Event()
        self.error: BaseException | None = None

    def run(self):
        while not self.stop_event.is_set():
            try:
                item = self.pending.get(timeout=1)
            except queue.Empty:
                continue
            if item is None:
                return
            try:
                self.results.append(_finish_chunk(self.session, item))
            except Exception as e:
                logger.error("InterpolationWorker error on chunk %d: %s", item.chunk_index, e)
                self.error = e
                return

    def stop(self):
        self.stop_event.set()


@dataclass
class SessionReport:
    ttff_ms: float
    fps: float
    frames: int
    decoder_steps: int
    elapsed_ms: float
    profiles: list[StepProfile]
    memory_mb: float
    meta: dict[str, Any] = field(default_factory=dict)

    def stage_totals(self) -> dict[str, float]:
        return {name: sum(p.stages_ms.get(name, 0.0) for p in self.profiles) for name in STAGES}

    def to_dict(self) -> dict[str, Any]:
        return {
            "ttff_ms": round(self.ttff_ms, 4),
            "fps": round(self.fps, 4),
            "frames": self.frames,
            "decoder_steps": self.decoder_steps,
            "elapsed_ms": round(self.elapsed_ms, 4),
            "memory_mb": round(self.memory_mb, 2),
            "stages_ms": {k: round(v, 4) for k, v in self.stage_totals().items()},
            "chunks": [p.to_dict() for p in self.profiles],
            **self.meta,
        }


def run_to_end(session: Session, pipelined: bool = False, store: MetricsStore | None = None) -> SessionReport:
    """Step until the audio is exhausted and summarize the session."""
    results: list[ChunkResult] = []
    session.started = time.perf_counter()
    if pipelined:
        pending: queue.Queue = queue.Queue()
        worker = InterpolationWorker(session, pending, results)
        worker.start()
        try:
            while session.buffer.remaining > 0 and worker.error is None:
                pending.put(_decode_chunk(session))
        finally:
            pending.put(None)
            worker.join()
        if worker.error is not None:
            raise worker.error
    else:
        while True:
            try:
                results.append(step(session))
            except EndOfStream:
                break
    elapsed = time.perf_counter() - session.started
    frames = sum(r.dense.shape[1] for r in results)
    profiles = [r.profile for r in results]
    if store is not None:
        for profile in profiles:
            store.log_stream_chunk(profile.to_dict())
    buf = session.buffer
    report = SessionReport(
        ttff_ms=(session.ttff_s or 0.0) * 1000.0,
        fps=frames / elapsed if frames and elapsed > 0 else 0.0,
        frames=frames,
        decoder_steps=sum(p.decoder_steps for p in profiles),
        elapsed_ms=elapsed * 1000.0,
        profiles=profiles,
        memory_mb=psutil.Process().memory_info().rss / 2**20,
        meta={
            "stride": buf.s,
            "chunk_n": buf.N,
            "history_p": buf.P,
            "prefilled": buf.prefilled,
            "interp_mode": session.interp_mode,
            "pipelined": pipelined,
            "chain_head": buf.head[0],
        },
    )
    logger.info(
        "Session done: %d frames, %d decoder steps, TTFF %.1f ms, %.1f FPS",
        report.frames,
        report.decoder_steps,
        report.ttff_ms,
        report.fps,
    )
    return report


def format_runtime_table(report: SessionReport) -> str:
    """Aligned per-stage milliseconds (total and per chunk) plus FPS and TTFF."""
    totals = report.stage_totals()
    n = max(len(report.profiles), 1)
    lines = [f"{'stage':<20} {'total ms':>10} {'ms/chunk':>10}"]
    for name in STAGES:
        lines.append(f"{STAGE_LABELS[name]:<20} {totals[name]:10.3f} {totals[name] / n:10.3f}")
    lines.append(f"{'decoder steps':<20} {report.decoder_steps:>10d}")
    lines.append(f"{'frames':<20} {report.frames:>10d}")
    lines.append(f"{'FPS':<20} {report.fps:10.2f}")
    lines.append(f"{'TTFF ms':<20} {report.ttff_ms:10.3f}")
    return "\n".join(lines)


@dataclass
class ScalingRow:
    stride: int
    chunk_n: int
    keyframes: int
    decoder_steps: int
    dense_steps: int
    frames: int
    fps: float
    ttff_ms: float

    @property
    def step_ratio(self) -> float:
        """Decoder steps relative to decoding every frame (s = 1)."""
        return self.decoder_steps / self.dense_steps

    def to_dict(self) -> dict[str, Any]:
        return {
            "stride": self.stride,
            "chunk_n": self.chunk_n,
            "keyframes": self.keyframes,
            "decoder_steps": self.decoder_steps,
            "dense_steps": self.dense_steps,
            "step_ratio": round(self.step_ratio, 6),
            "frames": self.frames,
            "fps": round(self.fps, 3),
            "ttff_ms": round(self.ttff_ms, 3),
        }


def compare_strides(
    models: Mapping[int, tuple[PrefixLM, InterpNet | None]],
    strides: Sequence[int],
    chunk_ns: Sequence[int],
    audio: TokenStream,
    P: int,
    interp_mode: str = "network",
) -> list[ScalingRow]:
    """Run one session per (stride, N) and tabulate decoder steps, FPS and TTFF."""
    missing = [s for s in strides if s not in models]
    if missing:
        raise ValidationError(f"no model for stride(s) {missing}")
    n_frames = motion_length_for(len(audio))
    rows = []
    for s in strides:
        model, interp = models[s]
        for n in chunk_ns:
            session = start_session(model, interp, audio, P, n, s, interp_mode=interp_mode)
            report = run_to_end(session)
            rows.append(
                ScalingRow(
                    stride=s,
                    chunk_n=n,
                    keyframes=session.buffer.n_keyframes,
                    decoder_steps=report.decoder_steps,
                    dense_steps=math.ceil(n_frames / n) * n,
                    frames=report.frames,
                    fps=report.fps,
                    ttff_ms=report.ttff_ms,
                )
            )
            logger.info("stride %d N %d: %d decoder steps, %.1f FPS", s, n, report.decoder_steps, report.fps)
    return rows
