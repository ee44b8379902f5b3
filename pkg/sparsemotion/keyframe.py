"""Keyframe schedules, masked sequences, anchor-preserving merge and chunking.

Indices are 0-based: anchors are ``{0, s, 2s, ...} ∩ [0, T)`` and the last
valid frame ``T - 1`` is always held fixed as well.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from sparsemotion.errors import ValidationError
from sparsemotion.tokenstream import CODEBOOKS, PARTS

logger = logging.getLogger(__name__)

MOTION_BASE = CODEBOOKS["face"].base_size
MOTION_MASK = CODEBOOKS["face"].mask_id
MOTION_PAD = CODEBOOKS["face"].pad_id


class FrameType(IntEnum):
    ANCHOR = 0
    MASKED = 1
    PAD = 2


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class KeyframeSchedule:
    T: int
    s: int
    anchors: np.ndarray = field(init=False, repr=False)
    complement: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T < 1 or self.s < 1:
            raise ValidationError(f"schedule needs T >= 1 and s >= 1, got T={self.T}, s={self.s}")
        anchors = np.arange(0, self.T, self.s, dtype=np.int64)
        is_anchor = np.zeros(self.T, dtype=bool)
        is_anchor[anchors] = True
        object.__setattr__(self, "anchors", _readonly(anchors))
        object.__setattr__(self, "complement", _readonly(np.flatnonzero(~is_anchor)))

    @property
    def K(self) -> int:
        return int(self.anchors.size)

    @property
    def t_last(self) -> int:
        return self.T - 1

    @property
    def fixed(self) -> np.ndarray:
        """Anchors plus ``t_last`` (positions held as hard constraints)."""
        return np.union1d(self.anchors, [self.t_last])

    @property
    def masked_positions(self) -> np.ndarray:
        return self.complement[self.complement != self.t_last]


def schedule(T: int, s: int) -> KeyframeSchedule:
    return KeyframeSchedule(T, s)


def _as_part_array(dense: Mapping[str, np.ndarray] | np.ndarray) -> np.ndarray:
    if isinstance(dense, Mapping):
        rows = [np.asarray(getattr(dense[p], "tokens", dense[p]), dtype=np.int64) for p in PARTS]
        lengths = {r.size for r in rows}
        if len(lengths) != 1:
            raise ValidationError(f"part streams differ in length: {sorted(lengths)}")
        return np.stack(rows)
    arr = np.asarray(dense, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[0] != len(PARTS):
        raise ValidationError(f"expected a (4, T) part array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class MaskedSequence:
    """Masked part tokens (4, L) with per-frame tags; frames >= T are padding."""

    tokens: np.ndarray
    frame_type: np.ndarray
    schedule: KeyframeSchedule

    @property
    def length(self) -> int:
        return int(self.frame_type.size)

    @property
    def valid(self) -> np.ndarray:
        return self.frame_type != FrameType.PAD

    @property
    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.frame_type == FrameType.MASKED)


def mask_sequence(
    dense: Mapping[str, np.ndarray] | np.ndarray,
    sched: KeyframeSchedule,
    length: int | None = None,
) -> MaskedSequence:
    """Replace non-fixed frames by ``mask_id``; optionally right-pad to ``length``."""
    tokens = _as_part_array(dense)
    if tokens.shape[1] != sched.T:
        raise ValidationError(f"stream length {tokens.shape[1]} does not match schedule T={sched.T}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= MOTION_BASE):
        raise ValidationError(f"motion ids must lie in [0, {MOTION_BASE}) before masking")
    length = sched.T if length is None else length
    if length < sched.T:
        raise ValidationError(f"pad length {length} shorter than T={sched.T}")
    out = np.full((len(PARTS), length), MOTION_PAD, dtype=np.int64)
    out[:, : sched.T] = tokens
    out[:, sched.masked_positions] = MOTION_MASK
    frame_type = np.full(length, FrameType.PAD, dtype=np.int64)
    frame_type[: sched.T] = FrameType.ANCHOR
    frame_type[sched.masked_positions] = FrameType.MASKED
    return MaskedSequence(_readonly(out), _readonly(frame_type), sched)


def merge(masked: MaskedSequence, positions: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """Fill masked frames with ``predicted`` (4, M) at ``positions``; returns (4, T).

    Fixed frames are copied from ``masked`` untouched.
    """
    positions = np.asarray(positions, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    expected = masked.masked_positions
    if positions.shape != expected.shape or not np.array_equal(np.sort(positions), expected):
        missing = np.setdiff1d(expected, positions)
        extra = np.setdiff1d(positions, expected)
        raise ValidationError(
            f"predictions must cover exactly the masked frames; "
            f"missing={missing.tolist()} extra={extra.tolist()}"
        )
    if predicted.shape != (len(PARTS), positions.size):
        raise ValidationError(f"predicted ids shape {predicted.shape} != (4, {positions.size})")
    if predicted.size and (predicted.min() < 0 or predicted.max() >= MOTION_BASE):
        raise ValidationError("predicted ids must lie in the base vocabulary")
    T = masked.schedule.T
    out = np.array(masked.tokens[:, :T])
    out[:, positions] = predicted
    return out


def keyframe_tokens(dense: Mapping[str, np.ndarray] | np.ndarray, s: int) -> np.ndarray:
    """Anchor tokens (4, K) of a dense (4, T) stream."""
    tokens = _as_part_array(dense)
    return tokens[:, schedule(tokens.shape[1], s).anchors]


@dataclass(frozen=True)
class KeyframeChunk:
    """One window in keyframe index space.

    ``history`` is (4, P), left-padded with ``pad_id`` where ``history_mask``
    is False. ``target`` is (4, n) with n <= N (the final chunk may be short).
    """

    index: int
    start: int
    history: np.ndarray
    history_mask: np.ndarray
    target: np.ndarray

    @property
    def target_len(self) -> int:
        return int(self.target.shape[1])

    def frame_span(self, s: int) -> tuple[int, int]:
        """Frames ``[t_c - P*s, t_c + n*s)`` covered by history plus target."""
        P = self.history.shape[1]
        return (self.start - P) * s, (self.start + self.target_len) * s


def left_pad_history(kf: np.ndarray, end: int, P: int) -> tuple[np.ndarray, np.ndarray]:
    """The last ``P`` keyframes before ``end``, left-padded, with validity mask."""
    begin = max(0, end - P)
    n = end - begin
    history = np.full((kf.shape[0], P), MOTION_PAD, dtype=np.int64)
    mask = np.zeros(P, dtype=bool)
    if n:
        history[:, P - n :] = kf[:, begin:end]
        mask[P - n :] = True
    return history, mask


def kf_chunks(
    kf: Mapping[str, np.ndarray] | np.ndarray,
    P: int,
    N: int,
    prefill: int = 0,
) -> Iterator[KeyframeChunk]:
    """Non-overlapping N-keyframe targets after ``prefill`` committed keyframes."""
    if N < 1 or P < 0:
        raise ValidationError(f"invalid chunking P={P}, N={N}")
    tokens = _as_part_array(kf)
    K = tokens.shape[1]
    if K < 1:
        raise ValidationError("keyframe stream is empty")
    if not 0 <= prefill <= K:
        raise ValidationError(f"prefill {prefill} outside [0, {K}]")
    for index, start in enumerate(range(prefill, K, N)):
        history, mask = left_pad_history(tokens, start, P)
        yield KeyframeChunk(
            index=index,
            start=start,
            history=history,
            history_mask=mask,
            target=tokens[:, start : min(start + N, K)],
        )
