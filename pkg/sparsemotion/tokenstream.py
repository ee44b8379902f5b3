"""Discrete token data model, audio/motion alignment and the synthetic corpus.

Audio runs at 50 tokens/s over a 500-entry codebook; each motion part (face,
hand, upper, lower) runs at 30 tokens/s over 256 entries. Every codebook
reserves ``mask_id = base_size`` and ``pad_id = base_size + 1``.

Synthetic audio ids encode two channels: the residue class ``id % 10`` carries
the content that drives motion, and ``id // 10`` is a within-class identity
that stands in for speaker timbre. Augmented variants permute only the
identity channel.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from sparsemotion.config import worker_count
from sparsemotion.errors import AlignmentError, ValidationError

logger = logging.getLogger(__name__)

AUDIO_RATE = 50
MOTION_RATE = 30
N_RESIDUE_CLASSES = 10
IDENTITIES_PER_CLASS = 50
TEXT_VOCAB = 128
DATASET_VERSION = 1

# Motion ids are block(c) * BLOCK_WIDTH + w, w a bounded walk in [0, BLOCK_WIDTH).
BLOCK_WIDTH = 25
CLASS_STAY_PROB = 0.97
MAX_VELOCITY = 2

# Transcript symbols below 120 describe class runs; 120..127 are instruction words.
RUN_BUCKETS = 12
INSTRUCTION_WORDS = {
    "generate": 120,
    "motion": 121,
    "keyframes": 122,
    "from": 123,
    "audio": 124,
    "text": 125,
    "transcribe": 126,
    "speak": 127,
}


class Modality(str, Enum):
    AUDIO = "audio"
    FACE = "face"
    HAND = "hand"
    UPPER = "upper"
    LOWER = "lower"
    TEXT = "text"


PARTS = ("face", "hand", "upper", "lower")


@dataclass(frozen=True)
class CodebookSpec:
    modality: Modality
    base_size: int
    rate_hz: float

    @property
    def mask_id(self) -> int:
        return self.base_size

    @property
    def pad_id(self) -> int:
        return self.base_size + 1

    @property
    def size(self) -> int:
        """Base vocabulary plus mask and pad."""
        return self.base_size + 2


CODEBOOKS: dict[str, CodebookSpec] = {
    "audio": CodebookSpec(Modality.AUDIO, 500, AUDIO_RATE),
    "face": CodebookSpec(Modality.FACE, 256, MOTION_RATE),
    "hand": CodebookSpec(Modality.HAND, 256, MOTION_RATE),
    "upper": CodebookSpec(Modality.UPPER, 256, MOTION_RATE),
    "lower": CodebookSpec(Modality.LOWER, 256, MOTION_RATE),
    # Transcripts are untimed.
    "text": CodebookSpec(Modality.TEXT, TEXT_VOCAB, 0.0),
}


def _frozen_ids(tokens) -> np.ndarray:
    arr = np.array(tokens, dtype=np.int64).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TokenStream:
    spec: CodebookSpec
    tokens: np.ndarray
    start_time: float = 0.0

    def __post_init__(self):
        arr = _frozen_ids(self.tokens)
        bad = (arr < 0) | (arr > self.spec.pad_id)
        if bad.any():
            raise ValidationError(
                f"{self.spec.modality.value} stream has ids outside [0, {self.spec.pad_id}]: "
                f"{arr[bad][:5].tolist()}"
            )
        object.__setattr__(self, "tokens", arr)

    def __len__(self) -> int:
        return int(self.tokens.size)

    @property
    def duration(self) -> float:
        return len(self) / self.spec.rate_hz if self.spec.rate_hz else 0.0

    def slice(self, start: int, end: int) -> TokenStream:
        offset = start / self.spec.rate_hz if self.spec.rate_hz else 0.0
        return TokenStream(self.spec, self.tokens[start:end], self.start_time + offset)


def make_stream(name: str, tokens, start_time: float = 0.0) -> TokenStream:
    return TokenStream(CODEBOOKS[name], tokens, start_time)


def audio_length_for(motion_len: int) -> int:
    return round(motion_len * AUDIO_RATE / MOTION_RATE)


@dataclass(frozen=True)
class PairedSample:
    audio: TokenStream
    motion: Mapping[str, TokenStream]
    transcript: np.ndarray
    speaker_tag: int = 0

    def __post_init__(self):
        if set(self.motion) != set(PARTS):
            raise ValidationError(f"motion must have parts {PARTS}, got {sorted(self.motion)}")
        lengths = {len(self.motion[p]) for p in PARTS}
        if len(lengths) != 1:
            raise ValidationError(f"motion part streams differ in length: {sorted(lengths)}")
        expected = audio_length_for(lengths.pop())
        if abs(len(self.audio) - expected) > 1:
            raise ValidationError(
                f"audio length {len(self.audio)} not aligned with motion (expected {expected} +-1)"
            )
        object.__setattr__(self, "transcript", _frozen_ids(self.transcript))

    @property
    def motion_len(self) -> int:
        return len(self.motion[PARTS[0]])

    def motion_array(self) -> np.ndarray:
        """(4, T) array of part tokens in ``PARTS`` order."""
        return np.stack([self.motion[p].tokens for p in PARTS])


def audio_index(frame: int) -> int:
    """Audio token index aligned with motion frame boundary ``frame`` (floor)."""
    return (frame * AUDIO_RATE) // MOTION_RATE


def align_audio_window(start_frame: int, end_frame: int, audio: TokenStream) -> TokenStream:
    """Audio tokens ``[floor(start*5/3), floor(end*5/3))`` for motion frames ``[start, end)``."""
    if not 0 <= start_frame <= end_frame:
        raise ValidationError(f"invalid motion range [{start_frame}, {end_frame})")
    a_start, a_end = audio_index(start_frame), audio_index(end_frame)
    if a_end > len(audio):
        raise AlignmentError(max(a_start, len(audio)), a_end, len(audio))
    return audio.slice(a_start, a_end)


def padded_audio_window(audio: TokenStream, start_frame: int, end_frame: int) -> TokenStream:
    """Audio for motion frames ``[start, end)``; frames outside the stream read as ``pad_id``.

    ``start_frame`` may be negative (history reaching before the first frame).
    """
    if end_frame < start_frame:
        raise ValidationError(f"invalid motion range [{start_frame}, {end_frame})")
    a_start, a_end = audio_index(start_frame), audio_index(end_frame)
    out = np.full(a_end - a_start, audio.spec.pad_id, dtype=np.int64)
    lo, hi = max(a_start, 0), min(a_end, len(audio))
    if hi > lo:
        out[lo - a_start : hi - a_start] = audio.tokens[lo:hi]
    return TokenStream(audio.spec, out, audio.start_time + a_start / audio.spec.rate_hz)


def motion_length_for(n_audio: int) -> int:
    """Inverse of ``audio_length_for``."""
    return round(n_audio * MOTION_RATE / AUDIO_RATE)


def pad_to(stream: TokenStream, length: int) -> tuple[TokenStream, np.ndarray]:
    """Right-pad with ``pad_id``; returns the padded stream and a validity mask."""
    n = len(stream)
    if length < n:
        raise ValidationError(f"cannot pad a stream of length {n} to shorter length {length}")
    tokens = np.concatenate([stream.tokens, np.full(length - n, stream.spec.pad_id, dtype=np.int64)])
    mask = np.zeros(length, dtype=bool)
    mask[:n] = True
    return TokenStream(stream.spec, tokens, stream.start_time), mask


def strip_padding(stream: TokenStream, mask: np.ndarray) -> TokenStream:
    return TokenStream(stream.spec, stream.tokens[np.asarray(mask, dtype=bool)], stream.start_time)


def residue_classes(audio_tokens: np.ndarray) -> np.ndarray:
    """Content channel of synthetic audio ids."""
    return np.asarray(audio_tokens, dtype=np.int64) % N_RESIDUE_CLASSES


def _part_block(part_index: int, cls: np.ndarray | int):
    return (cls + 3 * part_index) % N_RESIDUE_CLASSES


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 64
    motion_len: int = 120
    task_mix: Mapping[str, float] = field(
        default_factory=lambda: {"kf_motion": 1.0, "a2t": 0.5, "t2a": 0.5, "a2m": 1.0, "t2m": 0.25}
    )

    def __post_init__(self):
        if self.motion_len < 1:
            raise ValidationError(f"motion_len must be >= 1, got {self.motion_len}")
        if self.n_samples < 0:
            raise ValidationError(f"n_samples must be >= 0, got {self.n_samples}")


def _walk(rng: np.random.Generator, classes: np.ndarray) -> np.ndarray:
    """Reflecting second-order walk in [0, BLOCK_WIDTH) with class-biased drift."""
    top = BLOCK_WIDTH - 1
    w = int(rng.integers(0, BLOCK_WIDTH))
    v = 0
    out = np.empty(classes.size, dtype=np.int64)
    draws = rng.random(classes.size)
    for t, c in enumerate(classes):
        drift = 1 if c % 2 == 0 else -1
        u = draws[t]
        dv = drift if u < 0.6 else (0 if u < 0.9 else -drift)
        v = int(np.clip(v + dv, -MAX_VELOCITY, MAX_VELOCITY))
        w += v
        if w > top:
            w, v = 2 * top - w, -v
        elif w < 0:
            w, v = -w, -v
        out[t] = w
    return out


def render_transcript(classes: np.ndarray) -> np.ndarray:
    """One symbol per run of equal residue classes: ``class * 12 + length bucket``."""
    if classes.size == 0:
        return np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(np.diff(classes)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [classes.size]])
    runs = ends - starts
    return classes[starts] * RUN_BUCKETS + np.minimum(runs // 5, RUN_BUCKETS - 1)


def synth_sample(seed: int, index: int, motion_len: int) -> PairedSample:
    rng = np.random.default_rng([seed, index])
    n_audio = audio_length_for(motion_len)
    stay = rng.random(n_audio) < CLASS_STAY_PROB
    fresh = rng.integers(0, N_RESIDUE_CLASSES, size=n_audio)
    classes = np.empty(n_audio, dtype=np.int64)
    classes[0] = fresh[0]
    for i in range(1, n_audio):
        classes[i] = classes[i - 1] if stay[i] else fresh[i]
    identity = rng.integers(0, IDENTITIES_PER_CLASS, size=n_audio)
    audio = classes + N_RESIDUE_CLASSES * identity

    frame_classes = classes[np.minimum(audio_index(np.arange(motion_len)), n_audio - 1)]
    motion = {}
    for p, part in enumerate(PARTS):
        blocks = _part_block(p, frame_classes)
        motion[part] = make_stream(part, blocks * BLOCK_WIDTH + _walk(rng, frame_classes))
    return PairedSample(
        audio=make_stream("audio", audio),
        motion=motion,
        transcript=render_transcript(classes),
        speaker_tag=int(rng.integers(0, 10_000)),
    )


def synth_dataset(seed: int, config: SynthConfig) -> list[PairedSample]:
    """Deterministic synthetic corpus; samples are generated in parallel."""
    if config.n_samples == 0:
        return []
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        samples = list(
            pool.map(lambda i: synth_sample(seed, i, config.motion_len), range(config.n_samples))
        )
    logger.info("Synthesized %d samples of %d frames (seed=%d)", len(samples), config.motion_len, seed)
    return samples


def augment_audio_variants(sample: PairedSample, n_variants: int, seed: int) -> list[PairedSample]:
    """Many-to-one audio variants sharing the motion and transcript of ``sample``.

    Variant 0 is the sample itself. Variant i > 0 remaps each audio id through
    a seeded per-class permutation of the identity channel.
    """
    if n_variants < 1:
        raise ValidationError(f"n_variants must be >= 1, got {n_variants}")
    variants = [sample]
    base = sample.audio.tokens
    classes = residue_classes(base)
    identity = base // N_RESIDUE_CLASSES
    for i in range(1, n_variants):
        rng = np.random.default_rng([seed, sample.speaker_tag, i])
        perms = np.stack([rng.permutation(IDENTITIES_PER_CLASS) for _ in range(N_RESIDUE_CLASSES)])
        remapped = classes + N_RESIDUE_CLASSES * perms[classes, identity]
        variants.append(
            PairedSample(
                audio=TokenStream(sample.audio.spec, remapped, sample.audio.start_time),
                motion=sample.motion,
                transcript=sample.transcript,
                speaker_tag=int(rng.integers(0, 10_000)),
            )
        )
    return variants


def entropy_bits(values: np.ndarray) -> float:
    _, counts = np.unique(values, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def motion_entropies(samples: Sequence[PairedSample], part: str = "face") -> tuple[float, float]:
    """Empirical ``(H(motion_t), H(motion_t | audio residue class))`` in bits."""
    motion, cls = [], []
    for s in samples:
        frames = np.arange(s.motion_len)
        idx = np.minimum(audio_index(frames), len(s.audio) - 1)
        motion.append(s.motion[part].tokens)
        cls.append(residue_classes(s.audio.tokens[idx]))
    z = np.concatenate(motion)
    c = np.concatenate(cls)
    h_cond = 0.0
    for value in np.unique(c):
        sel = c == value
        h_cond += sel.mean() * entropy_bits(z[sel])
    return entropy_bits(z), h_cond


def dataset_header(config: SynthConfig | None = None, seed: int | None = None) -> dict:
    header = {
        "version": DATASET_VERSION,
        "rates": {name: spec.rate_hz for name, spec in CODEBOOKS.items()},
        "codebook_sizes": {name: spec.base_size for name, spec in CODEBOOKS.items()},
    }
    if config is not None:
        header["motion_len"] = config.motion_len
        header["task_mix"] = dict(config.task_mix)
    if seed is not None:
        header["seed"] = seed
    return header


def sample_to_record(sample: PairedSample) -> dict:
    record = {"audio": sample.audio.tokens.tolist()}
    record.update({p: sample.motion[p].tokens.tolist() for p in PARTS})
    record["text"] = sample.transcript.tolist()
    record["speaker"] = sample.speaker_tag
    return record


def record_to_sample(record: Mapping) -> PairedSample:
    return PairedSample(
        audio=make_stream("audio", record["audio"]),
        motion={p: make_stream(p, record[p]) for p in PARTS},
        transcript=record.get("text", []),
        speaker_tag=int(record.get("speaker", 0)),
    )


def write_dataset(path: str | Path, samples: Sequence[PairedSample], header: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header or dataset_header(), sort_keys=True) + "\n")
        for sample in samples:
            fh.write(json.dumps(sample_to_record(sample)) + "\n")
    logger.info("Wrote %d samples to %s", len(samples), path)
    return path


def read_dataset(path: str | Path) -> tuple[dict, list[PairedSample]]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise ValidationError(f"dataset file {path} is empty")
    header = json.loads(lines[0])
    if header.get("version") != DATASET_VERSION:
        raise ValidationError(f"unsupported dataset version {header.get('version')} in {path}")
    for name, size in header.get("codebook_sizes", {}).items():
        if name in CODEBOOKS and CODEBOOKS[name].base_size != size:
            raise ValidationError(f"dataset codebook '{name}' has size {size}, expected {CODEBOOKS[name].base_size}")
    return header, [record_to_sample(json.loads(line)) for line in lines[1:]]


def write_token_file(path: str | Path, streams: Mapping[str, TokenStream], meta: dict | None = None) -> Path:
    """Single-record token file (``generate`` output / audio input)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(dataset_header() | (meta or {}), sort_keys=True) + "\n")
        fh.write(json.dumps({name: s.tokens.tolist() for name, s in streams.items()}) + "\n")
    return path


def read_token_file(path: str | Path) -> tuple[dict, dict[str, TokenStream]]:
    """Read the first record of a token file; accepts dataset files too."""
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if len(lines) < 2:
        raise ValidationError(f"token file {path} has no record")
    header = json.loads(lines[0])
    record = json.loads(lines[1])
    streams = {name: make_stream(name, record[name]) for name in CODEBOOKS if name in record}
    return header, streams
