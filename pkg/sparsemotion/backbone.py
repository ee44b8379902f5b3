"""Prefix language model over the packed multimodal template.

The encoder attends bidirectionally over ``[task | audio | face | hand | upper
| lower]`` spans (each opened by a sentinel id); the decoder is causal and
consumes one position per keyframe step. A step's input is the sum of the four
part embeddings of the previous step (``<bos>`` at position 0) and its output
feeds four parallel part heads of 256 logits each. Text and audio heads serve
the alignment templates (a2t, t2a) used in pre-training.

All token ids live in one joint vocabulary: control symbols first, then the
audio, part and text codebooks (each including its mask and pad ids) at fixed
offsets.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from sparsemotion import moe
from sparsemotion import tensorcore as tc
from sparsemotion.config import BackboneConfig
from sparsemotion.errors import CapacityError, ValidationError
from sparsemotion.layers import (
    Embedding,
    FeedForward,
    KVPair,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
)
from sparsemotion.profiling import NULL_CLOCK, StageClock
from sparsemotion.tensorcore import Tensor
from sparsemotion.tokenstream import CODEBOOKS, PARTS, TokenStream

logger = logging.getLogger(__name__)

SEGMENTS = ("task", "audio", "face", "hand", "upper", "lower", "text")
CONTROL = ("<pad>", "<bos>", *(f"<{s}>" for s in SEGMENTS))
MOTION_VOCAB = CODEBOOKS["face"].base_size


@dataclass(frozen=True)
class VocabLayout:
    """Offsets of every codebook (base + mask + pad) in the joint vocabulary."""

    offsets: dict[str, int]
    sizes: dict[str, int]

    @classmethod
    def default(cls) -> VocabLayout:
        offsets, sizes = {"control": 0}, {"control": len(CONTROL)}
        cursor = len(CONTROL)
        for name in ("audio", *PARTS, "text"):
            offsets[name] = cursor
            sizes[name] = CODEBOOKS[name].size
            cursor += sizes[name]
        return cls(offsets, sizes)

    @property
    def total(self) -> int:
        return sum(self.sizes.values())

    def control(self, name: str) -> int:
        return CONTROL.index(name)

    def joint(self, modality: str, local_ids) -> np.ndarray:
        ids = np.asarray(local_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.sizes[modality]):
            raise ValidationError(f"{modality} ids outside [0, {self.sizes[modality]})")
        return ids + self.offsets[modality]

    def check(self) -> None:
        spans = sorted((off, off + self.sizes[name]) for name, off in self.offsets.items())
        for (_, end), (start, _) in zip(spans, spans[1:], strict=False):
            if start != end:
                raise ValidationError("vocabulary offsets overlap or leave gaps")


@dataclass(frozen=True)
class ChunkWindow:
    """Inputs of one chunk-wise prediction step."""

    task_text: np.ndarray
    audio: TokenStream
    history: np.ndarray
    history_mask: np.ndarray
    target_len: int
    chunk_index: int = 0

    def __post_init__(self):
        history = np.array(self.history, dtype=np.int64)
        mask = np.array(self.history_mask, dtype=bool)
        if history.ndim != 2 or history.shape[0] != len(PARTS):
            raise ValidationError(f"history must be (4, P), got {history.shape}")
        if mask.shape != (history.shape[1],):
            raise ValidationError(f"history mask {mask.shape} does not match P={history.shape[1]}")
        if self.target_len < 1:
            raise ValidationError("target_len must be >= 1")
        for arr in (history, mask):
            arr.setflags(write=False)
        object.__setattr__(self, "history", history)
        object.__setattr__(self, "history_mask", mask)
        object.__setattr__(self, "task_text", np.asarray(self.task_text, dtype=np.int64))

    @property
    def P(self) -> int:
        return int(self.history.shape[1])


@dataclass(frozen=True)
class PackedInput:
    ids: np.ndarray
    segments: np.ndarray
    valid: np.ndarray
    spans: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.ids.size)


def pack_segments(
    layout: VocabLayout,
    spans: Sequence[tuple[str, np.ndarray, np.ndarray | None]],
    max_positions: int,
) -> PackedInput:
    """Concatenate ``(segment, local ids, validity)`` spans behind sentinels.

    An empty ``task`` span is dropped together with its sentinel.
    """
    ids, segs, valid = [], [], []
    bounds: dict[str, tuple[int, int]] = {}
    length = 0
    for segment, local, mask in spans:
        local = np.asarray(local, dtype=np.int64)
        if segment == "task" and local.size == 0:
            continue
        modality = "text" if segment == "task" else segment
        n = local.size + 1
        if length + n > max_positions:
            raise CapacityError(segment, length + n, max_positions)
        seg_id = SEGMENTS.index(segment)
        ids.append(np.concatenate([[layout.control(f"<{segment}>")], layout.joint(modality, local)]))
        segs.append(np.full(n, seg_id, dtype=np.int64))
        span_valid = np.ones(local.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        valid.append(np.concatenate([[True], span_valid]))
        bounds[segment] = (length + 1, length + n)
        length += n
    if not ids:
        return PackedInput(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, bool), bounds)
    return PackedInput(np.concatenate(ids), np.concatenate(segs), np.concatenate(valid), bounds)


def pack_template(window: ChunkWindow, layout: VocabLayout, max_positions: int) -> PackedInput:
    audio_valid = window.audio.tokens != window.audio.spec.pad_id
    spans = [("task", window.task_text, None), ("audio", window.audio.tokens, audio_valid)]
    for p, part in enumerate(PARTS):
        spans.append((part, window.history[p], window.history_mask))
    return pack_segments(layout, spans, max_positions)


def stack_packed(batch: Sequence[PackedInput], layout: VocabLayout) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad packed inputs to a (B, L) batch; padding is invalid."""
    width = max((len(p) for p in batch), default=0)
    ids = np.full((len(batch), width), layout.control("<pad>"), dtype=np.int64)
    segs = np.zeros((len(batch), width), dtype=np.int64)
    valid = np.zeros((len(batch), width), dtype=bool)
    for i, p in enumerate(batch):
        ids[i, : len(p)] = p.ids
        segs[i, : len(p)] = p.segments
        valid[i, : len(p)] = p.valid
    return ids, segs, valid


@dataclass
class Memory:
    hidden: Tensor
    valid: np.ndarray


@dataclass
class DecoderState:
    """Per-layer self-attention caches plus lazily projected cross K/V."""

    self_kv: list[KVPair | None]
    cross_kv: list[KVPair | None]
    key_valid: np.ndarray
    emitted: int = 0

    def cache_lengths(self) -> list[int]:
        return [0 if kv is None else kv.length for kv in self.self_kv]


class EncoderLayer(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        rel = cfg.rel_buckets if cfg.use_position_bias else None
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, max_offset=rel)
        self.norm1 = LayerNorm(cfg.d_model)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn: FeedForward | moe.MoELayer = FeedForward(cfg.d_model, cfg.d_ffn, rng)

    def forward(self, h, valid, positions, routing=None, clock: StageClock = NULL_CLOCK):
        with clock.stage("encode_attention"):
            x = self.norm1(h)
            h = h + self.attn(x, self.attn.project_kv(x), key_mask=valid, q_pos=positions, k_pos=positions)
        with clock.stage("encode_moe_ffn"):
            h = h + self.ffn(self.norm2(h), token_mask=valid, routing=routing)
        return h


class DecoderLayer(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        rel = cfg.rel_buckets if cfg.use_position_bias else None
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, max_offset=rel)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.norm2 = LayerNorm(cfg.d_model)
        self.norm3 = LayerNorm(cfg.d_model)
        self.ffn: FeedForward | moe.MoELayer = FeedForward(cfg.d_model, cfg.d_ffn, rng)

    def forward(self, h, index, state, memory, q_pos, new_valid, routing=None, clock: StageClock = NULL_CLOCK):
        with clock.stage("decode_attention"):
            x = self.norm1(h)
            new_kv = self.self_attn.project_kv(x)
            cached = state.self_kv[index]
            kv = new_kv if cached is None else cached.append(new_kv)
            state.self_kv[index] = kv
            h = h + self.self_attn(
                x, kv, key_mask=state.key_valid, q_pos=q_pos, k_pos=np.arange(kv.length), causal=True
            )
            if state.cross_kv[index] is None:
                state.cross_kv[index] = self.cross_attn.project_kv(memory.hidden)
            h = h + self.cross_attn(self.norm2(h), state.cross_kv[index], key_mask=memory.valid)
        with clock.stage("decode_moe_ffn"):
            h = h + self.ffn(self.norm3(h), token_mask=new_valid, routing=routing)
        return h


class PrefixLM(Module):
    def __init__(self, config: BackboneConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.layout = VocabLayout.default()
        self.layout.check()
        d = config.d_model
        self.embed = Embedding(self.layout.total, d, rng)
        self.segment = Embedding(len(SEGMENTS), d, rng)
        self.enc_layers = [EncoderLayer(config, rng) for _ in range(config.n_enc_layers)]
        self.dec_layers = [DecoderLayer(config, rng) for _ in range(config.n_dec_layers)]
        self.enc_norm = LayerNorm(d)
        self.dec_norm = LayerNorm(d)
        self.part_heads = [Linear(d, MOTION_VOCAB, rng) for _ in PARTS]
        self.text_head = Linear(d, CODEBOOKS["text"].base_size, rng)
        self.audio_head = Linear(d, CODEBOOKS["audio"].base_size, rng)
        self.is_sparse = False

    def upcycle(self, n_experts: int, k: int, seed: int, router_std: float = 0.02) -> None:
        """Swap every dense FFN for an MoE layer of identical experts."""
        if self.is_sparse:
            raise ValidationError("model is already upcycled")
        for prefix, layers in (("enc", self.enc_layers), ("dec", self.dec_layers)):
            for i, layer in enumerate(layers):
                layer.ffn = moe.upcycle(
                    layer.ffn,
                    n_experts,
                    seed=seed + 100 * (prefix == "dec") + i,
                    k=k,
                    router_std=router_std,
                    name=f"{prefix}.{i}",
                )
        self.is_sparse = True
        logger.info("Upcycled %d FFN layers to %d experts (k=%d)", len(self.enc_layers) + len(self.dec_layers), n_experts, k)

    def moe_layers(self) -> list[moe.MoELayer]:
        layers = (*self.enc_layers, *self.dec_layers)
        return [layer.ffn for layer in layers if isinstance(layer.ffn, moe.MoELayer)]

    def encode(
        self,
        ids: np.ndarray,
        segments: np.ndarray,
        valid: np.ndarray,
        routing: list | None = None,
        clock: StageClock = NULL_CLOCK,
    ) -> Memory:
        """Bidirectional encoding of (B, L) packed ids; pads are masked keys."""
        if ids.shape[-1] > self.config.max_positions:
            raise CapacityError("encoder", ids.shape[-1], self.config.max_positions)
        h = self.embed(ids) + self.segment(segments)
        positions = np.arange(ids.shape[-1])
        for layer in self.enc_layers:
            h = layer(h, valid, positions, routing=routing, clock=clock)
        return Memory(self.enc_norm(h), valid)

    def encode_packed(self, packed: PackedInput, routing=None, clock: StageClock = NULL_CLOCK) -> Memory:
        return self.encode(packed.ids[None], packed.segments[None], packed.valid[None], routing, clock)

    def new_state(self, memory: Memory) -> DecoderState:
        n = len(self.dec_layers)
        return DecoderState([None] * n, [None] * n, np.zeros((memory.valid.shape[0], 0), dtype=bool))

    def decode(
        self,
        state: DecoderState,
        memory: Memory,
        inputs: Tensor,
        valid: np.ndarray,
        routing: list | None = None,
        clock: StageClock = NULL_CLOCK,
    ) -> Tensor:
        """Run ``l`` new decoder positions (B, l, d) against the cache."""
        b, n_new, _ = inputs.shape
        start = state.emitted
        if start + n_new > self.config.max_positions:
            raise CapacityError("decoder", start + n_new, self.config.max_positions)
        valid = np.asarray(valid, dtype=bool).reshape(b, n_new)
        state.key_valid = np.concatenate([state.key_valid, valid], axis=1)
        q_pos = np.arange(start, start + n_new)
        h = inputs
        for i, layer in enumerate(self.dec_layers):
            h = layer(h, i, state, memory, q_pos, valid, routing=routing, clock=clock)
        state.emitted += n_new
        return self.dec_norm(h)

    def bos(self, batch: int) -> Tensor:
        return self.embed(np.full((batch, 1), self.layout.control("<bos>"), dtype=np.int64))

    def embed_motion(self, tokens: np.ndarray) -> Tensor:
        """Sum of the four part embeddings; ``tokens`` is (B, l, 4) local ids."""
        tokens = np.asarray(tokens, dtype=np.int64)
        joint = np.stack([self.layout.joint(p, tokens[..., i]) for i, p in enumerate(PARTS)], axis=-1)
        return self.embed(joint).sum(axis=2)

    def embed_stream(self, modality: str, tokens: np.ndarray) -> Tensor:
        return self.embed(self.layout.joint(modality, tokens))

    def shift_right(self, embedded: Tensor) -> Tensor:
        """Teacher-forcing inputs: ``<bos>`` followed by all but the last target."""
        b, length, _ = embedded.shape
        if length == 1:
            return self.bos(b)
        return tc.concat([self.bos(b), tc.take(embedded, (slice(None), slice(0, length - 1)))], axis=1)

    def part_logits(self, hidden: Tensor) -> list[Tensor]:
        return [head(hidden) for head in self.part_heads]

    def stream_logits(self, modality: str, hidden: Tensor) -> Tensor:
        return {"text": self.text_head, "audio": self.audio_head}[modality](hidden)

    def decode_step(
        self,
        state: DecoderState,
        memory: Memory,
        last_tokens: np.ndarray | None,
        last_valid: bool = True,
        routing: list | None = None,
        clock: StageClock = NULL_CLOCK,
    ) -> list[Tensor]:
        """One keyframe step: returns four (B, 256) logit tensors.

        ``last_tokens`` is the (B, 4) previous step, or None for ``<bos>``.
        """
        b = memory.valid.shape[0]
        inputs = self.bos(b) if last_tokens is None else self.embed_motion(np.asarray(last_tokens)[:, None, :])
        valid = np.full((b, 1), bool(last_valid))
        hidden = self.decode(state, memory, inputs, valid, routing=routing, clock=clock)
        return [logits.reshape(b, MOTION_VOCAB) for logits in self.part_logits(hidden)]


def build_model(config: BackboneConfig, seed: int, sparse: bool = False) -> PrefixLM:
    model = PrefixLM(config, seed)
    if sparse:
        model.upcycle(config.n_experts, config.top_k, seed, config.router_init_std)
    return model


@dataclass(frozen=True)
class Sampling:
    temperature: float = 0.0
    seed: int | None = None

    @property
    def greedy(self) -> bool:
        return self.temperature <= 0.0


def select_token(logits: np.ndarray, sampling: Sampling, rng: np.random.Generator) -> int:
    if sampling.greedy:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / sampling.temperature
    z = z - z.max()
    p = np.exp(z)
    return int(rng.choice(p.size, p=p / p.sum()))


@dataclass
class ChunkPrediction:
    tokens: np.ndarray
    decoder_steps: int


def chunk_predict(
    model: PrefixLM,
    window: ChunkWindow,
    sampling: Sampling | None = None,
    clock: StageClock = NULL_CLOCK,
    routing: list | None = None,
) -> ChunkPrediction:
    """Encode the window, prefill the history, then decode ``target_len`` steps."""
    sampling = sampling or Sampling()
    rng = np.random.default_rng(sampling.seed)
    P, N = window.P, window.target_len
    out = np.empty((len(PARTS), N), dtype=np.int64)
    was_training = model.training
    model.eval()
    try:
        with tc.no_grad():
            packed = pack_template(window, model.layout, model.config.max_positions)
            memory = model.encode_packed(packed, routing=routing, clock=clock)
            state = model.new_state(memory)
            history = window.history.T[None]
            prev, prev_valid = None, True
            if P:
                inputs = model.bos(1)
                if P > 1:
                    inputs = tc.concat([inputs, model.embed_motion(history[:, :-1])], axis=1)
                valid = np.concatenate([[True], window.history_mask[:-1]])[None]
                with clock.stage("decode_total"):
                    model.decode(state, memory, inputs, valid, routing=routing, clock=clock)
                prev, prev_valid = history[:, -1], bool(window.history_mask[-1])
            for i in range(N):
                with clock.stage("decode_total"):
                    logits = model.decode_step(state, memory, prev, prev_valid, routing=routing, clock=clock)
                    out[:, i] = [select_token(row.data[0], sampling, rng) for row in logits]
                prev, prev_valid = out[:, i][None], True
    finally:
        model.train(was_training)
    return ChunkPrediction(out, N)
