"""Masked in-betweening network and its training losses.

Each part stream is embedded with its own table (base ids plus mask and pad),
tagged with a frame-type embedding and a part-identity embedding, and the
four parts are summed through per-part linear maps into one vector per frame.
Bidirectional temporal attention runs over frames; a part-aware attention
layer then mixes the four part slots inside every frame before four part heads
emit 256 logits each. The network never sees audio.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from sparsemotion import tensorcore as tc
from sparsemotion.config import InterpConfig
from sparsemotion.errors import ValidationError
from sparsemotion.keyframe import (
    MOTION_BASE,
    FrameType,
    KeyframeSchedule,
    MaskedSequence,
    mask_sequence,
    merge,
    schedule,
)
from sparsemotion.layers import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from sparsemotion.tensorcore import LossTerm, Tensor
from sparsemotion.tokenstream import CODEBOOKS, PARTS

logger = logging.getLogger(__name__)

PART_TABLE_SIZE = CODEBOOKS["face"].size


@dataclass(frozen=True)
class InterpBatch:
    """Masked part tokens (B, 4, L), frame tags (B, L) and dense targets (B, 4, L)."""

    tokens: np.ndarray
    frame_type: np.ndarray
    targets: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.frame_type != FrameType.PAD

    @property
    def masked(self) -> np.ndarray:
        return self.frame_type == FrameType.MASKED

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())


def make_batch(dense: Sequence[np.ndarray], s: int, length: int | None = None) -> tuple[InterpBatch, list[MaskedSequence]]:
    """Mask (4, T_i) dense windows at stride ``s`` and right-pad them to one length."""
    width = length or max(d.shape[1] for d in dense)
    seqs = [mask_sequence(d, schedule(d.shape[1], s), length=width) for d in dense]
    targets = np.zeros((len(dense), len(PARTS), width), dtype=np.int64)
    for i, d in enumerate(dense):
        targets[i, :, : d.shape[1]] = d
    batch = InterpBatch(
        tokens=np.stack([q.tokens for q in seqs]),
        frame_type=np.stack([q.frame_type for q in seqs]),
        targets=targets,
    )
    return batch, seqs


class Block(Module):
    """Pre-norm self-attention plus feed-forward."""

    def __init__(self, d: int, heads: int, d_ffn: int, rng: np.random.Generator, max_offset: int | None = None):
        self.attn = MultiHeadAttention(d, heads, rng, max_offset=max_offset)
        self.ffn = FeedForward(d, d_ffn, rng)
        self.norm1 = LayerNorm(d)
        self.norm2 = LayerNorm(d)

    def forward(self, h: Tensor, key_mask: np.ndarray | None = None, positions: np.ndarray | None = None) -> Tensor:
        x = self.norm1(h)
        h = h + self.attn(x, self.attn.project_kv(x), key_mask=key_mask, q_pos=positions, k_pos=positions)
        return h + self.ffn(self.norm2(h))


class InterpNet(Module):
    def __init__(self, config: InterpConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        d = config.d_model
        n_tables = 1 if config.tie_parts else len(PARTS)
        tables = [Embedding(PART_TABLE_SIZE, d, rng) for _ in range(n_tables)]
        aggregators = [Linear(d, d, rng, bias=False) for _ in range(n_tables)]
        heads = [Linear(d, MOTION_BASE, rng) for _ in range(n_tables)]
        self.tables = tables * len(PARTS) if config.tie_parts else tables
        self.aggregate = aggregators * len(PARTS) if config.tie_parts else aggregators
        self.heads = heads * len(PARTS) if config.tie_parts else heads
        self.frame_type_emb = Embedding(len(FrameType), d, rng)
        self.part_emb = Embedding(len(PARTS), d, rng)
        self.temporal = [
            Block(d, config.n_heads, config.d_ffn, rng, max_offset=config.max_offset)
            for _ in range(config.n_temporal_layers)
        ]
        self.part_layers = [Block(d, config.n_heads, config.d_ffn, rng) for _ in range(config.n_part_layers)]
        self.norm = LayerNorm(d)

    def part_table(self, p: int) -> Tensor:
        return self.tables[p].table

    def part_tables(self) -> list[Tensor]:
        return [t.table for t in self.tables]

    def forward(self, tokens: np.ndarray, frame_type: np.ndarray, part_ids: Sequence[int] | None = None) -> Tensor:
        """Logits (B, 4, L, 256) for masked tokens (B, 4, L) and tags (B, L)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        b, n_parts, length = tokens.shape
        part_ids = list(range(n_parts)) if part_ids is None else list(part_ids)
        valid = np.asarray(frame_type) != FrameType.PAD
        tags = self.frame_type_emb(frame_type)
        slots = []
        for p in range(n_parts):
            pid = part_ids[p]
            slots.append(self.tables[pid](tokens[:, p]) + tags + self.part_emb(np.array(pid)))
        frame = self.aggregate[part_ids[0]](slots[0])
        for p in range(1, n_parts):
            frame = frame + self.aggregate[part_ids[p]](slots[p])

        positions = np.arange(length)
        for block in self.temporal:
            frame = block(frame, key_mask=valid, positions=positions)

        mixed = tc.stack([slot + frame for slot in slots], axis=2).reshape(b * length, n_parts, -1)
        for block in self.part_layers:
            mixed = block(mixed)
        mixed = self.norm(mixed).reshape(b, length, n_parts, self.config.d_model)
        logits = [
            self.heads[part_ids[p]](tc.take(mixed, (slice(None), slice(None), p)))
            for p in range(n_parts)
        ]
        return tc.stack(logits, axis=1)

    def forward_batch(self, batch: InterpBatch) -> Tensor:
        return self(batch.tokens, batch.frame_type)


def predict_masked(logits: np.ndarray, masked: MaskedSequence) -> tuple[np.ndarray, np.ndarray]:
    """Argmax over the base vocabulary at masked frames; returns (positions, (4, M) ids)."""
    logits = np.asarray(logits)
    positions = masked.masked_positions
    base = logits[..., :MOTION_BASE]
    return positions, np.argmax(base[:, positions], axis=-1).astype(np.int64)


def loss_ce(logits: Tensor, batch: InterpBatch, label_smoothing: float = 0.1) -> LossTerm:
    """Smoothed CE summed over masked, non-pad frames of every part."""
    keep = np.broadcast_to((batch.masked & batch.valid)[:, None, :], batch.targets.shape)
    return tc.cross_entropy(
        logits,
        batch.targets,
        label_smoothing=label_smoothing,
        ignore_mask=~keep,
        reduction="sum",
    )


def _masked_sq_mean(diff: Tensor, mask: np.ndarray) -> LossTerm:
    count = int(mask.sum())
    if count == 0:
        return LossTerm(Tensor(0.0, dtype=diff.dtype), 0)
    weights = Tensor(np.broadcast_to(mask[..., None], diff.shape).astype(diff.dtype))
    return LossTerm((diff * diff * weights).sum() * (1.0 / (count * diff.shape[-1])), count)


def _mean_terms(terms: list[LossTerm]) -> LossTerm:
    live = [t for t in terms if not t.empty]
    if not live:
        return LossTerm(Tensor(0.0), 0)
    total = live[0].value
    for t in live[1:]:
        total = total + t.value
    return LossTerm(total * (1.0 / len(live)), live[0].count)


def loss_smooth(logits: Tensor, batch: InterpBatch, tables: Sequence[Tensor]) -> tuple[LossTerm, LossTerm]:
    """Velocity and acceleration penalties on argmax-decoded embedding trajectories.

    The argmax is taken on raw logit values, so gradients reach only the
    part embedding tables.
    """
    valid = batch.valid
    pairs = valid[:, 1:] & valid[:, :-1]
    triples = valid[:, 2:] & valid[:, 1:-1] & valid[:, :-2]
    raw = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    ids = np.argmax(raw[..., :MOTION_BASE], axis=-1)
    vel, acc = [], []
    for p in range(len(PARTS)):
        e = tc.embedding_lookup(tables[p], ids[:, p])
        length = e.shape[1]
        if length >= 2:
            d1 = tc.take(e, (slice(None), slice(1, None))) - tc.take(e, (slice(None), slice(0, length - 1)))
            vel.append(_masked_sq_mean(d1, pairs))
        if length >= 3:
            d2 = (
                tc.take(e, (slice(None), slice(2, None)))
                - tc.take(e, (slice(None), slice(1, length - 1))) * 2.0
                + tc.take(e, (slice(None), slice(0, length - 2)))
            )
            acc.append(_masked_sq_mean(d2, triples))
    return _mean_terms(vel), _mean_terms(acc)


@dataclass
class InterpLoss:
    total: Tensor
    ce: LossTerm
    vel: LossTerm
    acc: LossTerm


def loss_interp(net: InterpNet, batch: InterpBatch) -> InterpLoss:
    cfg = net.config
    logits = net.forward_batch(batch)
    ce = loss_ce(logits, batch, cfg.label_smoothing)
    vel, acc = loss_smooth(logits, batch, net.part_tables())
    total = ce.value + vel.value * cfg.lambda_v + acc.value * cfg.lambda_a
    return InterpLoss(total, ce, vel, acc)


def _fixed_neighbours(fixed: np.ndarray, t: int) -> tuple[int | None, int | None]:
    left = fixed[fixed <= t]
    right = fixed[fixed >= t]
    return (int(left[-1]) if left.size else None, int(right[0]) if right.size else None)


def linear_interp_baseline(masked: MaskedSequence, tables: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Blend flanking anchor embeddings linearly and snap to the nearest base id."""
    positions = masked.masked_positions
    fixed = masked.schedule.fixed
    out = np.empty((len(PARTS), positions.size), dtype=np.int64)
    for p in range(len(PARTS)):
        table = np.asarray(tables[p], dtype=np.float64)
        base = table[:MOTION_BASE]
        for j, t in enumerate(positions):
            a, b = _fixed_neighbours(fixed, int(t))
            if a is None or b is None or a == b:
                out[p, j] = masked.tokens[p, a if a is not None else b]
                continue
            alpha = (t - a) / (b - a)
            target = (1.0 - alpha) * table[masked.tokens[p, a]] + alpha * table[masked.tokens[p, b]]
            out[p, j] = int(np.argmin(((base - target) ** 2).sum(axis=1)))
    return positions, out


def interpolate(net: InterpNet, dense_anchors: np.ndarray, sched: KeyframeSchedule) -> np.ndarray:
    """Fill one (4, T) window whose fixed frames hold real ids; returns dense ids."""
    masked = mask_sequence(dense_anchors, sched)
    if masked.masked_positions.size == 0:
        return np.array(masked.tokens)
    with tc.no_grad():
        logits = net(masked.tokens[None], masked.frame_type[None]).data[0]
    positions, predicted = predict_masked(logits, masked)
    return merge(masked, positions, predicted)


def interpolate_linear(tables: Sequence[np.ndarray], dense_anchors: np.ndarray, sched: KeyframeSchedule) -> np.ndarray:
    masked = mask_sequence(dense_anchors, sched)
    if masked.masked_positions.size == 0:
        return np.array(masked.tokens)
    positions, predicted = linear_interp_baseline(masked, tables)
    return merge(masked, positions, predicted)


def net_tables(net: InterpNet) -> list[np.ndarray]:
    return [t.data for t in net.part_tables()]


def gradcheck_case(kind: str) -> tuple[Callable[[], Tensor], dict[str, Tensor]]:
    """Toy 4-frame batch (plus one pad frame) for ``vel``, ``acc`` or ``interp``."""
    cfg = InterpConfig(d_model=8, n_temporal_layers=1, n_part_layers=1, n_heads=2, d_ffn=12, max_offset=4)
    net = InterpNet(cfg, seed=2)
    rng = np.random.default_rng(4)
    dense = rng.integers(0, MOTION_BASE, size=(len(PARTS), 4))
    batch, _ = make_batch([dense], s=2, length=5)
    # Spread the tables so the argmax trajectory is not constant.
    for p in range(len(PARTS)):
        net.part_table(p).data = net.part_table(p).data * 50.0

    if kind == "vel":
        def loss() -> Tensor:
            return loss_smooth(net.forward_batch(batch), batch, net.part_tables())[0].value
    elif kind == "acc":
        def loss() -> Tensor:
            return loss_smooth(net.forward_batch(batch), batch, net.part_tables())[1].value
    elif kind == "interp":
        def loss() -> Tensor:
            return loss_interp(net, batch).total
    else:
        raise ValidationError(f"unknown interpolation loss '{kind}'")

    params = dict(net.named_parameters())
    if kind != "interp":
        params = {name: p for name, p in params.items() if name.startswith("tables.")}
    return loss, params
