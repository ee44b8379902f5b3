"""Module system and transformer building blocks on top of ``tensorcore``."""

from __future__ import annotations

import logging
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np

from sparsemotion import tensorcore as tc
from sparsemotion.errors import CheckpointError, ValidationError
from sparsemotion.tensorcore import Parameter, Tensor

logger = logging.getLogger(__name__)


class Module:
    """Parameter container with dotted-name traversal (``a.b.0.weight``)."""

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter | Module):
                yield name, value
            elif isinstance(value, list | tuple):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter | Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield full, value
            else:
                for sub_name, param in value.named_parameters(prefix=f"{full}."):
                    if id(param) not in seen:
                        seen.add(id(param))
                        yield sub_name, param

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise CheckpointError(
                "checkpoint parameters do not match the model",
                sorted(missing | unexpected),
            )
        mismatched = [n for n, p in own.items() if p.shape != tuple(state[n].shape)]
        if mismatched:
            raise CheckpointError("checkpoint parameter shapes differ", mismatched)
        for name, p in own.items():
            p.data = np.array(state[name], dtype=p.dtype)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def init_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(tc.get_default_dtype())


class Linear(Module):
    def __init__(
        self,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        bias: bool = True,
        std: float | None = None,
    ):
        self.weight = Parameter(init_normal(rng, (d_in, d_out), std or d_in**-0.5))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float = 0.02):
        self.table = Parameter(init_normal(rng, (n, d), std))

    def forward(self, ids: np.ndarray) -> Tensor:
        return tc.embedding_lookup(self.table, ids)


class FeedForward(Module):
    """Position-wise two-layer GELU block (the dense FFN that MoE upcycles)."""

    def __init__(self, d_model: int, d_ffn: int, rng: np.random.Generator):
        self.w_in = Linear(d_model, d_ffn, rng)
        self.w_out = Linear(d_ffn, d_model, rng)

    def forward(self, h: Tensor, token_mask: np.ndarray | None = None, routing: list | None = None):
        return self.w_out(tc.gelu(self.w_in(h)))


@dataclass
class KVPair:
    """Projected keys/values shaped (batch, heads, length, head_dim)."""

    k: Tensor
    v: Tensor

    @property
    def length(self) -> int:
        return self.k.shape[2]

    def append(self, other: KVPair) -> KVPair:
        return KVPair(tc.concat([self.k, other.k], axis=2), tc.concat([self.v, other.v], axis=2))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with an optional learned relative bias.

    The bias is one learned scalar per head and clipped offset
    ``key_pos - query_pos`` in ``[-max_offset, max_offset]``.
    """

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        rng: np.random.Generator,
        max_offset: int | None = None,
    ):
        if d_model % n_heads:
            raise ValidationError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q = Linear(d_model, d_model, rng, bias=False)
        self.k = Linear(d_model, d_model, rng, bias=False)
        self.v = Linear(d_model, d_model, rng, bias=False)
        self.o = Linear(d_model, d_model, rng, bias=False)
        self.max_offset = max_offset
        self.rel_bias = (
            Parameter(np.zeros((2 * max_offset + 1, n_heads))) if max_offset else None
        )
        self.capture_weights = False
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, length, _ = x.shape
        return x.reshape(b, length, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def project_kv(self, x: Tensor) -> KVPair:
        return KVPair(self._split(self.k(x)), self._split(self.v(x)))

    def forward(
        self,
        x_q: Tensor,
        kv: KVPair,
        key_mask: np.ndarray | None = None,
        q_pos: np.ndarray | None = None,
        k_pos: np.ndarray | None = None,
        causal: bool = False,
    ) -> Tensor:
        """Attend queries ``x_q`` (B, Lq, d) over cached/projected ``kv``.

        Args:
            key_mask: (B, Lk) True for attendable keys.
            q_pos, k_pos: Integer positions for the relative bias and the
                causal rule (key_pos <= query_pos).
        """
        b, lq, d = x_q.shape
        lk = kv.length
        q = self._split(self.q(x_q))
        scores = (q @ kv.k.transpose(0, 1, 3, 2)) * (self.head_dim**-0.5)

        q_pos = np.arange(lq) if q_pos is None else q_pos
        k_pos = np.arange(lk) if k_pos is None else k_pos
        if self.rel_bias is not None:
            offsets = np.clip(k_pos[None, :] - q_pos[:, None], -self.max_offset, self.max_offset)
            bias = tc.embedding_lookup(self.rel_bias, offsets + self.max_offset)
            scores = scores + bias.transpose(2, 0, 1)

        mask = np.ones((b, 1, lq, lk), dtype=bool)
        if key_mask is not None:
            mask &= key_mask[:, None, None, :]
        if causal:
            mask &= (k_pos[None, :] <= q_pos[:, None])[None, None]
        weights = tc.softmax(scores, axis=-1, mask=mask)
        if self.capture_weights:
            self.last_weights = weights.data.copy()
        ctx = (weights @ kv.v).transpose(0, 2, 1, 3).reshape(b, lq, d)
        return self.o(ctx)
