"""Sparse-upcycled mixture-of-experts feed-forward layers.

A ``MoELayer`` replaces one dense ``FeedForward``: a bias-free router
``W_r`` (d x E) scores every token, the top-k experts run on the tokens routed
to them, and their outputs are combined with in-set normalized weights.
Routing is reported per call through ``RoutingRecord`` objects appended to a
caller-owned list, so a layer holds no per-batch state and can be shared by
concurrent streams.
"""

from __future__ import annotations

import copy
import logging
from collections import deque
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from sparsemotion import tensorcore as tc
from sparsemotion.errors import ValidationError
from sparsemotion.layers import FeedForward, Module, init_normal
from sparsemotion.tensorcore import LossTerm, Parameter, Tensor

logger = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-9


@dataclass
class RoutingRecord:
    """Routing of one forward call over flattened tokens.

    ``probs`` and ``dispatch`` are graph tensors in training mode; in eval mode
    they are detached and ``aux`` is False.
    """

    layer: str
    probs: Tensor
    dispatch: Tensor
    selected: np.ndarray
    valid: np.ndarray
    expert_evals: np.ndarray
    aux: bool = True

    @property
    def n_experts(self) -> int:
        return int(self.probs.shape[-1])


class MoELayer(Module):
    def __init__(
        self,
        experts: Sequence[FeedForward],
        router: np.ndarray,
        k: int = 1,
        name: str = "moe",
    ):
        if not experts:
            raise ValidationError("MoE layer needs at least one expert")
        d_in = {e.w_in.weight.shape[0] for e in experts}
        d_out = {e.w_out.weight.shape[1] for e in experts}
        if len(d_in) != 1 or len(d_out) != 1:
            raise ValidationError("experts must share input and output dimensionality")
        if router.shape != (d_in.pop(), len(experts)):
            raise ValidationError(f"router shape {router.shape} does not match experts")
        if not 1 <= k <= len(experts):
            raise ValidationError(f"k={k} outside [1, {len(experts)}]")
        self.experts = list(experts)
        self.router = Parameter(router)
        self.k = k
        self.name = name

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def route_probs(self, flat: Tensor) -> tuple[Tensor, np.ndarray]:
        """Router probabilities (n, E) and selected experts (n, k), ties to lower index."""
        probs = tc.softmax(flat @ self.router, axis=-1)
        order = np.argsort(-probs.data, axis=-1, kind="stable")
        return probs, order[:, : self.k]

    def _dispatch(self, probs: Tensor, selected: np.ndarray) -> Tensor:
        onehot = np.zeros(probs.shape, dtype=probs.dtype)
        np.put_along_axis(onehot, selected, 1.0, axis=-1)
        if self.k == 1:
            return Tensor(onehot, dtype=probs.dtype)
        return tc.normalize_last(probs * Tensor(onehot, dtype=probs.dtype), floor=WEIGHT_FLOOR)

    def forward(
        self,
        h: Tensor,
        token_mask: np.ndarray | None = None,
        routing: list[RoutingRecord] | None = None,
    ) -> Tensor:
        *lead, d = h.shape
        n = int(np.prod(lead)) if lead else 1
        flat = h.reshape(n, d)
        probs, selected = self.route_probs(flat)
        dispatch = self._dispatch(probs, selected)
        evals = np.zeros(self.n_experts, dtype=np.int64)
        out: Tensor | None = None
        for e, expert in enumerate(self.experts):
            rows = np.flatnonzero((selected == e).any(axis=1))
            if rows.size == 0:
                continue
            evals[e] = rows.size
            y = expert(tc.take(flat, rows))
            if self.k > 1:
                w = tc.take(dispatch, (rows[:, None], np.array([[e]])))
                y = y * (w @ Tensor(np.ones((1, y.shape[-1])), dtype=y.dtype))
            part = tc.scatter_rows(y, rows, n)
            out = part if out is None else out + part
        if out is None:
            out = Tensor(np.zeros((n, d)), dtype=h.dtype)
        if routing is not None:
            valid = np.ones(n, dtype=bool) if token_mask is None else np.asarray(token_mask, dtype=bool).reshape(n)
            aux = self.training
            routing.append(
                RoutingRecord(
                    layer=self.name,
                    probs=probs if aux else probs.detach(),
                    dispatch=dispatch if aux else dispatch.detach(),
                    selected=selected,
                    valid=valid,
                    expert_evals=evals,
                    aux=aux,
                )
            )
        return out.reshape(*lead, d)


def upcycle(
    dense_ffn: FeedForward,
    n_experts: int,
    seed: int,
    k: int = 1,
    router_std: float = 0.02,
    name: str = "moe",
) -> MoELayer:
    """E deep copies of ``dense_ffn`` behind a freshly initialized router."""
    if n_experts < 1:
        raise ValidationError(f"n_experts must be >= 1, got {n_experts}")
    rng = np.random.default_rng(seed)
    d_model = dense_ffn.w_in.weight.shape[0]
    router = init_normal(rng, (d_model, n_experts), router_std)
    experts = [copy.deepcopy(dense_ffn) for _ in range(n_experts)]
    return MoELayer(experts, router, k=k, name=name)


@dataclass(frozen=True)
class RouteDecision:
    selected: tuple[int, ...]
    weights: np.ndarray
    probs: np.ndarray


def route(layer: MoELayer, h: np.ndarray) -> RouteDecision:
    """Route a single d-vector."""
    with tc.no_grad():
        probs, selected = layer.route_probs(Tensor(np.asarray(h).reshape(1, -1)))
        dispatch = layer._dispatch(probs, selected)
    sel = tuple(int(e) for e in selected[0])
    weights = np.array([dispatch.data[0, e] for e in sel])
    return RouteDecision(sel, weights, probs.data[0])


def load_balance_terms(probs: Tensor, dispatch: Tensor, valid: np.ndarray) -> LossTerm:
    """``E * sum_e f_e * mean_pi_e`` over valid tokens."""
    rows = np.flatnonzero(valid)
    if rows.size == 0:
        return LossTerm(Tensor(0.0, dtype=probs.dtype), 0)
    f = tc.take(dispatch, rows).mean(axis=0)
    pbar = tc.take(probs, rows).mean(axis=0)
    return LossTerm((f * pbar).sum() * float(probs.shape[-1]), int(rows.size))


def _group_by_layer(records: Iterable[RoutingRecord]) -> dict[str, list[RoutingRecord]]:
    groups: dict[str, list[RoutingRecord]] = {}
    for r in records:
        groups.setdefault(r.layer, []).append(r)
    return groups


def load_balance_loss(records: Iterable[RoutingRecord]) -> LossTerm:
    """Per-layer load balance averaged over layers; ``count`` is layers used."""
    per_layer = []
    for recs in _group_by_layer(r for r in records if r.aux).values():
        probs = recs[0].probs if len(recs) == 1 else tc.concat([r.probs for r in recs], axis=0)
        dispatch = recs[0].dispatch if len(recs) == 1 else tc.concat([r.dispatch for r in recs], axis=0)
        valid = np.concatenate([r.valid for r in recs])
        term = load_balance_terms(probs, dispatch, valid)
        if not term.empty:
            per_layer.append(term.value)
    if not per_layer:
        return LossTerm(Tensor(0.0), 0)
    total = per_layer[0]
    for value in per_layer[1:]:
        total = total + value
    return LossTerm(total * (1.0 / len(per_layer)), len(per_layer))


@dataclass
class RoutingStats:
    """Accumulated routing telemetry for one layer; ``merge`` is commutative."""

    n_experts: int
    f_sum: np.ndarray | None = None
    pi_sum: np.ndarray | None = None
    top1_hits: np.ndarray | None = None
    tokens_seen: int = 0

    def __post_init__(self):
        if self.f_sum is None:
            self.f_sum = np.zeros(self.n_experts)
            self.pi_sum = np.zeros(self.n_experts)
            self.top1_hits = np.zeros(self.n_experts, dtype=np.int64)

    @classmethod
    def from_record(cls, record: RoutingRecord) -> RoutingStats:
        rows = np.flatnonzero(record.valid)
        stats = cls(record.n_experts)
        stats.f_sum = record.dispatch.data[rows].astype(np.float64).sum(axis=0)
        stats.pi_sum = record.probs.data[rows].astype(np.float64).sum(axis=0)
        stats.top1_hits = np.bincount(record.selected[rows, 0], minlength=record.n_experts)
        stats.tokens_seen = int(rows.size)
        return stats

    def merge(self, other: RoutingStats) -> RoutingStats:
        return RoutingStats(
            self.n_experts,
            self.f_sum + other.f_sum,
            self.pi_sum + other.pi_sum,
            self.top1_hits + other.top1_hits,
            self.tokens_seen + other.tokens_seen,
        )

    @property
    def f(self) -> np.ndarray:
        return self.f_sum / max(self.tokens_seen, 1)

    @property
    def pi_mean(self) -> np.ndarray:
        return self.pi_sum / max(self.tokens_seen, 1)

    @property
    def top1_share(self) -> np.ndarray:
        return self.top1_hits / max(self.tokens_seen, 1)

    @property
    def l_moe(self) -> float:
        if self.tokens_seen == 0:
            return 0.0
        return float(self.n_experts * np.sum(self.f * self.pi_mean))

    def to_dict(self) -> dict:
        return {
            "f_e": self.f.round(6).tolist(),
            "pi_mean": self.pi_mean.round(6).tolist(),
            "top1_share": self.top1_share.round(6).tolist(),
            "tokens": self.tokens_seen,
            "l_moe": round(self.l_moe, 6),
        }


def collect_stats(records: Iterable[RoutingRecord]) -> dict[str, RoutingStats]:
    out: dict[str, RoutingStats] = {}
    for r in records:
        stats = RoutingStats.from_record(r)
        out[r.layer] = out[r.layer].merge(stats) if r.layer in out else stats
    return out


def merge_stats(a: dict[str, RoutingStats], b: dict[str, RoutingStats]) -> dict[str, RoutingStats]:
    merged = dict(a)
    for layer, stats in b.items():
        merged[layer] = merged[layer].merge(stats) if layer in merged else stats
    return merged


@dataclass
class CollapseReport:
    threshold: float
    shares: dict[str, float] = field(default_factory=dict)
    flagged: list[str] = field(default_factory=list)

    @property
    def collapsed(self) -> bool:
        return bool(self.flagged)


class CollapseMonitor:
    """Sliding-window top-1 hit share per layer."""

    def __init__(self, threshold: float = 0.9, window: int = 20):
        self.threshold = threshold
        self.batches: deque[dict[str, RoutingStats]] = deque(maxlen=window)

    def update(self, stats: dict[str, RoutingStats]) -> CollapseReport:
        self.batches.append(stats)
        return collapse_monitor(list(self.batches), self.threshold)


def collapse_monitor(history: Sequence[dict[str, RoutingStats]], threshold: float) -> CollapseReport:
    """Flag layers whose max top-1 hit share over ``history`` exceeds ``threshold``."""
    totals: dict[str, RoutingStats] = {}
    for batch in history:
        totals = merge_stats(totals, batch)
    report = CollapseReport(threshold=threshold)
    for layer, stats in sorted(totals.items()):
        if stats.tokens_seen == 0:
            continue
        share = float(stats.top1_hits.max() / stats.tokens_seen)
        report.shares[layer] = share
        if share > threshold:
            report.flagged.append(layer)
    if report.flagged:
        logger.warning("Expert collapse suspected in %s (threshold %.2f)", report.flagged, threshold)
    return report


def format_routing_table(stats: dict[str, RoutingStats]) -> str:
    """Aligned text table of f_e, mean router probability and top-1 share per layer."""
    lines = [f"{'layer':<12} {'expert':>6} {'f_e':>8} {'pi_mean':>8} {'top1':>8} {'l_moe':>8}"]
    for layer, s in sorted(stats.items()):
        for e in range(s.n_experts):
            l_moe = f"{s.l_moe:8.4f}" if e == 0 else " " * 8
            lines.append(
                f"{layer:<12} {e:>6d} {s.f[e]:8.4f} {s.pi_mean[e]:8.4f} {s.top1_share[e]:8.4f} {l_moe}"
            )
    return "\n".join(lines)


def gradcheck_case() -> tuple[Callable[[], Tensor], dict[str, Tensor]]:
    """Top-2 routed output plus load balance on a toy batch."""
    rng = np.random.default_rng(11)
    dense = FeedForward(4, 6, rng)
    layer = upcycle(dense, n_experts=3, seed=5, k=2, router_std=0.5)
    for i, expert in enumerate(layer.experts):
        expert.w_in.weight.data = expert.w_in.weight.data + 0.1 * (i + 1) * rng.normal(size=(4, 6))
    h = Tensor(rng.normal(size=(2, 3, 4)))
    probe = Tensor(rng.normal(size=(2, 3, 4)))
    valid = np.array([[True, True, True], [True, True, False]])

    def loss() -> Tensor:
        records: list[RoutingRecord] = []
        out = layer(h, token_mask=valid, routing=records)
        return (out * probe).sum() + load_balance_loss(records).value * 0.5

    params = dict(layer.named_parameters())
    return loss, params
