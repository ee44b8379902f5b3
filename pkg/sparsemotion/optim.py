"""AdamW with decoupled weight decay over named parameters."""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from sparsemotion.tensorcore import Parameter

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.05
    max_grad_norm: float | None = 1.0


def global_grad_norm(params: Mapping[str, Parameter]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


class AdamW:
    """Adam moments with weight decay applied directly to the weights.

    Only parameters with ``ndim >= 2`` are decayed; biases and norm gains
    are left alone.
    """

    def __init__(self, params: Mapping[str, Parameter], config: AdamWConfig | None = None):
        self.params = dict(params)
        self.config = config or AdamWConfig()
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> float:
        """Apply one update; returns the pre-clipping global gradient norm."""
        cfg = self.config
        norm = global_grad_norm(self.params)
        scale = 1.0
        if cfg.max_grad_norm is not None and norm > cfg.max_grad_norm:
            scale = cfg.max_grad_norm / (norm + 1e-12)
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if cfg.weight_decay and p.ndim >= 2:
                p.data = p.data - cfg.lr * cfg.weight_decay * p.data
            p.data = (p.data - cfg.lr * update).astype(p.dtype)
        return norm

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"m/{name}": arr for name, arr in self.m.items()}
        state.update({f"v/{name}": arr for name, arr in self.v.items()})
        state["t"] = np.asarray([self.t], dtype=np.int64)
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for name in self.params:
            self.m[name] = np.array(state[f"m/{name}"], dtype=self.params[name].dtype)
            self.v[name] = np.array(state[f"v/{name}"], dtype=self.params[name].dtype)
        self.t = int(np.asarray(state["t"]).reshape(-1)[0])
        logger.debug("Restored optimizer state at t=%d", self.t)
