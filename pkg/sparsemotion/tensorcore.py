"""Dense tensors with reverse-mode automatic differentiation.

Every network in the package (backbone, MoE layers, interpolation network) is
built from the operations below. Operations are ``Function`` subclasses with a
numpy ``forward`` and a local gradient rule in ``backward``; applying one while
any input requires a gradient links the output to a ``TapeEntry``. ``backward``
orders the recorded entries into a ``Tape`` (inputs before outputs) and replays
it in reverse, accumulating ``.grad`` on leaf tensors only, so a graph can be
replayed after ``zero_grad`` with identical results.

Broadcasting is limited to equal shapes, scalars, and a trailing-shape operand
against a tensor with extra leading (batch) dimensions. Anything else raises a
``ShapeError`` naming both shapes.
"""

from __future__ import annotations

import contextlib
import logging
import threading
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from sparsemotion.errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5

_state = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors (per thread)."""
    previous = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference paths)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """An n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_entry", "name")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Any = None,
        name: str | None = None,
    ):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else get_default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._entry: TapeEntry | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return take(self, index)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], tuple | list):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data: Any, dtype: Any = None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def as_tensor(value: Any, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


@dataclass
class TapeEntry:
    """One recorded operation: its gradient rule and input handles."""

    function: Function
    inputs: tuple[Tensor, ...]


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays and ``backward`` returning
    one gradient (or ``None``) per tensor input.
    """

    def __init__(self, **options: Any):
        self.options = options

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **options: Any) -> Tensor:
        fn = cls(**options)
        out = fn.forward(*(t.data for t in inputs))
        needs_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=needs_grad, dtype=out.dtype)
        if needs_grad:
            result._entry = TapeEntry(fn, inputs)
        return result


@dataclass
class Tape:
    """Recorded operations in topological order (every input precedes its use)."""

    nodes: list[Tensor] = field(default_factory=list)

    @property
    def entries(self) -> list[TapeEntry]:
        return [n._entry for n in self.nodes if n._entry is not None]

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._entry is not None:
                for inp in node._entry.inputs:
                    if inp.requires_grad and id(inp) not in visited:
                        stack.append((inp, False))
        return cls(nodes=order)

    def is_topological(self) -> bool:
        position = {id(n): i for i, n in enumerate(self.nodes)}
        for i, node in enumerate(self.nodes):
            if node._entry is None:
                continue
            for inp in node._entry.inputs:
                if inp.requires_grad and position.get(id(inp), i) >= i:
                    return False
        return True

    def run(self, root: Tensor, seed_grad: np.ndarray | None = None) -> None:
        grads: dict[int, np.ndarray] = {
            id(root): np.ones_like(root.data) if seed_grad is None else seed_grad
        }
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            entry = node._entry
            if entry is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            input_grads = entry.function.backward(g)
            for inp, gi in zip(entry.inputs, input_grads, strict=True):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(
                        f"{type(entry.function).__name__}.backward", gi.shape, inp.shape
                    )
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf tensor that requires grad."""
    if loss.size != 1:
        raise ValidationError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("backward on a constant root; nothing to do")
        return
    Tape.from_root(loss).run(loss)


def _check_broadcast(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    short, long = (a, b) if len(a) < len(b) else (b, a)
    if long[len(long) - len(short) :] != short:
        raise ShapeError(op, a, b)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(), dtype=grad.dtype)
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))) if lead > 0 else grad


class Add(Function):
    def forward(self, a, b):
        _check_broadcast("add", a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _check_broadcast("sub", a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast("mul", a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            _unbroadcast(grad * self.b, self.a.shape),
            _unbroadcast(grad * self.a, self.b.shape),
        )


class Div(Function):
    def forward(self, a, b):
        _check_broadcast("div", a.shape, b.shape)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return (
            _unbroadcast(grad / self.b, self.a.shape),
            _unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape),
        )


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul", a.shape, b.shape)
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError("matmul", a.shape, b.shape)
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        a, b = self.a, self.b
        ga = grad @ np.swapaxes(b, -1, -2)
        if b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            gb = np.swapaxes(a, -1, -2) @ grad
        return ga, gb


class Transpose(Function):
    def forward(self, x):
        axes = self.options["axes"]
        self.axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Reshape(Function):
    def forward(self, x):
        self.in_shape = x.shape
        try:
            return x.reshape(self.options["shape"])
        except ValueError as exc:
            raise ShapeError("reshape", x.shape, tuple(self.options["shape"])) from exc

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Softmax(Function):
    """Softmax with max-subtraction; masked-out entries get exactly zero."""

    def forward(self, x):
        axis = self.options.get("axis", -1)
        mask = self.options.get("mask")
        if mask is not None:
            x = np.where(mask, x, -np.inf)
        m = np.max(x, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.exp(x - m)
        s = e.sum(axis=axis, keepdims=True)
        self.y = e / np.where(s > 0, s, 1.0)
        self.axis = axis
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


class LayerNorm(Function):
    def forward(self, x, gamma=None, beta=None):
        eps = self.options.get("eps", LAYER_NORM_EPS)
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv_std
        self.gamma = gamma
        self.has_beta = beta is not None
        out = self.xhat if gamma is None else self.xhat * gamma
        return out if beta is None else out + beta

    def backward(self, grad):
        xhat = self.xhat
        lead = tuple(range(grad.ndim - 1))
        gxhat = grad if self.gamma is None else grad * self.gamma
        gx = self.inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads: list[np.ndarray | None] = [gx]
        if self.gamma is not None:
            grads.append((grad * xhat).sum(axis=lead))
        if self.has_beta:
            grads.append(grad.sum(axis=lead))
        return tuple(grads)


class EmbeddingLookup(Function):
    def forward(self, table):
        ids = self.options["ids"]
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ValidationError(
                f"embedding ids out of range [0, {table.shape[0]}): "
                f"min={ids.min()} max={ids.max()}"
            )
        self.ids = ids
        self.table_shape = table.shape
        return table[ids]

    def backward(self, grad):
        g = np.zeros(self.table_shape, dtype=grad.dtype)
        np.add.at(g, self.ids.reshape(-1), grad.reshape(-1, self.table_shape[-1]))
        return (g,)


class Concat(Function):
    def forward(self, *arrays):
        axis = self.options.get("axis", -1)
        ref = arrays[0].shape
        for arr in arrays[1:]:
            if arr.ndim != len(ref):
                raise ShapeError("concat", ref, arr.shape)
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            raise ShapeError("concat", *(a.shape for a in arrays)) from exc
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return out

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


class Stack(Function):
    def forward(self, *arrays):
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise ShapeError("stack", *(a.shape for a in arrays))
        self.axis = self.options.get("axis", 0)
        return np.stack(arrays, axis=self.axis)

    def backward(self, grad):
        n = grad.shape[self.axis]
        return tuple(np.take(grad, i, axis=self.axis) for i in range(n))


class Take(Function):
    """Basic or advanced indexing; duplicate indices accumulate on backward."""

    def forward(self, x):
        self.index = self.options["index"]
        self.in_shape = x.shape
        self.dtype = x.dtype
        return x[self.index]

    def backward(self, grad):
        g = np.zeros(self.in_shape, dtype=self.dtype)
        np.add.at(g, self.index, grad)
        return (g,)


class ScatterRows(Function):
    """out[index[i]] += values[i] into a zero (n_rows, ...) array."""

    def forward(self, values):
        self.index = self.options["index"]
        out = np.zeros((self.options["n_rows"], *values.shape[1:]), dtype=values.dtype)
        np.add.at(out, self.index, values)
        return out

    def backward(self, grad):
        return (grad[self.index],)


class Sum(Function):
    def forward(self, x):
        self.in_shape = x.shape
        self.axis = self.options.get("axis")
        self.keepdims = self.options.get("keepdims", False)
        return np.asarray(x.sum(axis=self.axis, keepdims=self.keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Mean(Sum):
    def forward(self, x):
        out = super().forward(x)
        self.count = x.size // max(out.size, 1) if x.size else 1
        return out / self.count

    def backward(self, grad):
        return (super().backward(grad)[0] / self.count,)


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


_GELU_C = np.sqrt(2.0 / np.pi)


class GELU(Function):
    """Tanh approximation of the Gaussian error linear unit."""

    def forward(self, x):
        self.x = x
        self.t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * dt),)


class NormalizeLast(Function):
    """x / max(sum(x, -1), floor), used for in-set routing weights."""

    def forward(self, x):
        floor = self.options.get("floor", 1e-9)
        s = x.sum(axis=-1, keepdims=True)
        self.clamped = s <= floor
        self.denom = np.where(self.clamped, floor, s)
        self.y = x / self.denom
        return self.y

    def backward(self, grad):
        through = (grad * self.y).sum(axis=-1, keepdims=True)
        gx = (grad - np.where(self.clamped, 0.0, through)) / self.denom
        return (gx,)


class CrossEntropy(Function):
    """Smoothed token cross-entropy over non-ignored positions."""

    def forward(self, logits):
        targets = self.options["targets"]
        keep = self.options["keep"]
        eps = self.options["smoothing"]
        reduction = self.options["reduction"]
        vocab = logits.shape[-1]
        if targets.shape != logits.shape[:-1] or keep.shape != targets.shape:
            raise ShapeError("cross_entropy", logits.shape, targets.shape)
        if eps > 0 and vocab < 2:
            raise ValidationError("label smoothing needs a vocabulary of at least 2")
        m = logits.max(axis=-1, keepdims=True)
        shifted = logits - m
        logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        logp = shifted - logz
        q = np.full(logits.shape, eps / (vocab - 1) if vocab > 1 else 0.0, dtype=logits.dtype)
        safe_targets = np.where(keep, targets, 0)
        np.put_along_axis(q, safe_targets[..., None], 1.0 - eps, axis=-1)
        per_pos = -(q * logp).sum(axis=-1) * keep
        count = int(keep.sum())
        self.denom = float(count) if reduction == "mean" else 1.0
        self.p = np.exp(logp)
        self.q = q
        self.keep = keep
        return np.asarray(per_pos.sum() / self.denom, dtype=logits.dtype)

    def backward(self, grad):
        g = (self.p - self.q) * self.keep[..., None] * (grad / self.denom)
        return (g.astype(self.p.dtype),)


@dataclass
class LossTerm:
    """A scalar loss plus the number of positions/tokens it averaged over.

    ``count == 0`` flags a defined-empty result whose value is exactly 0.
    """

    value: Tensor
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0

    def item(self) -> float:
        return self.value.item()


def add(a: Any, b: Any) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    return Add.apply(a, as_tensor(b, a))


def sub(a: Any, b: Any) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    return Sub.apply(a, as_tensor(b, a))


def mul(a: Any, b: Any) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    return Mul.apply(a, as_tensor(b, a))


def div(a: Any, b: Any) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    return Div.apply(a, as_tensor(b, a))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return Transpose.apply(x, axes=axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    return Softmax.apply(x, axis=axis, mask=mask)


def layer_norm(
    x: Tensor,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
    eps: float = LAYER_NORM_EPS,
) -> Tensor:
    inputs = [x] + [t for t in (gamma, beta) if t is not None]
    fn_inputs = tuple(inputs)
    if gamma is None and beta is not None:
        raise ValidationError("layer_norm: beta without gamma is not supported")
    return LayerNorm.apply(*fn_inputs, eps=eps)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    return EmbeddingLookup.apply(table, ids=np.asarray(ids, dtype=np.int64))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


def take(x: Tensor, index: Any) -> Tensor:
    return Take.apply(x, index=index)


def scatter_rows(values: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    return ScatterRows.apply(values, index=np.asarray(index, dtype=np.int64), n_rows=n_rows)


def reduce_sum(x: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def reduce_mean(x: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def gelu(x: Tensor) -> Tensor:
    return GELU.apply(x)


def normalize_last(x: Tensor, floor: float = 1e-9) -> Tensor:
    return NormalizeLast.apply(x, floor=floor)


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    label_smoothing: float = 0.0,
    ignore_mask: np.ndarray | None = None,
    reduction: str = "mean",
) -> LossTerm:
    """Token cross-entropy with (1-eps) on the target and eps/(V-1) elsewhere.

    ``ignore_mask`` marks excluded positions (True = ignored). When every
    position is ignored the result is an exact constant 0 with ``count == 0``.
    """
    if reduction not in ("mean", "sum"):
        raise ValidationError(f"unknown reduction '{reduction}'")
    targets = np.asarray(targets, dtype=np.int64)
    keep = np.ones(targets.shape, dtype=bool) if ignore_mask is None else ~np.asarray(ignore_mask, dtype=bool)
    vocab = logits.shape[-1]
    if np.any(keep & ((targets < 0) | (targets >= vocab))):
        raise ValidationError(f"cross_entropy targets outside vocabulary [0, {vocab})")
    count = int(keep.sum())
    if count == 0:
        return LossTerm(Tensor(0.0, dtype=logits.dtype), 0)
    value = CrossEntropy.apply(
        logits, targets=targets, keep=keep, smoothing=label_smoothing, reduction=reduction
    )
    return LossTerm(value, count)
