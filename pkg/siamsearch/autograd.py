"""
Minimal reverse-mode automatic differentiation over dense numpy arrays.

Each differentiable primitive is a Function subclass with a forward on raw
arrays and a backward returning one gradient per input. Tensors produced by a
primitive keep a reference to it (graph_ref); backward() records the reachable
operations into a Tape in topological order and walks it once in reverse.

Gradients accumulate on leaf tensors across backward calls until zero_grad().
"""

from __future__ import annotations

import logging
import threading
from collections.abc import Iterable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DegenerateBatchError,
    NonFiniteError,
    RankError,
    ShapeError,
    ZeroNormError,
)

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ELU_ALPHA = 1.0

_state = threading.local()


class Mode(StrEnum):
    TRAIN = "train"
    EVAL = "eval"


class ActivationKind(StrEnum):
    RELU = "relu"
    HARDSWISH = "hardswish"
    SILU = "silu"
    ELU = "elu"


class PoolKind(StrEnum):
    MAX = "max"
    AVG = "avg"


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def default_dtype(dtype: Any) -> Iterator[None]:
    """Create new tensors with `dtype` inside the block (float64 for gradient checks)."""
    previous = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Operations inside the block record no graph."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """A dense array, its gradient buffer and the operation that produced it."""

    __array_priority__ = 1000

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: Any = None,
    ):
        self.data: np.ndarray = np.asarray(data, dtype=dtype or get_default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.graph_ref: Function | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, fn: Function | None, requires_grad: bool) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = requires_grad
        out.graph_ref = fn
        out.name = None
        return out

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

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor._from_op(self.data, None, False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> list[Tensor]:
        return backward(self)

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            grad = _unbroadcast(grad, self.data.shape)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    def __add__(self, other: Any) -> Tensor:
        return Add.apply(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other: Any) -> Tensor:
        return Sub.apply(self, _lift(other, self))

    def __rsub__(self, other: Any) -> Tensor:
        return Sub.apply(_lift(other, self), self)

    def __mul__(self, other: Any) -> Tensor:
        return Mul.apply(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> Tensor:
        return Mul.apply(self, _lift(1.0 / other, self))

    def __neg__(self) -> Tensor:
        return Mul.apply(self, _lift(-1.0, self))

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def sum(self, axis: int | tuple[int, ...] | None = None) -> Tensor:
        return Sum.apply(self, axis=axis)

    def mean(self, axis: int | tuple[int, ...] | None = None) -> Tensor:
        return Mean.apply(self, axis=axis)

    def reshape(self, *shape: int) -> Tensor:
        return Reshape.apply(self, shape=shape)


def parameter(data: Any, name: str | None = None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def _lift(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """A differentiable primitive: forward on arrays, backward on the output gradient."""

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor._from_op(out, fn if requires_grad else None, requires_grad)


@dataclass
class Tape:
    """Operations reachable from a root tensor, inputs before consumers."""

    nodes: list[Function] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> Tape:
        order: list[Function] = []
        visited: set[int] = set()
        stack: list[tuple[Function, bool]] = []
        if root.graph_ref is not None:
            stack.append((root.graph_ref, False))
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for tensor in node.inputs:
                ref = tensor.graph_ref
                if ref is not None and id(ref) not in visited:
                    stack.append((ref, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, root: Tensor, seed: np.ndarray) -> list[Tensor]:
        """Propagate `seed` from root back to the leaves; returns the leaves touched."""
        touched: dict[int, Tensor] = {}
        if root.graph_ref is None:
            if root.requires_grad:
                root._accumulate(seed)
                touched[id(root)] = root
            return list(touched.values())

        pending: dict[int, np.ndarray] = {id(root.graph_ref): seed}
        for node in reversed(self.nodes):
            grad_out = pending.pop(id(node), None)
            if grad_out is None:
                continue
            grads = node.backward(grad_out)
            for tensor, grad in zip(node.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                ref = tensor.graph_ref
                if ref is None:
                    tensor._accumulate(grad)
                    touched[id(tensor)] = tensor
                elif id(ref) in pending:
                    pending[id(ref)] = pending[id(ref)] + grad
                else:
                    pending[id(ref)] = grad
        return list(touched.values())


def backward(loss: Tensor) -> list[Tensor]:
    """Populate .grad of every leaf reachable from a scalar loss."""
    if loss.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("backward on a tensor that requires no grad")
        return []
    tape = Tape.record(loss)
    return tape.run(loss, np.ones_like(loss.data))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def stopgrad(x: Tensor) -> Tensor:
    """Same values, detached from the graph."""
    return x.detach()


# elementwise and reductions


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return (
            _unbroadcast(grad * b.data, a.shape),
            _unbroadcast(grad * a.data, b.shape),
        )


class Sum(Function):
    def forward(self, x, axis=None):
        self.axis = axis
        return np.asarray(x.sum(axis=axis))

    def backward(self, grad):
        (x,) = self.inputs
        if self.axis is not None:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, x.shape).copy(),)


class Mean(Function):
    def forward(self, x, axis=None):
        self.axis = axis
        out = np.asarray(x.mean(axis=axis))
        self.count = x.size // max(out.size, 1)
        return out.astype(x.dtype)

    def backward(self, grad):
        (x,) = self.inputs
        if self.axis is not None:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, x.shape).astype(x.dtype),)


class Reshape(Function):
    def forward(self, x, shape):
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


class MatMul(Function):
    def forward(self, a, b):
        return a @ b

    def backward(self, grad):
        a, b = self.inputs
        return grad @ b.data.T, a.data.T @ grad


class Transpose(Function):
    def forward(self, x):
        return x.T

    def backward(self, grad):
        return (grad.T,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul operands do not conform", a.shape, b.shape)
    return MatMul.apply(a, b)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("transpose expects a matrix", x.shape)
    return Transpose.apply(x)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


# layers


class Linear(Function):
    def forward(self, x, w, b):
        return x @ w + b

    def backward(self, grad):
        x, w, _ = self.inputs
        return grad @ w.data.T, x.data.T @ grad, grad.sum(axis=0)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = xW + b for x of shape (B, d_in), W (d_in, d_out), b (d_out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("linear input does not match weight", x.shape, w.shape)
    if b.shape != (w.shape[1],):
        raise ShapeError("linear bias does not match weight", b.shape, w.shape)
    return Linear.apply(x, w, b)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, features: int, dtype: Any = None) -> BatchNormState:
        dtype = dtype or get_default_dtype()
        return cls(np.zeros(features, dtype=dtype), np.ones(features, dtype=dtype))


def _bn_axes(x: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if x.ndim == 2:
        return (0,), (1, -1)
    return (0, 2, 3), (1, -1, 1, 1)


class BatchNormTrain(Function):
    def forward(self, x, gamma, beta, state: BatchNormState):
        axes, pshape = _bn_axes(x)
        n = x.size // x.shape[1]
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x - mean) * inv_std
        self.axes, self.pshape, self.n = axes, pshape, n
        self.xhat, self.inv_std = xhat, inv_std

        m = state.momentum
        unbiased = var.reshape(-1) * (n / (n - 1))
        state.running_mean = ((1 - m) * state.running_mean + m * mean.reshape(-1)).astype(x.dtype)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(x.dtype)
        return (xhat * gamma.reshape(pshape) + beta.reshape(pshape)).astype(x.dtype)

    def backward(self, grad):
        _, gamma, _ = self.inputs
        axes, xhat, n = self.axes, self.xhat, self.n
        dgamma = (grad * xhat).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        dxhat = grad * gamma.data.reshape(self.pshape)
        dx = (self.inv_std / n) * (
            n * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return dx, dgamma, dbeta


class BatchNormEval(Function):
    def forward(self, x, gamma, beta, state: BatchNormState):
        _, pshape = _bn_axes(x)
        self.pshape = pshape
        self.inv_std = (1.0 / np.sqrt(state.running_var + state.eps)).reshape(pshape)
        self.xhat = (x - state.running_mean.reshape(pshape)) * self.inv_std
        return (self.xhat * gamma.reshape(pshape) + beta.reshape(pshape)).astype(x.dtype)

    def backward(self, grad):
        _, gamma, _ = self.inputs
        axes, _ = _bn_axes(grad)
        dx = grad * gamma.data.reshape(self.pshape) * self.inv_std
        return dx, (grad * self.xhat).sum(axis=axes), grad.sum(axis=axes)


def _batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: Mode) -> Tensor:
    features = x.shape[1]
    if gamma.shape != (features,) or beta.shape != (features,):
        raise ShapeError("batch-norm affine parameters do not match features", gamma.shape, x.shape)
    if Mode(mode) is Mode.TRAIN:
        if x.size // features < 2:
            raise DegenerateBatchError(
                f"batch statistics need at least 2 values per feature, got shape {x.shape}"
            )
        return BatchNormTrain.apply(x, gamma, beta, state=state)
    return BatchNormEval.apply(x, gamma, beta, state=state)


def batchnorm1d(
    x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: Mode = Mode.TRAIN
) -> Tensor:
    """Batch norm over (B, d); train mode also updates `state` in place."""
    if x.ndim != 2:
        raise ShapeError("batchnorm1d expects (B, d)", x.shape)
    return _batchnorm(x, gamma, beta, state, mode)


def batchnorm2d(
    x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: Mode = Mode.TRAIN
) -> Tensor:
    """Per-channel batch norm over (B, C, H, W)."""
    if x.ndim != 4:
        raise ShapeError("batchnorm2d expects (B, C, H, W)", x.shape)
    return _batchnorm(x, gamma, beta, state, mode)


# activations; subgradient 0 at every kink


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Hardswish(Function):
    def forward(self, x):
        self.x = x
        return x * np.clip(x + 3.0, 0.0, 6.0) / 6.0

    def backward(self, grad):
        x = self.x
        local = np.where(x > 3.0, 1.0, np.where(x > -3.0, (2.0 * x + 3.0) / 6.0, 0.0))
        local = np.where(x == 3.0, 0.0, local)
        return ((grad * local).astype(x.dtype),)


class SiLU(Function):
    def forward(self, x):
        self.x = x
        self.sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return x * self.sig

    def backward(self, grad):
        s = self.sig
        return (grad * (s + self.x * s * (1.0 - s)),)


class ELU(Function):
    def forward(self, x):
        self.x = x
        self.neg = np.expm1(np.minimum(x, 0.0)) * ELU_ALPHA
        return np.where(x > 0, x, self.neg).astype(x.dtype)

    def backward(self, grad):
        local = np.where(self.x > 0, 1.0, self.neg + ELU_ALPHA)
        return ((grad * local).astype(grad.dtype),)


_ACTIVATIONS: dict[ActivationKind, type[Function]] = {
    ActivationKind.RELU: ReLU,
    ActivationKind.HARDSWISH: Hardswish,
    ActivationKind.SILU: SiLU,
    ActivationKind.ELU: ELU,
}


def activation(x: Tensor, kind: ActivationKind | str) -> Tensor:
    return _ACTIVATIONS[ActivationKind(kind)].apply(x)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


# pooling


class Pool1d(Function):
    def forward(self, x, kind, window, stride, padding):
        fill = -np.inf if kind is PoolKind.MAX else 0.0
        padded = np.pad(x, ((0, 0), (padding, padding)), constant_values=fill)
        windows = sliding_window_view(padded, window, axis=1)[:, ::stride]
        self.kind, self.window, self.stride, self.padding = kind, window, stride, padding
        self.padded_len = padded.shape[1]
        if kind is PoolKind.MAX:
            self.argmax = windows.argmax(axis=2)
            return np.take_along_axis(windows, self.argmax[..., None], axis=2)[..., 0]
        return (windows.sum(axis=2) / window).astype(x.dtype)

    def backward(self, grad):
        (x,) = self.inputs
        batch, out_len = grad.shape
        starts = np.arange(out_len) * self.stride
        grad_padded = np.zeros((batch, self.padded_len), dtype=grad.dtype)
        if self.kind is PoolKind.MAX:
            cols = starts[None, :] + self.argmax
            rows = np.broadcast_to(np.arange(batch)[:, None], cols.shape)
            np.add.at(grad_padded, (rows, cols), grad)
        else:
            for k in range(self.window):
                grad_padded[:, starts + k] += grad / self.window
        end = self.padded_len - self.padding
        return (grad_padded[:, self.padding:end],)


def pool1d(
    x: Tensor,
    kind: PoolKind | str,
    window: int = 3,
    stride: int = 1,
    padding: int = 1,
) -> Tensor:
    """
    Pool each row of (B, d) as a one-channel sequence.

    Zero padding; avg divides by the full window including pad positions,
    max treats pad positions as -inf.
    """
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError("pool1d expects (B, d) with d >= 1", x.shape)
    return Pool1d.apply(x, kind=PoolKind(kind), window=window, stride=stride, padding=padding)


# normalisation helpers and losses


class Softmax(Function):
    def forward(self, v):
        if np.isnan(v).any():
            raise NonFiniteError("softmax input contains NaN")
        shifted = v - v.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=-1, keepdims=True)),)


def softmax(v: Tensor) -> Tensor:
    """Max-shifted softmax along the last axis."""
    if v.size < 1:
        raise ShapeError("softmax of an empty vector", v.shape)
    return Softmax.apply(v)


def _row_norms(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=1))
    if (norms == 0).any():
        rows = np.flatnonzero(norms == 0).tolist()
        raise ZeroNormError(f"{what} has zero-norm rows {rows[:8]}")
    return norms


class NegativeCosine(Function):
    def forward(self, p, z):
        pn, zn = _row_norms(p, "p"), _row_norms(z, "z")
        self.phat = p / pn[:, None]
        self.zhat = z / zn[:, None]
        self.pn, self.zn = pn, zn
        self.cos = (self.phat * self.zhat).sum(axis=1)
        return np.asarray(-self.cos.mean(), dtype=p.dtype)

    def backward(self, grad):
        batch = self.cos.shape[0]
        scale = -grad / batch
        cos = self.cos[:, None]
        dp = scale * (self.zhat - cos * self.phat) / self.pn[:, None]
        dz = scale * (self.phat - cos * self.zhat) / self.zn[:, None]
        return dp, dz


def negative_cosine(p: Tensor, z: Tensor) -> Tensor:
    """Mean over the batch of -(p/|p|)·(z/|z|)."""
    if p.shape != z.shape or p.ndim != 2:
        raise ShapeError("negative_cosine operands differ", p.shape, z.shape)
    return NegativeCosine.apply(p, z)


class RowNormalize(Function):
    def forward(self, x):
        self.norms = _row_norms(x, "input")[:, None]
        self.out = x / self.norms
        return self.out

    def backward(self, grad):
        y = self.out
        return ((grad - y * (grad * y).sum(axis=1, keepdims=True)) / self.norms,)


def row_normalize(x: Tensor) -> Tensor:
    return RowNormalize.apply(x)


class CrossEntropy(Function):
    def forward(self, logits, labels):
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_z
        self.labels = labels
        self.probs = np.exp(log_probs)
        picked = log_probs[np.arange(len(labels)), labels]
        return np.asarray(-picked.mean(), dtype=logits.dtype)

    def backward(self, grad):
        n = len(self.labels)
        d = self.probs.copy()
        d[np.arange(n), self.labels] -= 1.0
        return (d * (grad / n),)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy logits and labels differ", logits.shape, labels.shape)
    return CrossEntropy.apply(logits, labels=labels)


class WeightedSum(Function):
    def forward(self, weights, *arrays):
        out = np.zeros_like(arrays[0])
        for w, a in zip(weights, arrays):
            out = out + w * a
        return out

    def backward(self, grad):
        weights = self.inputs[0].data
        arrays = self.inputs[1:]
        dw = np.array([(grad * a.data).sum() for a in arrays], dtype=weights.dtype)
        return (dw, *(w * grad for w in weights))


def weighted_sum(weights: Tensor, tensors: Sequence[Tensor]) -> Tensor:
    """Σ_k weights[k] · tensors[k]."""
    if weights.shape != (len(tensors),):
        raise ShapeError("one weight per tensor required", weights.shape, (len(tensors),))
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ShapeError("weighted_sum operands differ", first, t.shape)
    return WeightedSum.apply(weights, *tensors)


# convolution


class Conv2d(Function):
    def forward(self, x, w, stride, padding):
        batch, channels, _, _ = x.shape
        out_ch, _, k, _ = w.shape
        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        out_h, out_w = windows.shape[2], windows.shape[3]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, channels * k * k)
        self.cols = cols
        self.geometry = (batch, channels, out_h, out_w, k, stride, padding, padded.shape)
        out = cols @ w.reshape(out_ch, -1).T
        return out.reshape(batch, out_h, out_w, out_ch).transpose(0, 3, 1, 2)

    def backward(self, grad):
        _, w = self.inputs
        batch, channels, out_h, out_w, k, stride, padding, padded_shape = self.geometry
        out_ch = w.shape[0]
        g = grad.transpose(0, 2, 3, 1).reshape(-1, out_ch)
        dw = (g.T @ self.cols).reshape(w.shape)
        dcols = (g @ w.data.reshape(out_ch, -1)).reshape(batch, out_h, out_w, channels, k, k)
        dpad = np.zeros(padded_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dpad[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        h_end = padded_shape[2] - padding
        w_end = padded_shape[3] - padding
        return dpad[:, :, padding:h_end, padding:w_end], dw


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Bias-free 2-D convolution of (B, C, H, W) with square kernels (O, C, k, k)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError("conv2d input does not match kernel", x.shape, w.shape)
    return Conv2d.apply(x, w, stride=stride, padding=padding)


class GlobalAvgPool(Function):
    def forward(self, x):
        return x.mean(axis=(2, 3)).astype(x.dtype)

    def backward(self, grad):
        (x,) = self.inputs
        h, w = x.shape[2], x.shape[3]
        return (np.broadcast_to(grad[:, :, None, None] / (h * w), x.shape).astype(grad.dtype),)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects (B, C, H, W)", x.shape)
    return GlobalAvgPool.apply(x)
