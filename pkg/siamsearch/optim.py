"""
Optimizers and learning-rate schedules.

SGD updates follow v <- momentum*v + (grad + wd*param); param <- param - lr*v.
Adam folds L2 decay into the gradient the same way. Updates replace
param.data with a new array, so detached views taken earlier stay intact.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .errors import RangeError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class SgdState:
    """Momentum buffers for one parameter group."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise RangeError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise RangeError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise RangeError(f"weight decay must be >= 0, got {self.weight_decay}")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: SgdState) -> None:
    """One SGD step; parameters without a gradient are left alone."""
    if len(params) != len(grads):
        raise ShapeError("one gradient per parameter required", (len(params),), (len(grads),))
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient of {p.name or 'parameter'} has the wrong shape", g.shape, p.shape)
        d = g + state.weight_decay * p.data if state.weight_decay else g
        v = state.buffers.get(id(p))
        v = d if v is None else state.momentum * v + d
        state.buffers[id(p)] = v
        p.data = (p.data - state.lr * v).astype(p.dtype)


@dataclass
class AdamState:
    lr: float
    betas: tuple[float, float] = (0.5, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    first: dict[int, np.ndarray] = field(default_factory=dict)
    second: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    if len(params) != len(grads):
        raise ShapeError("one gradient per parameter required", (len(params),), (len(grads),))
    state.step += 1
    b1, b2 = state.betas
    correction1 = 1 - b1 ** state.step
    correction2 = 1 - b2 ** state.step
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient of {p.name or 'parameter'} has the wrong shape", g.shape, p.shape)
        d = g + state.weight_decay * p.data if state.weight_decay else g
        m = b1 * state.first.get(id(p), 0.0) + (1 - b1) * d
        v = b2 * state.second.get(id(p), 0.0) + (1 - b2) * d * d
        state.first[id(p)], state.second[id(p)] = m, v
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


class Optimizer:
    """Binds a parameter group to an update rule."""

    def __init__(self, params: Sequence[Tensor]):
        self.params = list(params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        raise NotImplementedError

    def set_lr(self, lr: float) -> None:
        self.state.lr = lr

    def buffers(self) -> dict[str, list[np.ndarray | None]]:
        """Per-parameter state arrays in parameter order, for checkpoints."""
        raise NotImplementedError

    def load_buffers(self, buffers: dict[str, list[np.ndarray | None]]) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params)
        self.state = SgdState(lr=lr, momentum=momentum, weight_decay=weight_decay)

    def step(self) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.state)

    def buffers(self) -> dict[str, list[np.ndarray | None]]:
        return {"momentum": [self.state.buffers.get(id(p)) for p in self.params]}

    def load_buffers(self, buffers: dict[str, list[np.ndarray | None]]) -> None:
        self.state.buffers = {
            id(p): b for p, b in zip(self.params, buffers["momentum"]) if b is not None
        }


class Adam(Optimizer):
    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        betas: tuple[float, float] = (0.5, 0.999),
        weight_decay: float = 0.0,
    ):
        super().__init__(params)
        self.state = AdamState(lr=lr, betas=betas, weight_decay=weight_decay)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def buffers(self) -> dict[str, list[np.ndarray | None]]:
        return {
            "first": [self.state.first.get(id(p)) for p in self.params],
            "second": [self.state.second.get(id(p)) for p in self.params],
        }

    def load_buffers(self, buffers: dict[str, list[np.ndarray | None]]) -> None:
        self.state.first = {id(p): b for p, b in zip(self.params, buffers["first"]) if b is not None}
        self.state.second = {id(p): b for p, b in zip(self.params, buffers["second"]) if b is not None}


def cosine_lr(epoch: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max at epoch 0 to lr_min at epoch == total."""
    if total < 1:
        raise RangeError(f"total epochs must be >= 1, got {total}")
    if not 0 <= epoch <= total:
        raise RangeError(f"epoch {epoch} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total))
