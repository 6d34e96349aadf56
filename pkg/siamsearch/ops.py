"""
Candidate operation blocks for the searchable MLP heads.

Search space S holds seven blocks; S' drops the two pooling blocks. Batch norm
follows every linear and pooling operation except in the predictor's final
layer, where linear blocks also drop their activation.
"""

import logging
from dataclasses import dataclass
from enum import StrEnum

import numpy as np

from .autograd import (
    ActivationKind,
    BatchNormState,
    Mode,
    PoolKind,
    Tensor,
    activation,
    batchnorm1d,
    linear,
    parameter,
    pool1d,
)
from .errors import GenotypeError, ShapeError

logger = logging.getLogger(__name__)


class OperationKind(StrEnum):
    LIN_BN_RELU = "lin_bn_relu"
    LIN_BN_HARDSWISH = "lin_bn_hardswish"
    LIN_BN_SILU = "lin_bn_silu"
    LIN_BN_ELU = "lin_bn_elu"
    MAX_POOL_3_BN = "max_pool_3_bn"
    AVG_POOL_3_BN = "avg_pool_3_bn"
    IDENTITY = "identity"

    @property
    def position(self) -> int:
        """Canonical index 0..6."""
        return _CANONICAL.index(self)

    @property
    def is_linear(self) -> bool:
        return self in _ACTIVATION_OF

    @property
    def is_pooling(self) -> bool:
        return self in _POOL_OF

    @property
    def preserves_width(self) -> bool:
        """Pooling and identity cannot change the feature width."""
        return not self.is_linear

    @property
    def is_parametric(self) -> bool:
        """Owns trainable tensors somewhere (linear weights or BN affine)."""
        return self is not OperationKind.IDENTITY

    @classmethod
    def from_name(cls, name: str) -> "OperationKind":
        try:
            return cls(name)
        except ValueError:
            raise GenotypeError(f"unknown operation {name!r}; expected one of {[str(k) for k in cls]}") from None


class SearchSpace(StrEnum):
    S = "S"
    S_PRIME = "S_prime"


_CANONICAL: tuple[OperationKind, ...] = tuple(OperationKind)

_ACTIVATION_OF = {
    OperationKind.LIN_BN_RELU: ActivationKind.RELU,
    OperationKind.LIN_BN_HARDSWISH: ActivationKind.HARDSWISH,
    OperationKind.LIN_BN_SILU: ActivationKind.SILU,
    OperationKind.LIN_BN_ELU: ActivationKind.ELU,
}

_POOL_OF = {
    OperationKind.MAX_POOL_3_BN: PoolKind.MAX,
    OperationKind.AVG_POOL_3_BN: PoolKind.AVG,
}

_CATALOGS: dict[SearchSpace, tuple[OperationKind, ...]] = {
    SearchSpace.S: _CANONICAL,
    SearchSpace.S_PRIME: tuple(k for k in _CANONICAL if not k.is_pooling),
}


def catalog(space: SearchSpace | str = SearchSpace.S) -> tuple[OperationKind, ...]:
    """Candidate kinds of a search space in canonical order."""
    return _CATALOGS[SearchSpace(space)]


def _as_rng(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _fan_in_uniform(rng: np.random.Generator, dim_in: int, dim_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(dim_in)
    return rng.uniform(-bound, bound, size=(dim_in, dim_out))


@dataclass
class LinearAdapter:
    """Plain linear map closing a width change behind a width-preserving block."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, dim_in: int, dim_out: int, rng: np.random.Generator | int | None = None) -> "LinearAdapter":
        rng = _as_rng(rng)
        return cls(
            weight=parameter(_fan_in_uniform(rng, dim_in, dim_out), name="adapter.weight"),
            bias=parameter(np.zeros(dim_out), name="adapter.bias"),
        )

    @property
    def dim_in(self) -> int:
        return self.weight.shape[0]

    @property
    def dim_out(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


@dataclass
class LayerBlock:
    """One concrete candidate operation at one layer position."""

    kind: OperationKind
    dim_in: int
    dim_out: int
    bn_enabled: bool
    weight: Tensor | None = None
    bias: Tensor | None = None
    gamma: Tensor | None = None
    beta: Tensor | None = None
    bn_state: BatchNormState | None = None
    activation_enabled: bool = True

    def parameters(self) -> list[Tensor]:
        return [t for t in (self.weight, self.bias, self.gamma, self.beta) if t is not None]

    def forward(self, x: Tensor, mode: Mode = Mode.TRAIN) -> Tensor:
        return block_forward(self, x, mode)


def instantiate_block(
    kind: OperationKind | str,
    dim_in: int,
    dim_out: int,
    is_predictor_final: bool = False,
    rng: np.random.Generator | int | None = None,
) -> LayerBlock:
    """Build a freshly initialised block; linear weights use the fan-in uniform rule."""
    kind = OperationKind(kind)
    if kind.preserves_width and dim_in != dim_out:
        raise ShapeError(f"{kind} cannot change width", (dim_in,), (dim_out,))
    bn_enabled = not is_predictor_final
    block = LayerBlock(kind=kind, dim_in=dim_in, dim_out=dim_out, bn_enabled=bn_enabled)
    if kind is OperationKind.IDENTITY:
        return block

    rng = _as_rng(rng)
    if kind.is_linear:
        block.weight = parameter(_fan_in_uniform(rng, dim_in, dim_out), name=f"{kind}.weight")
        block.bias = parameter(np.zeros(dim_out), name=f"{kind}.bias")
        block.activation_enabled = not is_predictor_final
    if bn_enabled:
        block.gamma = parameter(np.ones(dim_out), name=f"{kind}.gamma")
        block.beta = parameter(np.zeros(dim_out), name=f"{kind}.beta")
        block.bn_state = BatchNormState.create(dim_out)
    return block


def block_forward(block: LayerBlock, x: Tensor, mode: Mode = Mode.TRAIN) -> Tensor:
    """linear -> BN -> activation, pool -> BN, or identity, honouring bn_enabled."""
    if x.ndim != 2 or x.shape[1] != block.dim_in:
        raise ShapeError(f"{block.kind} expects width {block.dim_in}", x.shape, (x.shape[0], block.dim_in))
    kind = block.kind
    if kind is OperationKind.IDENTITY:
        return x
    if kind.is_linear:
        y = linear(x, block.weight, block.bias)
    else:
        y = pool1d(x, _POOL_OF[kind])
    if block.bn_enabled:
        y = batchnorm1d(y, block.gamma, block.beta, block.bn_state, mode)
    if kind.is_linear and block.activation_enabled:
        y = activation(y, _ACTIVATION_OF[kind])
    return y
