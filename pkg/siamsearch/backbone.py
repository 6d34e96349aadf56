"""
Small convolutional feature extractor standing in for a ResNet backbone.

Three stride-2 3x3 convolution stages, each followed by batch norm and ReLU,
then global average pooling to a (B, d_feat) feature matrix.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    BatchNormState,
    Mode,
    Tensor,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    parameter,
    relu,
)
from .errors import ShapeError

logger = logging.getLogger(__name__)

IN_CHANNELS = 3


@dataclass
class ConvStage:
    weight: Tensor
    gamma: Tensor
    beta: Tensor
    bn_state: BatchNormState

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.gamma, self.beta]


@dataclass
class TinyBackbone:
    stages: list[ConvStage] = field(default_factory=list)

    @classmethod
    def create(cls, widths: tuple[int, ...] = (32, 64, 128), seed: int | np.random.Generator = 0) -> "TinyBackbone":
        """He-uniform kernels, unit BN scale."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        stages = []
        channels = IN_CHANNELS
        for i, width in enumerate(widths):
            fan_in = channels * 9
            bound = np.sqrt(6.0 / fan_in)
            stages.append(
                ConvStage(
                    weight=parameter(rng.uniform(-bound, bound, size=(width, channels, 3, 3)), name=f"conv{i}.weight"),
                    gamma=parameter(np.ones(width), name=f"conv{i}.gamma"),
                    beta=parameter(np.zeros(width), name=f"conv{i}.beta"),
                    bn_state=BatchNormState.create(width),
                )
            )
            channels = width
        return cls(stages)

    @property
    def feature_dim(self) -> int:
        return self.stages[-1].weight.shape[0]

    def parameters(self) -> list[Tensor]:
        return [p for stage in self.stages for p in stage.parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def bn_states(self) -> list[BatchNormState]:
        return [stage.bn_state for stage in self.stages]

    def forward(self, x: Tensor, mode: Mode = Mode.TRAIN) -> Tensor:
        return backbone_forward(self, x, mode)


def backbone_forward(bb: TinyBackbone, x: Tensor, mode: Mode = Mode.TRAIN) -> Tensor:
    """(B, 3, H, W) images to (B, d_feat) features; train mode updates BN statistics."""
    if x.ndim != 4 or x.shape[1] != IN_CHANNELS:
        raise ShapeError("backbone expects (B, 3, H, W)", x.shape)
    if x.shape[2] != x.shape[3]:
        raise ShapeError("backbone expects square images", x.shape[2:], x.shape[2:][::-1])
    h = x
    for stage in bb.stages:
        h = conv2d(h, stage.weight, stride=2, padding=1)
        h = batchnorm2d(h, stage.gamma, stage.beta, stage.bn_state, mode)
        h = relu(h)
    return global_avg_pool(h)
