"""
Siamese forward pass and contrastive objectives.

SimSiam-style: L = 1/2 (D(p1, stopgrad(z2)) + D(p2, stopgrad(z1))) with D the
negative cosine similarity. SimCLR-style: NT-Xent over both views, no predictor.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum

import numpy as np

from .autograd import (
    Mode,
    Tensor,
    concat,
    cross_entropy,
    negative_cosine,
    row_normalize,
    stopgrad,
    transpose,
)
from .errors import ConfigError, InsufficientNegativesError, RangeError, ShapeError

logger = logging.getLogger(__name__)

COLLAPSE_THRESHOLD = -0.99
COLLAPSE_WINDOW = 10
DEFAULT_TEMPERATURE = 0.5


class FrameworkKind(StrEnum):
    SIMSIAM = "simsiam"
    SIMCLR = "simclr"

    @property
    def uses_predictor(self) -> bool:
        return self is FrameworkKind.SIMSIAM


@dataclass
class SiameseOutputs:
    z1: Tensor
    z2: Tensor
    p1: Tensor | None = None
    p2: Tensor | None = None

    @property
    def has_predictor(self) -> bool:
        return self.p1 is not None


def siamese_forward(backbone, encoder_head, predictor, x1: Tensor, x2: Tensor, mode: Mode = Mode.TRAIN) -> SiameseOutputs:
    """Both views through the same backbone and encoder head; predictor on both branches."""
    if x1.shape != x2.shape:
        raise ShapeError("augmented views differ in shape", x1.shape, x2.shape)
    z1 = encoder_head.forward(backbone.forward(x1, mode), mode)
    z2 = encoder_head.forward(backbone.forward(x2, mode), mode)
    if predictor is None:
        return SiameseOutputs(z1, z2)
    return SiameseOutputs(z1, z2, predictor.forward(z1, mode), predictor.forward(z2, mode))


def simsiam_loss(out: SiameseOutputs) -> Tensor:
    """Symmetric stop-gradient negative cosine, in [-1, 1]."""
    if not out.has_predictor:
        raise ConfigError("simsiam loss needs predictor outputs")
    return (negative_cosine(out.p1, stopgrad(out.z2)) + negative_cosine(out.p2, stopgrad(out.z1))) * 0.5


def ntxent_loss(z1: Tensor, z2: Tensor, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """
    Normalised temperature-scaled cross entropy.

    Each of the 2B anchors treats its paired view as the positive and the other
    2B - 2 embeddings as negatives; the loss is averaged over all anchors.
    """
    if temperature <= 0:
        raise RangeError(f"temperature must be > 0, got {temperature}")
    if z1.shape != z2.shape:
        raise ShapeError("views differ in shape", z1.shape, z2.shape)
    batch = z1.shape[0]
    if batch < 2:
        raise InsufficientNegativesError(f"NT-Xent needs a batch of at least 2, got {batch}")
    z = row_normalize(concat([z1, z2], axis=0))
    logits = (z @ transpose(z)) * (1.0 / temperature)
    mask = np.zeros((2 * batch, 2 * batch), dtype=z.dtype)
    np.fill_diagonal(mask, -np.inf)
    targets = np.concatenate([np.arange(batch, 2 * batch), np.arange(batch)])
    return cross_entropy(logits + mask, targets)


def framework_loss(kind: FrameworkKind | str, out: SiameseOutputs, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    if FrameworkKind(kind) is FrameworkKind.SIMSIAM:
        return simsiam_loss(out)
    return ntxent_loss(out.z1, out.z2, temperature)


@dataclass(frozen=True)
class CollapseReport:
    collapsed: bool
    mean_tail: float


def collapse_score(loss_history: Sequence[float], window: int = COLLAPSE_WINDOW) -> CollapseReport:
    """Collapsed when the mean of the last `window` losses is strictly below -0.99."""
    if len(loss_history) == 0:
        raise RangeError("collapse score of an empty loss history")
    if window < 1 or len(loss_history) < window:
        raise RangeError(f"history of {len(loss_history)} epochs is shorter than window {window}")
    tail = float(np.mean(np.asarray(loss_history[-window:], dtype=np.float64)))
    return CollapseReport(collapsed=tail < COLLAPSE_THRESHOLD, mean_tail=tail)
