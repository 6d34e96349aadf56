"""
Pretraining of a fixed genotype and linear-probe evaluation.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Mode, Tensor, backward, cross_entropy, linear, no_grad, parameter
from .backbone import TinyBackbone
from .checkpoint import Checkpoint, capture_state, load_checkpoint, restore_state, save_checkpoint
from .config import ExperimentConfig, ProbeConfig
from .data import (
    AugmentPolicy,
    ImageDataset,
    augment_batch,
    augment_rng,
    batch_indices,
    normalize_batch,
)
from .errors import CheckpointError, DatasetFormatError, GenotypeError, NonFiniteError, RangeError
from .metrics import MetricsRow
from .optim import SGD, cosine_lr
from .siamese import FrameworkKind, collapse_score, framework_loss, siamese_forward
from .supernet import (
    CellDims,
    Genotype,
    SiameseNetwork,
    genotype_from_json,
    genotype_to_json,
    materialize,
)

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ckpt"
PRETRAIN_STREAM = 2
PROBE_STREAM = 3
FEATURE_BATCH = 256


def build_network(config: ExperimentConfig, genotype: Genotype, seed: int | None = None) -> SiameseNetwork:
    """Fresh backbone plus heads materialized from the genotype."""
    model = config.model
    framework = FrameworkKind(model.framework)
    if str(genotype.space) != model.space:
        raise GenotypeError(f"genotype searched in space {genotype.space}, config uses {model.space}")
    if framework.uses_predictor and genotype.predictor is None:
        raise GenotypeError(f"{framework} pretraining needs a genotype with a predictor")
    if not framework.uses_predictor and genotype.predictor is not None:
        logger.warning("Ignoring the genotype predictor under %s", framework)
        genotype = dataclasses.replace(genotype, predictor=None)

    rng = np.random.default_rng(config.run.seed if seed is None else seed)
    backbone = TinyBackbone.create(tuple(model.backbone_widths), rng)
    encoder_dims = CellDims(backbone.feature_dim, model.hidden_dim, model.out_dim)
    predictor_dims = CellDims(model.out_dim, model.hidden_dim, model.out_dim)
    encoder, predictor = materialize(genotype, encoder_dims, predictor_dims, rng)
    return SiameseNetwork(backbone, encoder, predictor)


@dataclass
class PretrainResult:
    network: SiameseNetwork
    genotype: Genotype
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    collapsed: bool | None = None
    mean_tail: float | None = None

    def metrics_rows(self) -> list[MetricsRow]:
        return [MetricsRow("pretrain", e, loss, lr) for e, (loss, lr) in enumerate(zip(self.losses, self.lrs))]


def _checkpoint_meta(config: ExperimentConfig, genotype: Genotype, epoch: int, losses: list[float], lrs: list[float]) -> dict:
    return {
        "epoch": epoch,
        "genotype": genotype_to_json(genotype),
        "framework": config.model.framework,
        "backbone_widths": list(config.model.backbone_widths),
        "hidden_dim": config.model.hidden_dim,
        "out_dim": config.model.out_dim,
        # batch order and augmentation are drawn from default_rng([seed, epoch, ...])
        "rng": {"seed": config.run.seed, "next_epoch": epoch},
        "losses": losses,
        "lrs": lrs,
    }


def _check_resumable(ckpt: Checkpoint, config: ExperimentConfig, genotype: Genotype) -> None:
    if ckpt.meta.get("genotype") != genotype_to_json(genotype):
        raise CheckpointError("checkpoint was trained with a different genotype")
    if ckpt.meta.get("rng", {}).get("seed") != config.run.seed:
        raise CheckpointError("checkpoint was trained with a different seed")
    if ckpt.epoch > config.pretrain.epochs:
        raise CheckpointError(f"checkpoint epoch {ckpt.epoch} beyond pretrain.epochs {config.pretrain.epochs}")


def pretrain(
    config: ExperimentConfig,
    genotype: Genotype,
    dataset: ImageDataset,
    out_dir: Path | str | None = None,
    resume: Path | str | None = None,
    stop_after: int | None = None,
) -> PretrainResult:
    """
    Train backbone and materialized heads with the framework loss under a cosine schedule.

    Args:
        config: experiment configuration (pretrain section drives the loop)
        genotype: architecture of the heads
        dataset: unlabeled images
        out_dir: where checkpoint.ckpt is written after every epoch
        resume: checkpoint to continue from
        stop_after: stop once this many epochs are complete (the schedule still spans pretrain.epochs)

    Returns:
        Trained network with the per-epoch loss and lr series
    """
    p = config.pretrain
    seed = config.run.seed
    framework = FrameworkKind(config.model.framework)
    network = build_network(config, genotype)
    genotype = genotype if framework.uses_predictor else dataclasses.replace(genotype, predictor=None)
    opt = SGD(network.parameters(), lr=p.lr, momentum=p.momentum, weight_decay=p.weight_decay)
    policy = AugmentPolicy.from_config(config.augment)
    result = PretrainResult(network, genotype)

    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        _check_resumable(ckpt, config, genotype)
        restore_state(ckpt.tensors, network.parameters(), network.bn_states(), opt)
        start = ckpt.epoch
        result.losses, result.lrs = list(ckpt.meta["losses"]), list(ckpt.meta["lrs"])
        logger.info("Resuming pretraining from %s at epoch %d", resume, start)

    end = p.epochs if stop_after is None else min(p.epochs, stop_after)
    for epoch in range(start, end):
        lr = cosine_lr(epoch, p.epochs, p.lr)
        opt.set_lr(lr)
        rng = augment_rng(seed, epoch, PRETRAIN_STREAM)
        batch_losses = []
        for idx in batch_indices(len(dataset), p.batch_size, seed, epoch):
            x1, x2 = augment_batch(dataset.images[idx], policy, rng)
            opt.zero_grad()
            out = siamese_forward(
                network.backbone, network.encoder, network.predictor, Tensor(x1), Tensor(x2), Mode.TRAIN
            )
            loss = framework_loss(framework, out, config.model.temperature)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(f"non-finite pretraining loss at epoch {epoch}")
            backward(loss)
            opt.step()
            batch_losses.append(value)
        result.losses.append(float(np.mean(batch_losses)))
        result.lrs.append(lr)
        logger.info("pretrain epoch %d: loss %.4f lr %.4f", epoch, result.losses[-1], lr)

        if out_dir is not None:
            meta = _checkpoint_meta(config, genotype, epoch + 1, result.losses, result.lrs)
            tensors = capture_state(network.parameters(), network.bn_states(), opt)
            save_checkpoint(Checkpoint(tensors, meta), Path(out_dir) / CHECKPOINT_NAME)

    if framework is FrameworkKind.SIMSIAM and result.losses:
        report = collapse_score(result.losses, min(p.collapse_window, len(result.losses)))
        result.collapsed, result.mean_tail = report.collapsed, report.mean_tail
        if report.collapsed:
            logger.warning("Pretraining collapsed: tail mean loss %.4f", report.mean_tail)
    return result


def load_pretrained(config: ExperimentConfig, path: Path | str) -> SiameseNetwork:
    """Rebuild the network recorded in a checkpoint and load its weights."""
    ckpt = load_checkpoint(path)
    try:
        genotype = genotype_from_json(ckpt.meta["genotype"])
    except KeyError as e:
        raise CheckpointError(f"{path}: checkpoint metadata lacks {e}") from e
    network = build_network(config, genotype)
    restore_state(ckpt.tensors, network.parameters(), network.bn_states())
    return network


# linear probe


@dataclass
class ProbeResult:
    top1: float
    top5: float | None
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    def metrics_rows(self) -> list[MetricsRow]:
        rows = [MetricsRow("probe", e, loss, lr) for e, (loss, lr) in enumerate(zip(self.losses, self.lrs))]
        if rows:
            rows[-1] = dataclasses.replace(rows[-1], top1=self.top1, top5=self.top5)
        return rows


def extract_features(backbone: TinyBackbone, images: np.ndarray, policy: AugmentPolicy) -> np.ndarray:
    """Frozen eval-mode features of normalized, unaugmented images."""
    chunks = []
    with no_grad():
        for start in range(0, len(images), FEATURE_BATCH):
            x = normalize_batch(images[start : start + FEATURE_BATCH], policy)
            chunks.append(backbone.forward(Tensor(x), Mode.EVAL).data)
    return np.concatenate(chunks)


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Percentage of rows whose label is among the k highest logits."""
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float((top == labels[:, None]).any(axis=1).mean() * 100.0)


def train_linear_classifier(
    f_train: np.ndarray,
    y_train: np.ndarray,
    f_test: np.ndarray,
    y_test: np.ndarray,
    num_classes: int,
    cfg: ProbeConfig,
    seed: int = 0,
) -> ProbeResult:
    """Single linear layer with cross-entropy on standardized features."""
    if num_classes < 2:
        raise RangeError(f"linear probe needs at least 2 classes, got {num_classes}")
    mean = f_train.mean(axis=0)
    std = f_train.std(axis=0) + 1e-6
    f_train = ((f_train - mean) / std).astype(np.float32)
    f_test = ((f_test - mean) / std).astype(np.float32)

    rng = np.random.default_rng([seed, PROBE_STREAM])
    dim = f_train.shape[1]
    bound = 1.0 / np.sqrt(dim)
    w = parameter(rng.uniform(-bound, bound, size=(dim, num_classes)), name="probe.weight")
    b = parameter(np.zeros(num_classes), name="probe.bias")
    opt = SGD([w, b], lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    result = ProbeResult(top1=0.0, top5=None)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
        opt.set_lr(lr)
        batch_losses = []
        for idx in batch_indices(len(f_train), cfg.batch_size, seed, epoch, min_batch=1):
            opt.zero_grad()
            loss = cross_entropy(linear(Tensor(f_train[idx]), w, b), y_train[idx])
            backward(loss)
            opt.step()
            batch_losses.append(loss.item())
        result.losses.append(float(np.mean(batch_losses)))
        result.lrs.append(lr)
        logger.debug("probe epoch %d: loss %.4f", epoch, result.losses[-1])

    logits = f_test @ w.data + b.data
    result.top1 = topk_accuracy(logits, y_test, 1)
    result.top5 = topk_accuracy(logits, y_test, 5) if num_classes >= 5 else None
    return result


def linear_probe(
    config: ExperimentConfig,
    backbone: TinyBackbone,
    train_set: ImageDataset,
    test_set: ImageDataset,
) -> ProbeResult:
    """Frozen-backbone probe: BN in eval mode, no gradient reaches the backbone."""
    if train_set.labels is None or test_set.labels is None:
        raise DatasetFormatError("linear probe needs labeled data")
    if train_set.num_classes < 2:
        raise RangeError(f"linear probe needs at least 2 classes, got {train_set.num_classes}")
    policy = AugmentPolicy.from_config(config.augment)
    f_train = extract_features(backbone, train_set.images, policy)
    f_test = extract_features(backbone, test_set.images, policy)
    result = train_linear_classifier(
        f_train, train_set.labels, f_test, test_set.labels, train_set.num_classes, config.probe, config.run.seed
    )
    logger.info(
        "Linear probe: top1 %.2f%%%s", result.top1, "" if result.top5 is None else f", top5 {result.top5:.2f}%"
    )
    return result
