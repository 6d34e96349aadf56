"""
First-order bi-level architecture search.

Each epoch makes one full pass over the validation split stepping only the
architecture weights, then one full pass over the training split stepping only
the model weights. With ``interleave`` the two passes are zipped batch by batch
instead.
"""

import dataclasses
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Mode, Tensor, backward, zero_grad
from .backbone import TinyBackbone
from .config import ExperimentConfig
from .data import (
    AugmentPolicy,
    ImageDataset,
    augment_batch,
    augment_rng,
    batch_indices,
    load_dataset,
    split_train_val,
)
from .errors import CorruptedSearchError
from .metrics import SearchEpochRecord, SearchLog
from .optim import SGD, Adam, Optimizer
from .siamese import (
    COLLAPSE_WINDOW,
    FrameworkKind,
    SiameseOutputs,
    collapse_score,
    framework_loss,
    siamese_forward,
)
from .supernet import (
    Genotype,
    SiameseSupernet,
    alpha_snapshot,
    build_supernet,
    skip_fraction,
)

logger = logging.getLogger(__name__)

LossFn = Callable[[SiameseOutputs], Tensor]

# augmentation streams of one search epoch
ARCH_STREAM = 0
WEIGHT_STREAM = 1


@dataclass(frozen=True)
class EpochPlan:
    """Everything besides the networks that one search epoch depends on."""

    epoch: int
    batch_size: int
    seed: int
    policy: AugmentPolicy
    interleave: bool = False
    audit: bool = False


def _snapshot(params: Sequence[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _unchanged(params: Sequence[Tensor], before: Sequence[np.ndarray]) -> bool:
    return all(np.array_equal(p.data, b) for p, b in zip(params, before))


def audited_step(opt: Optimizer, untouched: Sequence[Tensor]) -> bool:
    """Step opt and report whether every tensor in untouched kept its exact value."""
    before = _snapshot(untouched)
    opt.step()
    return _unchanged(untouched, before)


def _diagnostic(supernet: SiameseSupernet, epoch: int, phase: str, batch: int, losses: list[float]) -> dict:
    return {
        "epoch": epoch,
        "phase": phase,
        "batch": batch,
        "losses": losses,
        "alphas": {str(c.role): [layer.alpha.data.tolist() for layer in c.layers] for c in supernet.cells()},
    }


class _Pass:
    """Batch stream of one split for one epoch, with the optimizer it steps."""

    def __init__(
        self,
        name: str,
        dataset: ImageDataset,
        opt: Optimizer,
        untouched: list[Tensor],
        plan: EpochPlan,
        stream: int,
    ):
        self.name = name
        self.dataset = dataset
        self.opt = opt
        self.untouched = untouched
        self.plan = plan
        self.batches = batch_indices(len(dataset), plan.batch_size, plan.seed, plan.epoch)
        self.rng = augment_rng(plan.seed, plan.epoch, stream)
        self.losses: list[float] = []
        self.partition_ok = True

    def step(self, supernet: SiameseSupernet, loss_fn: LossFn, idx: np.ndarray) -> None:
        x1, x2 = augment_batch(self.dataset.images[idx], self.plan.policy, self.rng)
        zero_grad(supernet.parameters() + supernet.alphas())
        out = siamese_forward(
            supernet.backbone, supernet.encoder, supernet.predictor, Tensor(x1), Tensor(x2), Mode.TRAIN
        )
        loss = loss_fn(out)
        value = loss.item()
        if not np.isfinite(value):
            raise CorruptedSearchError(
                f"non-finite {self.name} loss at epoch {self.plan.epoch}",
                _diagnostic(supernet, self.plan.epoch, self.name, len(self.losses), self.losses + [value]),
            )
        backward(loss)
        if self.plan.audit:
            self.partition_ok &= audited_step(self.opt, self.untouched)
        else:
            self.opt.step()
        self.losses.append(value)
        logger.debug("epoch %d %s batch %d loss %.5f", self.plan.epoch, self.name, len(self.losses), value)

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses)) if self.losses else float("nan")


def search_epoch(
    supernet: SiameseSupernet,
    d_v: ImageDataset,
    d_t: ImageDataset,
    model_opt: Optimizer,
    arch_opt: Optimizer,
    loss_fn: LossFn,
    plan: EpochPlan,
) -> SearchEpochRecord:
    """
    One epoch of alternating search.

    Args:
        supernet: network holding weights w and alphas
        d_v: validation split, drives the architecture steps
        d_t: training split, drives the weight steps
        model_opt: optimizer over w only
        arch_opt: optimizer over the alphas only
        loss_fn: contrastive objective on the siamese outputs
        plan: epoch index, batch size, seed, augmentation policy

    Returns:
        Record with the mean loss of each pass and the current argmax genotype
    """
    weights, alphas = supernet.weights(), supernet.alphas()
    arch = _Pass("arch", d_v, arch_opt, weights, plan, ARCH_STREAM)
    model = _Pass("weights", d_t, model_opt, alphas, plan, WEIGHT_STREAM)

    if plan.interleave:
        for v_idx, t_idx in zip(arch.batches, model.batches):
            arch.step(supernet, loss_fn, v_idx)
            model.step(supernet, loss_fn, t_idx)
    else:
        for idx in arch.batches:
            arch.step(supernet, loss_fn, idx)
        for idx in model.batches:
            model.step(supernet, loss_fn, idx)

    for a in alphas:
        if not np.isfinite(a.data).all():
            raise CorruptedSearchError(
                f"non-finite alpha after epoch {plan.epoch}",
                _diagnostic(supernet, plan.epoch, "arch", len(arch.losses), arch.losses),
            )

    genotype = supernet.genotype(plan.seed, plan.epoch + 1)
    return SearchEpochRecord(
        epoch=plan.epoch,
        val_loss=arch.mean_loss,
        train_loss=model.mean_loss,
        alphas={str(c.role): alpha_snapshot(c) for c in supernet.cells()},
        genotype=genotype,
        skip_fraction=skip_fraction(genotype),
        partition_ok=(arch.partition_ok and model.partition_ok) if plan.audit else None,
        lr=model_opt.state.lr,
    )


def grad_channels_disjoint_check(supernet: SiameseSupernet, model_opt: Optimizer, arch_opt: Optimizer) -> bool:
    """
    Step both optimizers on the gradients already held by the supernet and
    confirm the partition: the groups are disjoint, together cover every
    trainable tensor, the arch step leaves w bitwise unchanged and the model
    step leaves the alphas bitwise unchanged.

    Both steps are really taken.
    """
    weights, alphas = supernet.weights(), supernet.alphas()
    model_ids = {id(p) for p in model_opt.params}
    arch_ids = {id(p) for p in arch_opt.params}
    everything = {id(p) for p in weights + alphas}
    if model_ids & arch_ids or model_ids | arch_ids != everything:
        logger.debug("optimizer groups overlap or miss trainable tensors")
        return False
    arch_clean = audited_step(arch_opt, weights)
    model_clean = audited_step(model_opt, alphas)
    logger.debug("partition audit: arch step clean=%s, model step clean=%s", arch_clean, model_clean)
    return arch_clean and model_clean


@dataclass
class SearchSetup:
    supernet: SiameseSupernet
    model_opt: SGD
    arch_opt: Adam
    d_t: ImageDataset
    d_v: ImageDataset
    loss_fn: LossFn


def setup_search(config: ExperimentConfig, dataset: ImageDataset | None = None) -> SearchSetup:
    seed = config.run.seed
    dataset = dataset if dataset is not None else load_dataset(config.data)
    d_t, d_v = split_train_val(dataset, config.data.split, seed)

    framework = FrameworkKind(config.model.framework)
    rng = np.random.default_rng(seed)
    backbone = TinyBackbone.create(tuple(config.model.backbone_widths), rng)
    supernet = build_supernet(
        backbone,
        config.model.encoder_depth,
        config.model.predictor_depth if framework.uses_predictor else None,
        config.model.hidden_dim,
        config.model.out_dim,
        config.model.space,
        rng,
    )
    s = config.search
    model_opt = SGD(supernet.weights(), lr=s.lr, momentum=s.momentum, weight_decay=s.weight_decay)
    arch_opt = Adam(supernet.alphas(), lr=s.arch_lr, weight_decay=s.arch_weight_decay)
    temperature = config.model.temperature
    return SearchSetup(
        supernet, model_opt, arch_opt, d_t, d_v, lambda out: framework_loss(framework, out, temperature)
    )


def search_policy(config: ExperimentConfig) -> AugmentPolicy:
    """The augment.* policy, switched off entirely when search.augment is false."""
    policy = AugmentPolicy.from_config(config.augment)
    if not config.search.augment:
        policy = dataclasses.replace(policy, enabled=False)
    return policy


def run_search(
    config: ExperimentConfig,
    dataset: ImageDataset | None = None,
    out_dir: Path | str | None = None,
    audit: bool = False,
) -> tuple[Genotype, SearchLog]:
    """Run config.search.epochs epochs and return the final argmax genotype."""
    setup = setup_search(config, dataset)
    seed = config.run.seed
    policy = search_policy(config)
    log = SearchLog()
    logger.info(
        "Search: space=%s framework=%s epochs=%d |D_t|=%d |D_v|=%d",
        config.model.space, config.model.framework, config.search.epochs, len(setup.d_t), len(setup.d_v),
    )
    for epoch in range(config.search.epochs):
        plan = EpochPlan(epoch, config.search.batch_size, seed, policy, config.search.interleave, audit)
        record = search_epoch(
            setup.supernet, setup.d_v, setup.d_t, setup.model_opt, setup.arch_opt, setup.loss_fn, plan
        )
        history = log.val_losses + [record.val_loss]
        if len(history) >= COLLAPSE_WINDOW:
            report = collapse_score(history, COLLAPSE_WINDOW)
            record.collapsed = report.collapsed
            if report.collapsed:
                logger.warning("Search loss collapsed (tail mean %.4f) at epoch %d", report.mean_tail, epoch)
        log.add(record)
        logger.info(
            "epoch %d: arch loss %.4f, weight loss %.4f, skip %.2f, genotype %s",
            epoch, record.val_loss, record.train_loss, record.skip_fraction,
            ",".join(str(k) for k in record.genotype.all_ops()),
        )

    genotype = setup.supernet.genotype(seed, config.search.epochs)
    if out_dir is not None:
        log.save(out_dir)
    return genotype, log
