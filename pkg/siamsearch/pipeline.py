"""
End-to-end workflows behind the CLI commands.

Every command writes its resolved configuration to <out>/config.toml next to
its artifacts, so a run directory is self-describing.
"""

import csv
import dataclasses
import logging
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .backbone import TinyBackbone
from .config import ExperimentConfig, write_config
from .data import load_dataset
from .errors import ConfigError
from .metrics import MetricsLog, SearchLog, read_metrics
from .report import ReportPaths, plot_alphas, plot_loss_series, write_report
from .search import run_search
from .siamese import FrameworkKind, collapse_score
from .supernet import Genotype, composition, load_genotype, reference_genotype, save_genotype, skip_fraction
from .training import CHECKPOINT_NAME, ProbeResult, PretrainResult, linear_probe, load_pretrained, pretrain
from .utils import format_percent, timed

logger = logging.getLogger(__name__)

METRICS_NAME = "metrics.csv"
GENOTYPE_NAME = "genotype.json"
ABLATION_HEADER = (
    "arm", "seed", "space", "augment", "skip_fraction", "search_collapsed", "pretrain_collapsed", "top1", "top5",
)


def _prepare(config: ExperimentConfig) -> Path:
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_config(config, out / "config.toml")
    return out


def _update_metrics(out: Path, phase: str, rows: list) -> Path:
    """Replace one phase's rows in <out>/metrics.csv, keeping the others."""
    path = out / METRICS_NAME
    kept = [r for r in read_metrics(path).rows if r.phase != phase] if path.exists() else []
    log = MetricsLog()
    log.extend(sorted(kept + rows, key=lambda r: r.key))
    return log.write(path)


@dataclass
class SearchOutcome:
    genotype: Genotype
    log: SearchLog
    genotype_path: Path


def cmd_search(config: ExperimentConfig) -> SearchOutcome:
    """Search, then write genotype.json, search_log.csv, alphas/ snapshots, metrics.csv and alphas.svg."""
    out = _prepare(config)
    dataset = load_dataset(config.data)
    with timed(logger, "Search"):
        genotype, log = run_search(config, dataset, out_dir=out)
    path = save_genotype(genotype, out / GENOTYPE_NAME)
    _update_metrics(out, "search", log.metrics_rows())
    plot_alphas(log, out / "alphas.svg", config.model.space)
    logger.info("Genotype written to %s: %s", path, composition(genotype))
    return SearchOutcome(genotype, log, path)


def resolve_genotype(config: ExperimentConfig, genotype: Path | str) -> Genotype:
    """A genotype file, or "reference" for the hand-designed heads in the configured space."""
    if str(genotype) == "reference":
        return dataclasses.replace(reference_genotype(), space=config.model.space, seed=config.run.seed)
    return load_genotype(genotype)


def cmd_pretrain(
    config: ExperimentConfig, genotype: Path | str, resume: Path | str | None = None
) -> PretrainResult:
    out = _prepare(config)
    g = resolve_genotype(config, genotype)
    dataset = load_dataset(config.data)
    with timed(logger, "Pretraining"):
        result = pretrain(config, g, dataset, out_dir=out, resume=resume)
    _update_metrics(out, "pretrain", result.metrics_rows())
    plot_loss_series(result.losses, out / "pretrain_loss.svg")
    logger.info("Checkpoint at %s", out / CHECKPOINT_NAME)
    return result


def cmd_linear_probe(config: ExperimentConfig, checkpoint: Path | str | None = None) -> ProbeResult:
    """Probe a checkpoint's frozen backbone, or a random frozen backbone when none is given."""
    out = _prepare(config)
    if checkpoint is None:
        logger.info("No checkpoint given, probing a randomly initialised backbone")
        backbone = TinyBackbone.create(tuple(config.model.backbone_widths), config.run.seed)
    else:
        backbone = load_pretrained(config, checkpoint).backbone
    train_set = load_dataset(config.data, train=True)
    test_set = load_dataset(config.data, train=False)
    result = linear_probe(config, backbone, train_set, test_set)
    _update_metrics(out, "probe", result.metrics_rows())
    return result


def cmd_report(metrics_paths: Sequence[Path | str], out_dir: Path | str) -> ReportPaths:
    return write_report(metrics_paths, out_dir)


# ablation


@dataclass(frozen=True)
class ArmSpec:
    name: str
    space: str
    augment: bool


def parse_arm(name: str) -> ArmSpec:
    """Arm names look like S+aug or S_prime+noaug."""
    space, sep, aug = name.partition("+")
    if not sep or space not in ("S", "S_prime") or aug not in ("aug", "noaug"):
        raise ConfigError(f"ablation arm must look like S+aug or S_prime+noaug, got {name!r}")
    return ArmSpec(name, space, aug == "aug")


@dataclass
class ArmResult:
    arm: str
    seed: int
    space: str
    augment: bool
    skip_fraction: float
    search_collapsed: bool
    pretrain_collapsed: bool | None
    top1: float
    top5: float | None

    def as_csv(self) -> list[str]:
        return [
            self.arm, str(self.seed), self.space, str(self.augment).lower(), repr(self.skip_fraction),
            str(self.search_collapsed).lower(),
            "" if self.pretrain_collapsed is None else str(self.pretrain_collapsed).lower(),
            repr(self.top1), "" if self.top5 is None else repr(self.top5),
        ]


def arm_config(config: ExperimentConfig, arm: ArmSpec, seed: int) -> ExperimentConfig:
    out = config.out_dir / arm.name.replace("+", "_") / f"seed_{seed}"
    return dataclasses.replace(
        config,
        model=dataclasses.replace(config.model, space=arm.space),
        search=dataclasses.replace(config.search, augment=arm.augment),
        run=dataclasses.replace(config.run, seed=seed, out=str(out), name=f"{arm.name}/seed{seed}"),
    )


def run_arm(config: ExperimentConfig, arm: ArmSpec) -> ArmResult:
    """Search, pretrain the found genotype, then probe it; one arm and seed."""
    searched = cmd_search(config)
    losses = searched.log.val_losses
    search_collapsed = False
    if FrameworkKind(config.model.framework) is FrameworkKind.SIMSIAM:
        search_collapsed = collapse_score(losses, min(len(losses), config.pretrain.collapse_window)).collapsed
    pretrained = cmd_pretrain(config, searched.genotype_path)
    probed = cmd_linear_probe(config, config.out_dir / CHECKPOINT_NAME)
    return ArmResult(
        arm=arm.name,
        seed=config.run.seed,
        space=arm.space,
        augment=arm.augment,
        skip_fraction=skip_fraction(searched.genotype),
        search_collapsed=search_collapsed,
        pretrain_collapsed=pretrained.collapsed,
        top1=probed.top1,
        top5=probed.top5,
    )


def _run_arm_job(job: tuple[ExperimentConfig, ArmSpec]) -> ArmResult:
    return run_arm(*job)


def _log_trends(results: list[ArmResult]) -> None:
    by_key = {(r.arm, r.seed): r for r in results}
    seeds = sorted({r.seed for r in results})

    def compare(a: str, b: str, metric: str) -> tuple[int, int]:
        pairs = [(by_key[(a, s)], by_key[(b, s)]) for s in seeds if (a, s) in by_key and (b, s) in by_key]
        return sum(getattr(x, metric) >= getattr(y, metric) for x, y in pairs), len(pairs)

    wins, total = compare("S+aug", "S_prime+aug", "top1")
    if total:
        logger.info("S top-1 >= S_prime top-1 in %d of %d seeds", wins, total)
    wins, total = compare("S+noaug", "S+aug", "skip_fraction")
    if total:
        logger.info("no-augmentation skip fraction >= augmented in %d of %d seeds", wins, total)
    for arm in sorted({r.arm for r in results}):
        flagged = sum(r.search_collapsed for r in results if r.arm == arm)
        logger.info("%s: search collapse flagged in %d runs", arm, flagged)


def cmd_ablate(config: ExperimentConfig) -> tuple[Path, list[ArmResult]]:
    """Every arm over every ablation seed, each in its own directory; ablation.csv collects the results."""
    out = _prepare(config)
    arms = [parse_arm(a) for a in config.ablation.arms]
    jobs = [(arm_config(config, arm, seed), arm) for seed in config.ablation.seeds for arm in arms]
    logger.info("Ablation: %d arms x %d seeds, %d workers", len(arms), len(config.ablation.seeds), config.ablation.workers)

    with timed(logger, "Ablation"):
        if config.ablation.workers > 1:
            with ProcessPoolExecutor(max_workers=config.ablation.workers) as pool:
                results = list(pool.map(_run_arm_job, jobs))
        else:
            results = [_run_arm_job(job) for job in jobs]

    path = out / "ablation.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ABLATION_HEADER)
        writer.writerows(r.as_csv() for r in results)
    for r in results:
        logger.info(
            "%-12s seed %d: top1 %s, skip %.2f, collapsed %s",
            r.arm, r.seed, format_percent(r.top1), r.skip_fraction, r.search_collapsed,
        )
    _log_trends(results)
    return path, results
