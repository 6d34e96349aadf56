"""
Per-epoch metric rows and search logs, persisted as CSV plus JSON snapshots.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import RangeError
from .supernet import Genotype, genotype_to_json

logger = logging.getLogger(__name__)

METRICS_HEADER = ("phase", "epoch", "loss", "lr", "top1", "top5", "skip_fraction")
SEARCH_HEADER = ("epoch", "phase", "loss", "skip_fraction")

# rows are ordered by (phase rank, epoch)
PHASE_ORDER = {"search": 0, "pretrain": 1, "probe": 2}


def _cell(value: float | None) -> str:
    return "" if value is None else repr(float(value))


@dataclass(frozen=True)
class MetricsRow:
    phase: str
    epoch: int
    loss: float
    lr: float | None = None
    top1: float | None = None
    top5: float | None = None
    skip_fraction: float | None = None

    @property
    def key(self) -> tuple[int, int]:
        return PHASE_ORDER[self.phase], self.epoch

    def as_csv(self) -> list[str]:
        return [self.phase, str(self.epoch)] + [
            _cell(v) for v in (self.loss, self.lr, self.top1, self.top5, self.skip_fraction)
        ]


@dataclass
class MetricsLog:
    rows: list[MetricsRow] = field(default_factory=list)

    def add(self, row: MetricsRow) -> None:
        if row.phase not in PHASE_ORDER:
            raise RangeError(f"unknown phase {row.phase!r}")
        if self.rows and row.key <= self.rows[-1].key:
            raise RangeError(f"metrics row {row.phase}/{row.epoch} does not follow {self.rows[-1].phase}/{self.rows[-1].epoch}")
        self.rows.append(row)

    def extend(self, rows: list[MetricsRow]) -> None:
        for row in rows:
            self.add(row)

    def phase(self, name: str) -> list[MetricsRow]:
        return [r for r in self.rows if r.phase == name]

    def write(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            writer.writerows(row.as_csv() for row in self.rows)
        logger.info("Wrote %d metric rows to %s", len(self.rows), path)
        return path


def _optional_float(text: str) -> float | None:
    return float(text) if text.strip() else None


def read_metrics(path: Path | str) -> MetricsLog:
    """Strict reader; the report store has its own lenient one."""
    log = MetricsLog()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader, ()))
        if header != METRICS_HEADER:
            raise RangeError(f"{path}: unexpected metrics header {header}")
        for record in reader:
            phase, epoch, loss, lr, top1, top5, skip = record
            log.add(MetricsRow(phase, int(epoch), float(loss), *map(_optional_float, (lr, top1, top5, skip))))
    return log


@dataclass
class SearchEpochRecord:
    """One completed search epoch."""

    epoch: int
    val_loss: float
    train_loss: float
    alphas: dict[str, list[list[float]]]
    genotype: Genotype
    skip_fraction: float
    collapsed: bool = False
    partition_ok: bool | None = None
    # weight lr the epoch ran with
    lr: float | None = None

    def snapshot(self) -> dict[str, Any]:
        return {
            "epoch": self.epoch,
            "val_loss": self.val_loss,
            "train_loss": self.train_loss,
            "alphas": self.alphas,
            "genotype": genotype_to_json(self.genotype),
            "skip_fraction": self.skip_fraction,
            "collapsed": self.collapsed,
            "lr": self.lr,
        }


@dataclass
class SearchLog:
    records: list[SearchEpochRecord] = field(default_factory=list)

    def add(self, record: SearchEpochRecord) -> None:
        expected = len(self.records)
        if record.epoch != expected:
            raise RangeError(f"search record for epoch {record.epoch}, expected {expected}")
        for role, layers in record.alphas.items():
            for i, weights in enumerate(layers):
                if not math.isclose(sum(weights), 1.0, abs_tol=1e-6):
                    raise RangeError(f"{role} layer {i} weights sum to {sum(weights)}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.records]

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    def metrics_rows(self) -> list[MetricsRow]:
        return [MetricsRow("search", r.epoch, r.train_loss, r.lr, skip_fraction=r.skip_fraction) for r in self.records]

    def save(self, out_dir: Path | str) -> Path:
        """search_log.csv with one arch and one weights row per epoch, plus alphas/epoch_NNN.json."""
        out_dir = Path(out_dir)
        alpha_dir = out_dir / "alphas"
        alpha_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "search_log.csv"
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(SEARCH_HEADER)
            for r in self.records:
                writer.writerow([r.epoch, "arch", _cell(r.val_loss), _cell(r.skip_fraction)])
                writer.writerow([r.epoch, "weights", _cell(r.train_loss), _cell(r.skip_fraction)])
        for r in self.records:
            path = alpha_dir / f"epoch_{r.epoch:03d}.json"
            path.write_text(json.dumps(r.snapshot(), indent=2) + "\n")
        logger.info("Wrote search log (%d epochs) to %s", len(self.records), out_dir)
        return csv_path
