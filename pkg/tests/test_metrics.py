import dataclasses

import numpy as np
import pytest

from siamsearch.errors import RangeError
from siamsearch.metrics import (
    METRICS_HEADER,
    MetricsLog,
    MetricsRow,
    SearchEpochRecord,
    SearchLog,
    read_metrics,
)
from siamsearch.supernet import reference_genotype


def _record(epoch: int, alphas=None) -> SearchEpochRecord:
    return SearchEpochRecord(
        epoch=epoch,
        val_loss=-0.5 - epoch / 10,
        train_loss=-0.4 - epoch / 10,
        alphas=alphas or {"encoder": [[0.25, 0.25, 0.5]]},
        genotype=reference_genotype(),
        skip_fraction=0.0,
    )


def test_metrics_csv_layout(tmp_path):
    log = MetricsLog()
    log.add(MetricsRow("search", 0, -0.5, skip_fraction=0.25))
    log.add(MetricsRow("pretrain", 0, -0.7, lr=0.06))
    log.add(MetricsRow("probe", 0, 0.9, lr=0.3, top1=71.5))
    path = log.write(tmp_path / "metrics.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    assert lines[1] == "search,0,-0.5,,,,0.25"
    assert lines[3] == "probe,0,0.9,0.3,71.5,,"

    back = read_metrics(path)
    assert back.rows == log.rows


def test_rows_must_follow_phase_then_epoch_order():
    log = MetricsLog()
    log.add(MetricsRow("pretrain", 1, 0.0))
    with pytest.raises(RangeError):
        log.add(MetricsRow("pretrain", 1, 0.0))
    with pytest.raises(RangeError):
        log.add(MetricsRow("search", 5, 0.0))
    with pytest.raises(RangeError):
        log.add(MetricsRow("finetune", 9, 0.0))
    log.add(MetricsRow("probe", 0, 0.0))
    assert [r.phase for r in log.rows] == ["pretrain", "probe"]
    assert len(log.phase("probe")) == 1


def test_read_metrics_rejects_a_foreign_header(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("a,b,c\n")
    with pytest.raises(RangeError):
        read_metrics(path)


def test_search_log_checks_epoch_order_and_weights():
    log = SearchLog()
    log.add(_record(0))
    with pytest.raises(RangeError):
        log.add(_record(2))
    with pytest.raises(RangeError):
        log.add(_record(1, alphas={"encoder": [[0.5, 0.6]]}))
    log.add(_record(1))
    assert log.val_losses == pytest.approx([-0.5, -0.6])
    assert [r.phase for r in log.metrics_rows()] == ["search", "search"]


def test_search_log_save(tmp_path):
    log = SearchLog()
    for epoch in range(3):
        log.add(_record(epoch))
    csv_path = log.save(tmp_path)
    lines = csv_path.read_text().splitlines()
    assert lines[1].startswith("0,arch,")
    assert lines[2].startswith("0,weights,")
    assert len(lines) == 7
    assert sorted(p.name for p in (tmp_path / "alphas").iterdir()) == [
        "epoch_000.json",
        "epoch_001.json",
        "epoch_002.json",
    ]


def test_snapshot_is_json_ready():
    snap = _record(0).snapshot()
    assert snap["genotype"]["encoder"] == ["lin_bn_relu"] * 3
    assert np.isclose(sum(snap["alphas"]["encoder"][0]), 1.0)


def test_search_rows_carry_the_weight_lr():
    log = SearchLog()
    log.add(dataclasses.replace(_record(0), lr=0.05))
    log.add(_record(1))
    rows = log.metrics_rows()
    assert [r.lr for r in rows] == [0.05, None]
    assert rows[0].skip_fraction == 0.0
    assert _record(0).snapshot()["lr"] is None
