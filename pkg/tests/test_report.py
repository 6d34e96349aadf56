import csv
import re

import pytest

from siamsearch.errors import RangeError
from siamsearch.metrics import MetricsLog, MetricsRow, SearchEpochRecord, SearchLog
from siamsearch.report import plot_alphas, plot_loss_series, write_report
from siamsearch.storage import ReportStore, run_name_for
from siamsearch.supernet import reference_genotype


def _write_run(path, search_epochs=3, pretrain_epochs=2, top1=60.0):
    log = MetricsLog()
    for e in range(search_epochs):
        log.add(MetricsRow("search", e, -0.1 * e, skip_fraction=e / 10))
    for e in range(pretrain_epochs):
        log.add(MetricsRow("pretrain", e, -0.2 * e, lr=0.06))
    log.add(MetricsRow("probe", 0, 0.7, lr=0.3, top1=top1))
    return log.write(path)


@pytest.fixture
def two_runs(tmp_path):
    return [
        _write_run(tmp_path / "alpha" / "metrics.csv"),
        _write_run(tmp_path / "beta" / "metrics.csv", search_epochs=2, top1=70.0),
    ]


def test_run_names_come_from_the_directory(tmp_path):
    assert run_name_for(tmp_path / "alpha" / "metrics.csv") == "alpha"
    assert run_name_for(tmp_path / "summary_b.csv") == "summary_b"


def test_store_merges_runs(two_runs):
    with ReportStore() as store:
        for path in two_runs:
            store.add_metrics_file(path)
        assert store.runs() == ["alpha", "beta"]
        assert store.phases() == ["search", "pretrain", "probe"]
        assert store.curve("beta", "search") == [(0, 0.0), (1, -0.1)]
        assert store.skip_curve("alpha") == [(0, 0.0), (1, 0.1), (2, 0.2)]

        summary = store.summary()
        assert [row["run"] for row in summary] == ["alpha", "beta"]
        assert summary[0]["search_epochs"] == 3
        assert summary[0]["final_search_loss"] == pytest.approx(-0.2)
        assert summary[1]["top1"] == pytest.approx(70.0)
        assert summary[0]["final_pretrain_loss"] == pytest.approx(-0.2)


def test_malformed_and_duplicate_rows_are_skipped(tmp_path, caplog):
    path = tmp_path / "broken" / "metrics.csv"
    _write_run(path)
    with open(path, "a") as f:
        f.write("pretrain,x,0.5,,,,\n")
        f.write("pretrain,0,0.5,,,,\n")
        f.write("warmup,0,0.5,,,,\n")
        f.write("pretrain,9,nan,,,,\n")
        f.write("too,few\n")

    with ReportStore() as store:
        store.add_metrics_file(path)
        summary = store.summary()
    assert summary[0]["skipped_rows"] == 5
    assert summary[0]["pretrain_epochs"] == 2
    assert caplog.text.count("skipping") == 5


def test_same_run_name_twice_is_disambiguated(two_runs):
    with ReportStore() as store:
        assert store.add_metrics_file(two_runs[0]) == "alpha"
        assert store.add_metrics_file(two_runs[0]) == "alpha#2"
        assert len(store.summary()) == 2


def test_write_report(two_runs, tmp_path):
    paths = write_report(two_runs, tmp_path / "report")
    with open(paths.summary, newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["run"] for r in rows] == ["alpha", "beta"]

    svg = paths.loss_curves.read_text()
    assert svg.startswith("<?xml")
    legend = set(re.findall(r">(alpha|beta)<", svg))
    assert legend == {"alpha", "beta"}
    assert paths.skip_fraction is not None and paths.skip_fraction.exists()


def test_report_without_search_rows_has_no_skip_plot(tmp_path):
    path = _write_run(tmp_path / "plain" / "metrics.csv", search_epochs=0)
    paths = write_report([path], tmp_path / "out")
    assert paths.skip_fraction is None
    assert paths.loss_curves.exists()


def test_report_needs_input(tmp_path):
    with pytest.raises(RangeError):
        write_report([], tmp_path)


def test_plot_helpers(tmp_path):
    assert plot_loss_series([-0.1, -0.4, -0.6], tmp_path / "loss.svg").exists()

    log = SearchLog()
    log.add(
        SearchEpochRecord(
            epoch=0,
            val_loss=-0.3,
            train_loss=-0.2,
            alphas={"encoder": [[1 / 7] * 7] * 2, "predictor": [[1 / 7] * 7]},
            genotype=reference_genotype(),
            skip_fraction=0.0,
        )
    )
    svg = plot_alphas(log, tmp_path / "alphas.svg", "S").read_text()
    assert "identity" in svg
    with pytest.raises(RangeError):
        plot_alphas(SearchLog(), tmp_path / "empty.svg")
