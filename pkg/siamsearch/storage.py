"""
DuckDB store that merges metrics CSV files for reporting.
"""

import csv
import logging
import math
from pathlib import Path
from typing import Any

import duckdb

from .metrics import METRICS_HEADER, PHASE_ORDER

logger = logging.getLogger(__name__)


def get_connection(db_path: Path | str | None = None) -> duckdb.DuckDBPyConnection:
    """
    Get a DuckDB connection with the report schema in place.

    Args:
        db_path: database file; None keeps everything in memory

    Returns:
        A DuckDB connection
    """
    if db_path is None:
        conn = duckdb.connect(":memory:")
    else:
        db_path = Path(db_path)
        db_path.parent.mkdir(parents=True, exist_ok=True)
        conn = duckdb.connect(str(db_path))
    _ensure_schema(conn)
    return conn


def _ensure_schema(conn: duckdb.DuckDBPyConnection) -> None:
    tables = conn.execute(
        "SELECT table_name FROM information_schema.tables WHERE table_schema = 'main'"
    ).fetchall()
    table_names = {t[0] for t in tables}

    if "runs" not in table_names:
        conn.execute("""
            CREATE TABLE runs (
                run VARCHAR PRIMARY KEY,
                load_order INTEGER NOT NULL,
                source VARCHAR NOT NULL,
                accepted INTEGER NOT NULL,
                skipped INTEGER NOT NULL
            )
        """)

    if "metrics" not in table_names:
        conn.execute("""
            CREATE TABLE metrics (
                run VARCHAR NOT NULL,
                phase VARCHAR NOT NULL,
                epoch INTEGER NOT NULL,
                loss DOUBLE NOT NULL,
                lr DOUBLE,
                top1 DOUBLE,
                top5 DOUBLE,
                skip_fraction DOUBLE,
                PRIMARY KEY (run, phase, epoch)
            )
        """)


def run_name_for(path: Path) -> str:
    """metrics.csv files are named after their run directory, anything else after its stem."""
    return path.parent.name if path.name == "metrics.csv" and path.parent.name else path.stem


def _parse_row(record: list[str]) -> tuple[Any, ...]:
    """Validate one CSV record; raises ValueError with the reason."""
    if len(record) != len(METRICS_HEADER):
        raise ValueError(f"expected {len(METRICS_HEADER)} cells, got {len(record)}")
    phase, epoch, loss, *optional = record
    if phase not in PHASE_ORDER:
        raise ValueError(f"unknown phase {phase!r}")
    epoch_value = int(epoch)
    if epoch_value < 0:
        raise ValueError(f"negative epoch {epoch_value}")
    loss_value = float(loss)
    if not math.isfinite(loss_value):
        raise ValueError(f"non-finite loss {loss!r}")
    extras = [float(cell) if cell.strip() else None for cell in optional]
    return (phase, epoch_value, loss_value, *extras)


class ReportStore:
    """Merged view over any number of metrics files.

    Holds one connection for its lifetime; close() releases it.
    """

    def __init__(self, db_path: Path | str | None = None):
        self.conn = get_connection(db_path)

    def close(self) -> None:
        self.conn.close()

    def __enter__(self) -> "ReportStore":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _query(self, query: str, params: list | None = None):
        return self.conn.execute(query, params or []).fetchall()

    def _unique_name(self, name: str) -> str:
        taken = {r[0] for r in self._query("SELECT run FROM runs")}
        candidate, n = name, 2
        while candidate in taken:
            candidate, n = f"{name}#{n}", n + 1
        return candidate

    def add_metrics_file(self, path: Path | str, run: str | None = None) -> str:
        """
        Load one metrics CSV; malformed rows are logged and skipped.

        Returns:
            The run name the rows were stored under
        """
        path = Path(path)
        run = self._unique_name(run or run_name_for(path))
        rows, skipped, seen = [], 0, set()
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = tuple(next(reader, ()))
            if header != METRICS_HEADER:
                logger.warning("%s: unexpected header %s, reading rows positionally", path, ",".join(header))
            for line, record in enumerate(reader, start=2):
                try:
                    row = _parse_row(record)
                except ValueError as e:
                    logger.warning("%s:%d: skipping malformed row (%s)", path, line, e)
                    skipped += 1
                    continue
                if row[:2] in seen:
                    logger.warning("%s:%d: skipping duplicate %s epoch %d", path, line, row[0], row[1])
                    skipped += 1
                    continue
                seen.add(row[:2])
                rows.append((run, *row))

        if rows:
            self.conn.executemany("INSERT INTO metrics VALUES (?, ?, ?, ?, ?, ?, ?, ?)", rows)
        load_order = len(self.runs())
        self.conn.execute("INSERT INTO runs VALUES (?, ?, ?, ?, ?)", [run, load_order, str(path), len(rows), skipped])
        logger.info("Loaded %d rows for run %s from %s (%d skipped)", len(rows), run, path, skipped)
        return run

    def runs(self) -> list[str]:
        return [r[0] for r in self._query("SELECT run FROM runs ORDER BY load_order")]

    def phases(self) -> list[str]:
        present = {r[0] for r in self._query("SELECT DISTINCT phase FROM metrics")}
        return [p for p in PHASE_ORDER if p in present]

    def curve(self, run: str, phase: str) -> list[tuple[int, float]]:
        return self._query(
            "SELECT epoch, loss FROM metrics WHERE run = ? AND phase = ? ORDER BY epoch", [run, phase]
        )

    def skip_curve(self, run: str) -> list[tuple[int, float]]:
        return self._query(
            """
            SELECT epoch, skip_fraction FROM metrics
            WHERE run = ? AND phase = 'search' AND skip_fraction IS NOT NULL
            ORDER BY epoch
            """,
            [run],
        )

    _SUMMARY = """
        SELECT
            r.run,
            count(m.epoch) FILTER (WHERE m.phase = 'search') AS search_epochs,
            arg_max(m.loss, m.epoch) FILTER (WHERE m.phase = 'search') AS final_search_loss,
            arg_max(m.skip_fraction, m.epoch) FILTER (WHERE m.phase = 'search') AS final_skip_fraction,
            count(m.epoch) FILTER (WHERE m.phase = 'pretrain') AS pretrain_epochs,
            arg_max(m.loss, m.epoch) FILTER (WHERE m.phase = 'pretrain') AS final_pretrain_loss,
            max(m.top1) AS top1,
            max(m.top5) AS top5,
            r.skipped AS skipped_rows
        FROM runs r
        LEFT JOIN metrics m ON m.run = r.run
        GROUP BY r.run, r.skipped, r.load_order
        ORDER BY r.load_order
    """

    def summary(self) -> list[dict[str, Any]]:
        """One row per loaded run, including runs whose rows were all skipped."""
        cursor = self.conn.execute(self._SUMMARY)
        columns = [d[0] for d in cursor.description]
        return [dict(zip(columns, row)) for row in cursor.fetchall()]

    def export_summary(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        target = str(path).replace("'", "''")
        self.conn.execute(f"COPY ({self._SUMMARY}) TO '{target}' (HEADER, DELIMITER ',')")
        logger.info("Wrote summary of %d runs to %s", len(self.runs()), path)
        return path
