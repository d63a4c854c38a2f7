"""Aggregate metrics records into one CSV table."""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .evaluate import MetricsRecord
from .io import atomic_write

COLUMNS = ("experiment_id", "attacker_dataset", "downstream_dataset", "victim_method", "criterion", "alpha",
           "epsilon", "seed", "y_t", "tfr", "ata", "mean_l2", "mean_linf")
_FLOATS = ("epsilon", "tfr", "ata", "mean_l2", "mean_linf")


def render_report(records) -> str:
    """CSV text, rows sorted by experiment id, floats with six decimals."""
    records = list(records)
    if not records:
        raise ValueError("report needs at least one metrics record")
    ids = [r.experiment_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate experiment ids in report input")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in sorted(records, key=lambda r: r.experiment_id):
        row = []
        for col in COLUMNS:
            v = getattr(r, col)
            row.append(f"{v:.6f}" if col in _FLOATS else str(v))
        w.writerow(row)
    return buf.getvalue()


def write_report(records, path) -> None:
    atomic_write(Path(path), render_report(records).encode())


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for col in _FLOATS:
            row[col] = float(row[col])
        row["seed"] = int(row["seed"])
        row["y_t"] = int(row["y_t"])
    return rows


def record_from_row(row: dict) -> MetricsRecord:
    return MetricsRecord(**{c: row[c] for c in COLUMNS})
