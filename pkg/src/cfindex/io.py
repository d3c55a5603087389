"""CSV ingestion and export, income transforms and report serialization."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import DataError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
MISSING = {"", "na", "nan", "null"}


@dataclass(frozen=True)
class ColumnMap:
    """Names of the CSV columns holding each variable."""

    outcome: str
    income: str
    exposure: str
    covariates: tuple = ()

    def used(self) -> tuple:
        return (self.outcome, self.income, self.exposure, *self.covariates)


@dataclass(frozen=True)
class IncomeTransform:
    """``(i + offset) ** power``; ``power=None`` means no transform."""

    power: float | None = 0.2
    offset: float = 1.0

    @classmethod
    def parse(cls, text: str) -> "IncomeTransform":
        """Parse ``none`` or ``power:P[:OFFSET]``."""
        text = text.strip().lower()
        if text == "none":
            return cls(None, 0.0)
        parts = text.split(":")
        if parts[0] != "power" or len(parts) not in (2, 3):
            raise ValueError(f"income transform must be 'none' or 'power:P[:OFFSET]', got {text!r}")
        power = float(parts[1])
        offset = float(parts[2]) if len(parts) == 3 else 1.0
        if not power > 0:
            raise ValueError("transform power must be positive")
        return cls(power, offset)

    def __str__(self) -> str:
        return "none" if self.power is None else f"power:{self.power:g}:{self.offset:g}"

    def apply(self, income) -> np.ndarray:
        income = np.asarray(income, dtype=float)
        if self.power is None:
            return income
        shifted = income + self.offset
        if np.any(shifted < 0):
            raise DataError(f"income + {self.offset:g} is negative for {int(np.sum(shifted < 0))} rows")
        return shifted**self.power


def _sort_labels(labels) -> list:
    """Ascending order; numeric when every label parses as a number."""
    try:
        return sorted(labels, key=float)
    except ValueError:
        return sorted(labels)


def _parse(cell: str, line: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"line {line}, column {column!r}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(value):
        raise DataError(f"line {line}, column {column!r}: non-finite value {cell!r}")
    return value


def load_csv(path, columns: ColumnMap, allow_negative_outcome: bool = False) -> Dataset:
    """Read a comma-separated file with a header row.

    Rows with a missing value in any used column are dropped with a
    warning.  Exposure labels are recoded to ``0..K-1`` in ascending label
    order; the labels are kept in ``Dataset.level_labels``.  Incomes are
    returned untransformed.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        missing = [c for c in columns.used() if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        idx = {c: header.index(c) for c in columns.used()}
        numeric = (columns.outcome, columns.income, *columns.covariates)
        values = {c: [] for c in numeric}
        labels = []
        dropped = 0
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                row = row + [""] * (len(header) - len(row))
            cells = {c: row[i].strip() for c, i in idx.items()}
            if any(v.lower() in MISSING for v in cells.values()):
                dropped += 1
                continue
            for c in numeric:
                values[c].append(_parse(cells[c], line, c))
            labels.append(cells[columns.exposure])
    if dropped:
        logger.warning("dropped %d row(s) with missing values in used columns", dropped)
    if not labels:
        raise DataError(f"{path}: no complete rows")
    levels = _sort_labels(set(labels))
    code = {lab: k for k, lab in enumerate(levels)}
    X = np.array([values[c] for c in columns.covariates], dtype=float).T.reshape(len(labels), len(columns.covariates))
    return Dataset(
        np.array(values[columns.outcome]),
        np.array(values[columns.income]),
        np.array([code[lab] for lab in labels]),
        X,
        n_levels=len(levels),
        level_labels=tuple(levels),
        allow_negative_outcome=allow_negative_outcome,
    )


def save_csv(path, data: Dataset, columns: ColumnMap) -> None:
    """Write the used columns; floats are written with full precision."""
    if data.covariates.shape[1] != len(columns.covariates):
        raise ValueError("column map and dataset disagree on the number of covariates")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns.used())
        for k in range(data.n):
            writer.writerow(
                [
                    repr(float(data.y[k])),
                    repr(float(data.income[k])),
                    data.level_labels[data.exposure[k]],
                    *(repr(float(v)) for v in data.covariates[k]),
                ]
            )


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path, payload: dict) -> None:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    text = json.dumps(_clean(payload), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def write_rows_csv(path, rows: list, fieldnames) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fieldnames})
