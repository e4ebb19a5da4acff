from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from pacdrgp.domain.errors import DatasetParseError, DatasetValidationError
from pacdrgp.domain.revarb_model import Dataset, denormalize, normalize_dataset

logger = logging.getLogger(__name__)


def _normalize_header(value: str) -> str:
    return value.replace("\ufeff", "").strip()


def _split_header(header: list[str]) -> tuple[list[str], list[str]]:
    names = [_normalize_header(name) for name in header]
    if not names or names[0] != "t":
        raise DatasetParseError("header must start with 't'", line=1, column="t")
    inputs = [name for name in names[1:] if name.startswith("u_")]
    outputs = [name for name in names[1:] if name == "y" or name.startswith("y_")]
    unknown = [name for name in names[1:] if name not in inputs and name not in outputs]
    if unknown:
        raise DatasetParseError(f"unexpected column {unknown[0]!r}", line=1, column=unknown[0])
    if not outputs:
        raise DatasetParseError("header needs a 'y' column", line=1)
    if names[1 : 1 + len(inputs)] != inputs:
        raise DatasetParseError("input columns must precede output columns", line=1)
    return inputs, outputs


class CsvDatasetAdapter:
    """Comma-separated series with header ``t,u_1..u_Qx,y`` (or ``y_1..y_N``)."""

    def load_dataset(self, path: Path) -> Dataset:
        path = Path(path)
        with path.open("r", newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header is None:
                raise DatasetValidationError(f"{path} is empty")
            inputs, outputs = _split_header(header)
            columns = ["t", *inputs, *outputs]
            rows: list[list[float]] = []
            for line_no, row in enumerate(reader, start=2):
                if not row or all(not cell.strip() for cell in row):
                    continue
                if len(row) != len(columns):
                    raise DatasetParseError(
                        f"expected {len(columns)} cells, found {len(row)}", line=line_no
                    )
                values = []
                for name, cell in zip(columns, row):
                    try:
                        values.append(float(cell))
                    except ValueError as exc:
                        raise DatasetParseError(
                            f"non-numeric value {cell.strip()!r}", line=line_no, column=name
                        ) from exc
                rows.append(values)
        if not rows:
            raise DatasetValidationError(f"{path} has no data rows")
        table = np.asarray(rows, dtype=np.float64)
        times = table[:, 0]
        steps = np.diff(times)
        if bool((steps <= 0).any()):
            bad = int(np.argmax(steps <= 0)) + 3
            raise DatasetValidationError(f"t is not strictly increasing at line {bad}")
        exo = table[:, 1 : 1 + len(inputs)]
        out = table[:, 1 + len(inputs) :]
        logger.info("loaded %s: K=%d, Qx=%d, outputs=%d", path, table.shape[0], exo.shape[1], out.shape[1])
        return normalize_dataset(times, exo, out)

    def save_dataset(self, dataset: Dataset, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        exo, out = denormalize(dataset)
        header = ["t"] + [f"u_{i}" for i in range(1, exo.shape[1] + 1)]
        header += ["y"] if out.shape[1] == 1 else [f"y_{j}" for j in range(1, out.shape[1] + 1)]
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for t, x_row, y_row in zip(dataset.times, exo, out):
                writer.writerow([repr(float(t)), *(repr(float(v)) for v in x_row), *(repr(float(v)) for v in y_row)])
