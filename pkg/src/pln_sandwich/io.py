"""CSV matrices, JSON artifacts and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .core import CountDataset
from .exceptions import DatasetError

FLOAT_FORMAT = "%.17g"


@dataclass
class RunManifest:
    """Provenance attached to every output; ``wall_clock_seconds`` is the only timing field."""

    command: str
    config_digest: str
    seed: Optional[int] = None
    input_digests: Dict[str, str] = field(default_factory=dict)
    input_paths: Dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__
    python_version: str = platform.python_version()
    numpy_version: str = np.__version__
    threads: int = 1
    wall_clock_seconds: float = 0.0

    def to_dict(self):
        return asdict(self)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def config_digest(config: dict) -> str:
    payload = json.dumps(config, sort_keys=True, default=str).encode()
    return "sha256:" + hashlib.sha256(payload).hexdigest()


def _format_cell(value, integer):
    if integer:
        return str(int(value))
    return FLOAT_FORMAT % value


def write_matrix_csv(path, matrix, header: List[str], integer: bool = False, row_labels=None, row_label_name="name"):
    """Write a matrix as RFC-4180 CSV with one header row."""
    matrix = np.asarray(matrix)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(([row_label_name] if row_labels is not None else []) + list(header))
        for i, row in enumerate(matrix):
            cells = [_format_cell(v, integer) for v in row]
            if row_labels is not None:
                cells = [row_labels[i]] + cells
            writer.writerow(cells)


def read_matrix_csv(path, integer: bool = False, what: str = "matrix"):
    """Read a CSV with one header row into ``(header, array)``.

    Cell errors raise :class:`DatasetError` with 0-based data row/column and
    the 1-based file line in the message.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{what} file {path} is empty")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if not body:
        raise DatasetError(f"{what} file {path} has a header but no data rows")
    values = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise DatasetError(
                f"{what} file {path}, line {i + 2}: {len(row)} cells but header has {len(header)}",
                row=i,
            )
        for j, cell in enumerate(row):
            text = cell.strip()
            try:
                value = float(text)
            except ValueError:
                raise DatasetError(
                    f"{what} file {path}, line {i + 2}, column {j + 1} ({header[j]!r}): "
                    f"non-numeric value {text!r}",
                    row=i,
                    col=j,
                ) from None
            if not np.isfinite(value):
                raise DatasetError(
                    f"{what} file {path}, line {i + 2}, column {j + 1}: non-finite value {text!r}",
                    row=i,
                    col=j,
                )
            if integer and (value != round(value) or value < 0):
                raise DatasetError(
                    f"{what} file {path}, line {i + 2}, column {j + 1} ({header[j]!r}): "
                    f"counts must be nonnegative integers, got {text!r}",
                    row=i,
                    col=j,
                )
            values[i, j] = value
    return header, values


@dataclass(frozen=True, eq=False)
class NamedDataset:
    data: CountDataset
    variables: List[str]
    covariates: List[str]


def parse_dataset(counts_path, covariates_path, offsets_path=None) -> NamedDataset:
    """Load counts, covariates and optional offsets from aligned CSV files."""
    variables, Y = read_matrix_csv(counts_path, integer=True, what="counts")
    covariates, X = read_matrix_csv(covariates_path, what="covariates")
    if X.shape[0] != Y.shape[0]:
        raise DatasetError(
            f"counts have {Y.shape[0]} rows but covariates have {X.shape[0]} rows"
        )
    O = None
    if offsets_path is not None:
        offset_names, O = read_matrix_csv(offsets_path, what="offsets")
        if O.shape != Y.shape:
            raise DatasetError(f"offsets have shape {O.shape} but counts have shape {Y.shape}")
    return NamedDataset(CountDataset(Y, X, O), variables, covariates)


def matrix_to_json(a) -> dict:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    return {"rows": a.shape[0], "cols": a.shape[1], "data": a.tolist()}


def matrix_from_json(obj) -> np.ndarray:
    a = np.asarray(obj["data"], dtype=float).reshape(obj["rows"], obj["cols"])
    return a


def write_json(path, payload: dict):
    # json writes floats with repr(), the shortest string that round-trips.
    text = json.dumps(payload, indent=1, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def manifest_path(path) -> str:
    return os.fspath(path) + ".manifest.json"
