"""Long-format CSV data files and JSON model files.

Data files have the header ``task_id,row,<covariate names...>,y`` with one
line per observation.  Model files are versioned JSON; floats are written with
their shortest round-trip representation so a reload reproduces every bit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import DataError, VersionError
from .learner import FitConfig, MultiTaskModel, TaskDataset
from .sparse_coding import BlockSparseCode
from .splines import SplineBasis

MODEL_FORMAT = "shared-transfer-model"
MODEL_VERSION = 1


def _number(text: str, line: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"line {line}: column {column!r} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"line {line}: column {column!r} is not finite: {text!r}")
    return value


def load_csv(path) -> TaskDataset:
    """Read a long-format data file.

    Tasks keep their order of first appearance and rows are sorted by the
    ``row`` column.  Covariates are flagged as shared when every task carries
    exactly the same covariate matrix.

    Raises
    ------
    DataError
        On a missing column, a non-numeric or non-finite cell, a duplicate row
        index, or tasks with different numbers of rows.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        if len(header) < 4 or header[:2] != ["task_id", "row"] or header[-1] != "y":
            raise DataError(f"line 1: header must be 'task_id,row,<covariates...>,y', "
                            f"got {','.join(header)!r}")
        names = header[2:-1]
        tasks: dict[str, dict] = {}
        first_line: dict[str, int] = {}
        for line, record in enumerate(reader, start=2):
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) != len(header):
                raise DataError(f"line {line}: expected {len(header)} fields, got {len(record)}")
            tid = record[0].strip()
            if not tid:
                raise DataError(f"line {line}: empty task_id")
            try:
                row = int(record[1])
            except ValueError:
                raise DataError(f"line {line}: row index is not an integer: "
                                f"{record[1]!r}") from None
            values = [_number(record[2 + j], line, names[j]) for j in range(len(names))]
            y = _number(record[-1], line, "y")
            rows = tasks.setdefault(tid, {})
            first_line.setdefault(tid, line)
            if row in rows:
                raise DataError(f"line {line}: duplicate row {row} for task {tid!r}")
            rows[row] = (values, y)
    if not tasks:
        raise DataError(f"{path}: no data rows")
    sizes = {tid: len(rows) for tid, rows in tasks.items()}
    n = next(iter(sizes.values()))
    for tid, size in sizes.items():
        if size != n:
            raise DataError(f"line {first_line[tid]}: task {tid!r} has {size} rows, "
                            f"expected {n} like the first task")
    ids = list(tasks)
    X = np.empty((len(ids), n, len(names)))
    Y = np.empty((len(ids), n))
    for m, tid in enumerate(ids):
        rows = tasks[tid]
        for i, key in enumerate(sorted(rows)):
            X[m, i], Y[m, i] = rows[key]
    shared = bool(np.all(X == X[0]))
    return TaskDataset(X, Y, ids, shared, names)


def save_csv(dataset: TaskDataset, path, responses=None) -> None:
    """Write a dataset (optionally with replacement responses) in long format."""
    Y = dataset.responses if responses is None else np.asarray(responses, dtype=float)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task_id", "row", *dataset.covariate_names, "y"])
        for m, tid in enumerate(dataset.task_ids):
            for i in range(dataset.n):
                writer.writerow([tid, i, *map(repr, dataset.covariates[m, i].tolist()),
                                 repr(float(Y[m, i]))])


# -- models ------------------------------------------------------------------

def config_from_dict(d: dict) -> FitConfig:
    known = {f.name for f in fields(FitConfig)}
    unknown = set(d) - known
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    d = dict(d)
    if isinstance(d.get("L"), list):
        d["L"] = tuple(d["L"])
    return FitConfig(**d)


def model_to_dict(model: MultiTaskModel, created: str | None = None) -> dict:
    if created is None:
        created = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "created": created,
        # thread count does not affect the fit, so it is not stored
        "config": {k: v for k, v in model.config.to_dict().items() if k != "threads"},
        "covariate_names": list(model.covariate_names or []),
        "signed_split": model.signed_split,
        "bases": [{
            "covariate_index": b.covariate_index,
            "degree": b.degree,
            "knots": b.knots.tolist(),
            "column_means": b.column_means.tolist(),
            "domain": [float(b.domain[0]), float(b.domain[1])],
        } for b in model.bases],
        "coefficient_matrices": [np.asarray(B).tolist() for B in model.coefficient_matrices],
        "tasks": [{
            "task_id": tid,
            "intercept": float(model.intercepts[m]),
            "residual_norm": float(model.codes[m].residual_norm),
            "selected": [[int(k), int(l), float(c)] for k, l, c in model.codes[m].selected],
        } for m, tid in enumerate(model.task_ids)],
        "objective_history": [float(v) for v in model.objective_history],
        "pre_update_history": [float(v) for v in model.pre_update_history],
        "repairs": int(model.repairs),
    }


def model_from_dict(d: dict) -> MultiTaskModel:
    if d.get("format") != MODEL_FORMAT:
        raise DataError(f"not a model file (format {d.get('format')!r})")
    if d.get("version") != MODEL_VERSION:
        raise VersionError(f"model version {d.get('version')!r} is not supported "
                           f"(expected {MODEL_VERSION})")
    try:
        bases = [SplineBasis(b["covariate_index"], b["degree"], np.array(b["knots"], dtype=float),
                             np.array(b["column_means"], dtype=float), tuple(b["domain"]))
                 for b in d["bases"]]
        coeffs = [np.array(B, dtype=float).reshape(len(B), -1) for B in d["coefficient_matrices"]]
        widths = [B.shape[1] for B in coeffs]
        codes = [BlockSparseCode.from_selection(widths, [(k, l, c) for k, l, c in t["selected"]],
                                                t.get("residual_norm", 0.0))
                 for t in d["tasks"]]
        return MultiTaskModel(
            bases=bases, coefficient_matrices=coeffs, codes=codes,
            config=config_from_dict(d["config"]),
            intercepts=np.array([t["intercept"] for t in d["tasks"]], dtype=float),
            task_ids=[t["task_id"] for t in d["tasks"]],
            objective_history=list(d.get("objective_history", [])),
            pre_update_history=list(d.get("pre_update_history", [])),
            signed_split=bool(d["signed_split"]),
            covariate_names=list(d.get("covariate_names") or []) or None,
            repairs=int(d.get("repairs", 0)))
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"malformed model file: {exc!r}") from None


def save_model(model: MultiTaskModel, path, created: str | None = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, created), indent=1) + "\n",
                          encoding="utf-8")


def load_model(path) -> MultiTaskModel:
    text = Path(path).read_text(encoding="utf-8")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: cannot parse model file: {exc}") from None
    return model_from_dict(d)
