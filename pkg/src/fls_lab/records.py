"""Experiment records: manifest plus named metric tables, persisted atomically."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ExperimentRecord",
    "table_to_csv",
    "csv_to_table",
    "atomic_write",
    "write_record",
    "read_record",
    "content_hash",
    "canonical_json",
]

_INT = re.compile(r"^[+-]?\d+$")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def content_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _parse(s: str):
    if s == "":
        return None
    if _INT.match(s):
        return int(s)
    try:
        return float(s)
    except ValueError:
        return s


def _columns(rows) -> list:
    cols = []
    seen = set()
    for row in rows:
        for k in row:
            if k not in seen:
                seen.add(k)
                cols.append(k)
    return cols


def table_to_csv(rows, columns=None) -> str:
    """UTF-8 CSV text with a header row; floats use shortest round-trip repr."""
    rows = list(rows)
    if not rows:
        raise ValueError("refusing to serialize an empty table")
    cols = list(columns) if columns is not None else _columns(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in cols])
    return buf.getvalue()


def csv_to_table(text: str) -> list:
    reader = csv.DictReader(io.StringIO(text))
    return [{k: _parse(v) for k, v in row.items()} for row in reader]


def atomic_write(path, data) -> None:
    """Write to a sibling temp file and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class ExperimentRecord:
    """Run manifest plus named tables (lists of flat dict rows).

    The ``metrics`` table becomes metrics.csv; other tables get their own
    CSV files. Wall-clock measurements belong in ``timing`` so that
    metrics.csv is a pure function of the manifest.
    """

    manifest: dict
    tables: dict = field(default_factory=dict)

    @property
    def metrics(self) -> list:
        return self.tables.get("metrics", [])

    def table(self, name: str) -> list:
        return self.tables[name]


def write_record(record: ExperimentRecord, out_dir) -> dict:
    """Persist ``record`` under ``out_dir``; returns {table name: path}."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, rows in record.tables.items():
        if not rows:
            continue
        p = out / f"{name}.csv"
        atomic_write(p, table_to_csv(rows))
        paths[name] = p
    manifest = dict(record.manifest)
    manifest["tables"] = sorted(paths)
    atomic_write(out / "manifest.json", json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    return paths


def read_record(out_dir) -> ExperimentRecord:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    tables = {}
    for name in manifest.get("tables", []):
        tables[name] = csv_to_table((out / f"{name}.csv").read_text(encoding="utf-8"))
    return ExperimentRecord(manifest, tables)
