"""Metrics records and report tables.

A metrics record is one JSON document holding per-run values and aggregate
statistics per scheme.  Aggregates are always recomputable from the stored
per-run values; :func:`load_metrics` re-derives and compares them exactly,
so a hand-edited or truncated file is rejected.  Error time series live in
separate delimited-text files (one column per run) for band plots.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = [
    "aggregate",
    "save_metrics",
    "load_metrics",
    "write_series",
    "read_series",
    "write_table",
]

METRICS_FORMAT = "knodempc-metrics v1"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def aggregate(values) -> dict:
    """Median, quartiles, extremes and count of a list of per-run values."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return {"count": 0, "median": None, "q1": None, "q3": None, "min": None, "max": None}
    return {
        "count": int(arr.size),
        "median": float(np.median(arr)),
        "q1": float(np.percentile(arr, 25)),
        "q3": float(np.percentile(arr, 75)),
        "min": float(np.min(arr)),
        "max": float(np.max(arr)),
    }


def _attach_aggregates(record: dict) -> None:
    for block in record.values():
        if isinstance(block, dict) and "per_run" in block:
            block["aggregates"] = {
                scheme: aggregate(vals) for scheme, vals in sorted(block["per_run"].items())
            }


def save_metrics(path: str | Path, record: dict, provenance: dict) -> None:
    """Attach aggregates and provenance, then write deterministic JSON."""
    doc = dict(record)
    doc["format"] = METRICS_FORMAT
    doc["provenance"] = dict(provenance)
    _attach_aggregates(doc)
    Path(path).write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def load_metrics(path: str | Path, validate: bool = True) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != METRICS_FORMAT:
        raise ValueError(f"{path}: not a metrics record")
    if validate:
        for name, block in doc.items():
            if not (isinstance(block, dict) and "per_run" in block):
                continue
            for scheme, vals in block["per_run"].items():
                expect = aggregate(vals)
                stored = block.get("aggregates", {}).get(scheme)
                if stored != expect:
                    raise ValueError(f"{path}: aggregates of {name}/{scheme} are inconsistent")
    return doc


def write_series(path: str | Path, t: np.ndarray, columns: dict, provenance: dict) -> None:
    """Delimited text with a shared time column; one extra column per run."""
    names = sorted(columns)
    lines = [
        "# knodempc-series v1",
        "# " + " ".join(f"{k}={v}" for k, v in sorted(provenance.items())),
        ",".join(["t"] + names),
    ]
    cols = [np.asarray(columns[k], float) for k in names]
    for i, ti in enumerate(np.asarray(t, float)):
        lines.append(",".join([f"{ti:.17g}"] + [f"{c[i]:.17g}" for c in cols]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_series(path: str | Path) -> tuple[np.ndarray, dict]:
    header = None
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        if header is None:
            header = line.split(",")
            continue
        rows.append([float(v) for v in line.split(",")])
    arr = np.asarray(rows, dtype=float)
    if header is None or arr.size == 0:
        return np.empty(0), {}
    return arr[:, 0], {name: arr[:, j + 1] for j, name in enumerate(header[1:])}


def write_table(path: str | Path, header: list[str], rows: list[list]) -> None:
    """Plain delimited-text table; floats are written with full precision."""

    def cell(v) -> str:
        if isinstance(v, (float, np.floating)):
            return f"{float(v):.17g}"
        return str(v)

    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(cell(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
