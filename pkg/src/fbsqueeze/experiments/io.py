"""File formats: CSV tables, JSON manifests, flat key-value config files."""

from __future__ import annotations

import csv
import json
import platform
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy

from .. import __version__

__all__ = [
    "engine_versions",
    "fmt",
    "read_config",
    "read_csv",
    "write_columns",
    "write_grid",
    "write_json",
]


def fmt(value) -> str:
    """Float with 17 significant digits (round-trips IEEE doubles)."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def write_columns(path: Path, columns: Mapping[str, Sequence]) -> Path:
    """Write equal-length columns with a header row."""
    path = Path(path)
    names = list(columns)
    data = [np.asarray(columns[k]) for k in names]
    n = {len(d) for d in data}
    if len(n) != 1:
        raise ValueError(f"columns differ in length: {dict(zip(names, map(len, data)))}")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*data):
            w.writerow([fmt(v) for v in row])
    return path


def write_grid(path: Path, row_values, col_values, grid, corner: str) -> Path:
    """Matrix CSV: header of column-axis values, first column of row-axis values."""
    path = Path(path)
    grid = np.asarray(grid)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([corner, *(fmt(v) for v in col_values)])
        for rv, row in zip(row_values, grid):
            w.writerow([fmt(rv), *(fmt(v) for v in row)])
    return path


def read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path: Path, payload: Mapping) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=False) + "\n")
    return path


def engine_versions() -> dict[str, str]:
    return {
        "fbsqueeze": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def read_config(path: Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Keys are normalised to underscores (``gamma-x`` and ``gamma_x`` are the
    same key). Values stay strings; the caller converts them.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, value = line.split(sep, 1)
                break
        else:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key = key.strip().lstrip("-").replace("-", "_")
        if not key:
            raise ValueError(f"{path}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def list_files(paths: Iterable[Path], root: Path) -> list[str]:
    root = Path(root)
    return sorted(str(Path(p).relative_to(root)) for p in paths)
