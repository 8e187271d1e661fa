"""File formats: Matrix Market weights, long-format panel CSV, JSON and flat configs.

Every writer goes through a temporary file in the target directory followed by
``os.replace``, so readers never see a half-written output.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import re
import tempfile
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .errors import InputError, SymmetryError
from .model import PanelData
from .sparse_band import SymSparseMatrix

CONFIG_SCHEMA = 1


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _clean_floats(obj):
    # JSON has no NaN/inf; map them to null
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean_floats(v) for v in obj]
    return obj


def to_json(obj, indent=2):
    raw = json.loads(json.dumps(obj, default=_jsonable))
    return json.dumps(_clean_floats(raw), indent=indent, sort_keys=False) + "\n"


def write_json(path, obj):
    atomic_write_text(path, to_json(obj))


def file_checksum(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


_LINE_RE = re.compile(r"[Ll]ine (\d+)")


def read_matrix_market(path) -> SymSparseMatrix:
    """Read a square real Matrix Market matrix and check exact symmetry."""
    path = Path(path)
    try:
        m = scipy.io.mmread(str(path))
    except FileNotFoundError:
        raise
    except (ValueError, OSError, IndexError) as exc:
        match = _LINE_RE.search(str(exc))
        raise InputError(str(exc), path, int(match.group(1)) if match else None) from exc
    if not sp.issparse(m):
        m = sp.csr_array(np.asarray(m))
    if m.shape[0] != m.shape[1]:
        raise InputError(f"weight matrix must be square, got {m.shape}", path)
    if np.iscomplexobj(m.data if sp.issparse(m) else m):
        raise InputError("weight matrix must be real", path)
    try:
        return SymSparseMatrix(sp.csr_array(m, dtype=np.float64))
    except SymmetryError as exc:
        i, j = exc.coordinate
        raise SymmetryError(
            f"{path}: entry ({i + 1}, {j + 1}) (1-based) has no equal symmetric counterpart",
            coordinate=exc.coordinate,
        ) from exc


def write_matrix_market(path, w: SymSparseMatrix, comment=""):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".mtx")
    os.close(fd)
    try:
        scipy.io.mmwrite(tmp, sp.coo_matrix(w.csr), comment=comment, field="real", symmetry="symmetric")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_panel_csv(path, data: PanelData):
    """Long format ``cell_id,time,y,x1..xk``, sorted by cell then time."""
    lines = [",".join(["cell_id", "time", "y"] + [f"x{j + 1}" for j in range(data.k)])]
    for i in range(data.N):
        for t in range(data.T):
            vals = [repr(float(data.Y[i, t]))] + [repr(float(v)) for v in data.X[i, :, t]]
            lines.append(f"{i},{t}," + ",".join(vals))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _parse_int(text, path, line, col):
    try:
        v = int(text)
    except ValueError:
        raise InputError(f"expected an integer, got {text!r}", path, line, col) from None
    if v < 0:
        raise InputError(f"ids must be non-negative, got {v}", path, line, col)
    return v


def _parse_float(text, path, line, col):
    try:
        v = float(text)
    except ValueError:
        raise InputError(f"expected a number, got {text!r}", path, line, col) from None
    if not math.isfinite(v):
        raise InputError(f"missing or non-finite value {text!r}", path, line, col)
    return v


def read_panel_csv(path, expected_N=None) -> PanelData:
    """Read a long-format panel; cell ids and times must each be dense from 0."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError("empty panel file", path, 1) from None
        if header[:3] != ["cell_id", "time", "y"] or len(header) < 4:
            raise InputError("header must be cell_id,time,y,x1,...,xk", path, 1)
        k = len(header) - 3
        expect = [f"x{j + 1}" for j in range(k)]
        if header[3:] != expect:
            raise InputError(f"design columns must be named {','.join(expect)}", path, 1)
        cells, times, vals = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != k + 3:
                raise InputError(f"expected {k + 3} fields, found {len(row)}", path, lineno)
            cells.append(_parse_int(row[0].strip(), path, lineno, 1))
            times.append(_parse_int(row[1].strip(), path, lineno, 2))
            vals.append([_parse_float(c.strip(), path, lineno, j + 3) for j, c in enumerate(row[2:])])
    if not cells:
        raise InputError("panel has no data rows", path)
    cells = np.asarray(cells)
    times = np.asarray(times)
    vals = np.asarray(vals)
    N = int(cells.max()) + 1 if expected_N is None else int(expected_N)
    T = int(times.max()) + 1
    if cells.max() >= N:
        raise InputError(f"cell id {int(cells.max())} out of range for N={N}", path)
    seen = np.zeros((N, T), dtype=np.int64)
    np.add.at(seen, (cells, times), 1)
    if np.any(seen > 1):
        i, t = np.argwhere(seen > 1)[0]
        raise InputError(f"duplicate observation for cell {i}, time {t}", path)
    if np.any(seen == 0):
        i, t = np.argwhere(seen == 0)[0]
        raise InputError(f"missing observation for cell {i}, time {t}", path)
    Y = np.empty((N, T))
    X = np.empty((N, k, T))
    Y[cells, times] = vals[:, 0]
    X[cells, :, times] = vals[:, 1:]
    return PanelData(Y, X)


def read_coords_csv(path):
    """Optional ``cell_id,x,y`` coordinate table used for spatial blocks."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["cell_id", "x", "y"]:
            raise InputError("header must be cell_id,x,y", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise InputError(f"expected 3 fields, found {len(row)}", path, lineno)
            rows.append(
                (
                    _parse_int(row[0], path, lineno, 1),
                    _parse_float(row[1], path, lineno, 2),
                    _parse_float(row[2], path, lineno, 3),
                )
            )
    ids = np.array([r[0] for r in rows])
    if np.any(np.sort(ids) != np.arange(ids.size)):
        raise InputError("cell ids must be exactly 0..N-1", path)
    out = np.empty((ids.size, 2))
    out[ids] = [(r[1], r[2]) for r in rows]
    return out


def write_coords_csv(path, coords):
    lines = ["cell_id,x,y"] + [f"{i},{repr(float(x))},{repr(float(y))}" for i, (x, y) in enumerate(coords)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_config(path) -> dict:
    """Flat ``key = value`` config; ``#`` starts a comment. Needs ``schema_version``."""
    path = Path(path)
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError("expected key = value", path, lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise InputError("empty key", path, lineno)
        if key in out:
            raise InputError(f"duplicate key {key!r}", path, lineno)
        out[key] = value
    version = out.pop("schema_version", None)
    if version is None:
        raise InputError("config lacks schema_version", path)
    if version != str(CONFIG_SCHEMA):
        raise InputError(f"unsupported schema_version {version} (expected {CONFIG_SCHEMA})", path)
    return out
