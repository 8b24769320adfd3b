"""File formats: QTensor binaries, JSON reports and CSV tables.

A QTensor file is one line of JSON header followed by the raw little-endian
payload::

    {"dims":[2,3],"dtype":"f64","format_version":1,"layout":"row-major","name":"w_q"}\\n
    <2*3*8 bytes>

All writers go through :func:`atomic_write`, which writes a temporary file in
the target directory and renames it into place.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .exceptions import DataError

FORMAT_VERSION = 1
DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


def atomic_write(path, data: bytes) -> Path:
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
    return path


def encode_qtensor(array, name: str = "", dtype: str | None = None) -> bytes:
    a = np.asarray(array)
    if dtype is None:
        dtype = "i32" if np.issubdtype(a.dtype, np.integer) else "f64"
    if dtype not in DTYPES:
        raise DataError(f"unsupported dtype {dtype!r}")
    header = {"dims": [int(d) for d in a.shape], "dtype": dtype,
              "format_version": FORMAT_VERSION, "layout": "row-major", "name": name}
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    return line + np.ascontiguousarray(a, dtype=DTYPES[dtype]).tobytes()


def decode_qtensor(blob: bytes):
    """Return ``(array, header)``."""
    newline = blob.find(b"\n")
    if newline < 0:
        raise DataError("QTensor header is not newline-terminated")
    try:
        header = json.loads(blob[:newline])
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid QTensor header: {exc}") from None
    for key in ("dims", "dtype", "layout"):
        if key not in header:
            raise DataError(f"QTensor header missing {key!r}")
    if header["dtype"] not in DTYPES or header["layout"] != "row-major":
        raise DataError(f"unsupported QTensor encoding {header['dtype']}/{header['layout']}")
    dt = DTYPES[header["dtype"]]
    dims = tuple(int(d) for d in header["dims"])
    payload = blob[newline + 1:]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(payload) != expected:
        raise DataError(f"QTensor payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dt).reshape(dims).copy(), header


def write_qtensor(path, array, name: str = "", dtype: str | None = None) -> Path:
    return atomic_write(path, encode_qtensor(array, name or Path(path).stem, dtype))


def read_qtensor(path):
    return decode_qtensor(Path(path).read_bytes())


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True, default=_default) + "\n"


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_json(path, obj) -> Path:
    return atomic_write(path, dumps_json(obj).encode())


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_csv(path, header, rows) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return atomic_write(path, buf.getvalue().encode())


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def read_length_scores(path) -> dict:
    """Per-length scores from a CSV with ``length`` and ``score`` columns."""
    rows = read_csv(path)
    try:
        return {int(r["length"]): float(r["score"]) for r in rows}
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: expected numeric 'length' and 'score' columns ({exc})") from None
