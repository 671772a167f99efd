"""Binary field directories.

A field directory holds ``manifest.json`` plus ``records.bin``: ``nrecords``
consecutive records, each a C-order array of ``record_shape`` little-endian
values.  Complex data is interleaved re/im 8-byte floats (``<c16``), real
data is ``<f8``.  See ``docs/formats.md``.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT = "pilotwave-fields"
FORMAT_VERSION = 1
RECORDS = "records.bin"
MANIFEST = "manifest.json"

_DTYPES = {"complex-scalar": "<c16", "real-scalar": "<f8", "real-vector": "<f8", "complex-vector": "<c16"}


def write_fields(path, records, kind: str, grid, times=None, extra: dict | None = None) -> Path:
    """Write ``records`` (shape ``(nrecords, *record_shape)``) as a field directory."""
    if kind not in _DTYPES:
        raise ValueError(f"unknown field kind {kind!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(_DTYPES[kind])
    nrec = records.shape[0]
    with open(path / RECORDS, "wb") as fh:
        for i in range(nrec):
            fh.write(np.ascontiguousarray(records[i], dtype=dtype).tobytes(order="C"))
    manifest = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "kind": kind,
        "dtype": dtype.str,
        "nrecords": int(nrec),
        "record_shape": [int(s) for s in records.shape[1:]],
        "grid": grid.to_dict(),
        "times": None if times is None else [float(t) for t in times],
    }
    if extra:
        manifest.update(extra)
    write_json(path / MANIFEST, manifest)
    return path


def read_manifest(path) -> dict:
    with open(Path(path) / MANIFEST) as fh:
        m = json.load(fh)
    if m.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} directory")
    return m


def read_fields(path, mmap: bool = True):
    """Return ``(records, manifest)``; records are memory-mapped read-only by default."""
    path = Path(path)
    m = read_manifest(path)
    shape = (m["nrecords"], *m["record_shape"])
    if mmap:
        data = np.memmap(path / RECORDS, dtype=np.dtype(m["dtype"]), mode="r", shape=shape)
    else:
        data = np.fromfile(path / RECORDS, dtype=np.dtype(m["dtype"])).reshape(shape)
    return data, m


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
