"""Flat-array checkpoint format.

A checkpoint is one UTF-8 JSON header line followed by the raw bytes of
every array it lists, stored as little-endian float64 in header order::

    {"format": "fade-checkpoint", "version": 1, "model_spec": {...},
     "layout": [["w", [3]], ["b", [1]]],
     "arrays": [{"name": "theta", "length": 4}, {"name": "fim", "length": 4}],
     "meta": {...}}\\n
    <theta bytes><fim bytes>
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .models import Model, ModelSpec

FORMAT = "fade-checkpoint"
VERSION = 1
_LE_F8 = np.dtype("<f8")


def dumps(model_spec: ModelSpec, arrays: dict, meta=None) -> bytes:
    model = Model(model_spec)
    entries = []
    blobs = []
    for name, values in arrays.items():
        values = np.ascontiguousarray(values, dtype=_LE_F8).ravel()
        entries.append({"name": name, "length": int(values.size)})
        blobs.append(values.tobytes())
    header = {
        "format": FORMAT,
        "version": VERSION,
        "model_spec": model_spec.model_dump(),
        "layout": [[name, list(shape)] for name, shape in model.layout()],
        "arrays": entries,
        "meta": meta or {},
    }
    return json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + b"".join(blobs)


def loads(data: bytes):
    """Return ``(header, arrays)`` with arrays as native float64 ndarrays."""
    head, sep, body = data.partition(b"\n")
    if not sep:
        raise DataError("checkpoint header is not newline-terminated")
    header = json.loads(head.decode("utf-8"))
    if header.get("format") != FORMAT:
        raise DataError(f"not a {FORMAT} file")
    arrays, pos = {}, 0
    for entry in header["arrays"]:
        nbytes = entry["length"] * _LE_F8.itemsize
        chunk = body[pos:pos + nbytes]
        if len(chunk) != nbytes:
            raise DataError(f"truncated array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=_LE_F8).astype(np.float64)
        pos += nbytes
    if pos != len(body):
        raise DataError("trailing bytes after last array")
    return header, arrays


def save(path, model_spec, arrays, meta=None):
    Path(path).write_bytes(dumps(model_spec, arrays, meta))


def load(path):
    header, arrays = loads(Path(path).read_bytes())
    return ModelSpec(**header["model_spec"]), header, arrays
