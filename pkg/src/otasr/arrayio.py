"""Flat named-array container format (checkpoints and feature files).

Layout, designed to be diffable with standard tools:

    line 1: b"OTASR-ARRAYS v1\n"
    then per array, in order:
        header line: b"<name> <rows> <cols>\n"   (ascii, space-separated)
        payload: rows*cols float64 values, little-endian, row-major

Names are ascii identifiers (dots allowed for namespacing), unique per file.
"""

from __future__ import annotations

import re
from collections import OrderedDict

import numpy as np

MAGIC = b"OTASR-ARRAYS v1\n"
_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


def save_arrays(path, arrays: "OrderedDict[str, np.ndarray] | dict") -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, arr in arrays.items():
            if not _NAME_RE.match(name):
                raise ValueError(f"array name {name!r} is not a plain identifier")
            a = np.ascontiguousarray(arr, dtype=np.float64)
            if a.ndim != 2:
                raise ValueError(f"array {name!r} must be 2-D, got shape {a.shape}")
            f.write(f"{name} {a.shape[0]} {a.shape[1]}\n".encode("ascii"))
            f.write(a.astype("<f8").tobytes())


def load_arrays(path) -> "OrderedDict[str, np.ndarray]":
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    with open(path, "rb") as f:
        magic = f.readline()
        if magic != MAGIC:
            raise ValueError(f"{path}: not an array container (bad magic line)")
        while True:
            header = f.readline()
            if not header:
                break
            try:
                name, rows_s, cols_s = header.decode("ascii").split()
                rows, cols = int(rows_s), int(cols_s)
            except ValueError as exc:
                raise ValueError(f"{path}: malformed array header {header!r}") from exc
            payload = f.read(rows * cols * 8)
            if len(payload) != rows * cols * 8:
                raise ValueError(f"{path}: truncated payload for array {name!r}")
            if name in out:
                raise ValueError(f"{path}: duplicate array name {name!r}")
            arr = np.frombuffer(payload, dtype="<f8").reshape(rows, cols)
            out[name] = np.ascontiguousarray(arr, dtype=np.float64)
    return out
