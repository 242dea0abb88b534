"""Named-array binary container shared by datasets and checkpoints.

One container file holds a flat mapping of names to numpy arrays plus a JSON
metadata record. The on-disk format is a zip of little-endian ``.npy`` members
(numpy's documented format, version 1.0 header) with the metadata stored as a
UTF-8 JSON member under ``__meta__``.
"""
from __future__ import annotations

import io
import json
import os
import zipfile

import numpy as np

META_KEY = "__meta__"


class ContainerError(RuntimeError):
    """Raised when a container file is missing entries or malformed."""


def _to_little_endian(arr: np.ndarray) -> np.ndarray:
    if arr.dtype.byteorder == ">":
        return arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays and a metadata dict atomically to ``path``."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            if name == META_KEY:
                raise ValueError(f"array name {META_KEY!r} is reserved")
            buf = io.BytesIO()
            np.lib.format.write_array(buf, _to_little_endian(np.asarray(arr)), version=(1, 0))
            zf.writestr(name + ".npy", buf.getvalue())
        zf.writestr(META_KEY, json.dumps(meta or {}, sort_keys=True))
    os.replace(tmp, path)


def load_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Read back ``(arrays, meta)`` written by :func:`save_arrays`."""
    path = os.fspath(path)
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}
    try:
        with zipfile.ZipFile(path, "r") as zf:
            for name in zf.namelist():
                raw = zf.read(name)
                if name == META_KEY:
                    meta = json.loads(raw.decode("utf-8"))
                elif name.endswith(".npy"):
                    arrays[name[: -len(".npy")]] = np.lib.format.read_array(io.BytesIO(raw))
                else:
                    raise ContainerError(f"unexpected member {name!r} in {path}")
    except (zipfile.BadZipFile, ValueError) as exc:
        raise ContainerError(f"corrupt container {path}: {exc}") from exc
    return arrays, meta
