"""On-disk containers shared by datasets, tables and checkpoints.

Array file: one line of JSON (``{"dtype": "<f4", "shape": [...], ...}``)
terminated by ``\\n``, followed by the raw little-endian payload.

Tensor container: 8-byte magic, uint32 format version, uint64 header length,
a JSON header (free-form ``meta`` plus a ``tensors`` index of name, dtype,
shape, offset, nbytes), then the concatenated little-endian payloads.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import StorageError

CONTAINER_MAGIC = b"SETDINO\x00"
CONTAINER_VERSION = 1


def _le(dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def write_array(path, array, **extra) -> None:
    arr = np.ascontiguousarray(array, dtype=_le(array.dtype))
    header = {"dtype": arr.dtype.str, "shape": list(arr.shape), **extra}
    try:
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(arr.tobytes())
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def read_array(path, mmap: bool = False):
    """Return ``(array, header)`` for a file written by :func:`write_array`."""
    try:
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
            offset = fh.tell()
    except (OSError, ValueError) as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    dtype = np.dtype(header["dtype"])
    shape = tuple(header["shape"])
    if mmap:
        arr = np.memmap(path, dtype=dtype, mode="r", offset=offset, shape=shape)
    else:
        arr = np.fromfile(path, dtype=dtype, offset=offset).reshape(shape)
    return arr, header


def write_container(path, tensors: dict, meta: dict) -> None:
    index = []
    payloads = []
    offset = 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype=_le(value.dtype))
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(CONTAINER_MAGIC)
            fh.write(struct.pack("<IQ", CONTAINER_VERSION, len(header)))
            fh.write(header)
            for raw in payloads:
                fh.write(raw)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def read_container(path):
    """Return ``(tensors, meta)``; tensors is an ordered dict of numpy arrays."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    if data[:8] != CONTAINER_MAGIC:
        raise StorageError(f"{path}: not a tensor container")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CONTAINER_VERSION:
        raise StorageError(f"{path}: unsupported container version {version}")
    header = json.loads(data[20:20 + hlen])
    base = 20 + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        buf = data[start:start + entry["nbytes"]]
        tensors[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(
            entry["shape"]).copy()
    return tensors, header["meta"]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
