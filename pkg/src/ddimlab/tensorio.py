"""DTL1 flat tensor container and small file helpers.

Layout: magic ``DTL1``, little-endian u32 rank, rank x u32 dims, then the
values as little-endian float64 in row-major order.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DTL1"


class TensorFormatError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    arr = np.asarray(array, dtype="<f8").copy(order="C")  # ascontiguousarray would promote 0-d to 1-d
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise TensorFormatError("not a DTL1 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", blob, 4)
    offset = 8 + 4 * rank
    if len(blob) < offset:
        raise TensorFormatError("truncated DTL1 header")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) != offset + 8 * count:
        raise TensorFormatError(
            f"DTL1 payload size mismatch: header says {count} values, "
            f"found {(len(blob) - offset) / 8:g}"
        )
    values = np.frombuffer(blob, dtype="<f8", offset=offset, count=count)
    return values.reshape(dims).astype(np.float64)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
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


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_tensor(path, array) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def save_tensor_set(directory, tensors: Mapping[str, np.ndarray], extra: dict | None = None) -> None:
    """One ``<name>.dtl`` per tensor plus ``tensors.json`` listing names and shapes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        save_tensor(directory / f"{name}.dtl", arr)
        entries.append({"name": name, "file": f"{name}.dtl", "shape": list(arr.shape)})
    doc = {"tensors": entries}
    if extra:
        doc.update(extra)
    atomic_write_text(directory / "tensors.json", dump_json(doc))


def load_tensor_set(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    doc = json.loads((directory / "tensors.json").read_text())
    tensors = {}
    for entry in doc["tensors"]:
        arr = load_tensor(directory / entry["file"])
        if list(arr.shape) != list(entry["shape"]):
            raise TensorFormatError(f"{entry['file']}: shape {arr.shape} != manifest {entry['shape']}")
        tensors[entry["name"]] = arr
    return tensors, doc


def dump_json(obj) -> str:
    # sorted keys keep outputs byte-reproducible
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
