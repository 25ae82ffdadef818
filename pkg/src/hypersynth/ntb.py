"""NTB tensor container: a magic line, a JSON header describing named
tensors (name, shape, dtype, byte offset), then the concatenated
little-endian payload. Used for model checkpoints."""

from __future__ import annotations

import json
from typing import Dict, Tuple

import numpy as np

from .errors import ContainerError

NTB_MAGIC = b"NTB1"

_DTYPES = {"f32le": "<f4", "f64le": "<f8"}
_DTYPE_NAMES = {np.dtype("<f4"): "f32le", np.dtype("<f8"): "f64le"}


def write_ntb(path, tensors: Dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        shape = list(arr.shape)  # before ascontiguousarray promotes 0-d to 1-d
        arr = np.ascontiguousarray(arr)
        dtype = _DTYPE_NAMES.get(arr.dtype.newbyteorder("<"))
        if dtype is None:
            arr = arr.astype("<f4")
            dtype = "f32le"
        blob = arr.astype(_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": shape,
                        "dtype": dtype, "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {"tensors": entries, "meta": meta or {}}
    try:
        with open(path, "wb") as f:
            f.write(NTB_MAGIC + b"\n")
            f.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
            for blob in blobs:
                f.write(blob)
    except OSError as e:
        raise ContainerError(f"cannot write checkpoint {path}: {e}") from e


def read_ntb(path) -> Tuple[Dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as f:
            magic = f.readline().rstrip(b"\n")
            if magic != NTB_MAGIC:
                raise ContainerError(f"{path}: bad magic {magic!r}")
            try:
                header = json.loads(f.readline())
            except json.JSONDecodeError as e:
                raise ContainerError(f"{path}: malformed header: {e}") from e
            payload = f.read()
    except OSError as e:
        raise ContainerError(f"cannot read checkpoint {path}: {e}") from e

    tensors = {}
    for entry in header.get("tensors", []):
        np_dtype = _DTYPES.get(entry["dtype"])
        if np_dtype is None:
            raise ContainerError(f"{path}: unknown dtype {entry['dtype']!r}")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        nbytes = count * np.dtype(np_dtype).itemsize
        if start + nbytes > len(payload):
            raise ContainerError(f"{path}: tensor {entry['name']!r} overruns payload")
        arr = np.frombuffer(payload, dtype=np_dtype, count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header.get("meta", {})
