"""Named-tensor checkpoint container.

Layout (little-endian)::

    b"DVFC" | u32 version | u64 header_len | header JSON | tensor data

The header is ``{"meta": {...}, "tensors": {name: {"shape", "dtype", "offset"}}}``
with offsets in bytes from the start of the data section. Every tensor is
stored as float32; names keep their insertion order in the data section.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from dvf.errors import DataError

MAGIC = b"DVFC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def dump_tensors(tensors: Mapping[str, torch.Tensor | np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = {}, [], 0
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.ascontiguousarray(value, dtype="<f4")
        entries[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def parse_tensors(blob: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < _PREFIX.size:
        raise DataError(f"{source}: truncated checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC or version != VERSION:
        raise DataError(f"{source}: not a version-{VERSION} DVFC checkpoint")
    start = _PREFIX.size + header_len
    try:
        header = json.loads(blob[_PREFIX.size : start])
    except json.JSONDecodeError as exc:
        raise DataError(f"{source}: corrupt checkpoint header") from exc
    data = memoryview(blob)[start:]
    tensors = {}
    for name, info in sorted(header["tensors"].items(), key=lambda kv: kv[1]["offset"]):
        count = int(np.prod(info["shape"], dtype=np.int64))
        if info["offset"] + 4 * count > len(data):
            raise DataError(f"{source}: tensor {name!r} runs past end of file")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=info["offset"])
        tensors[name] = arr.reshape(info["shape"]).copy()
    return tensors, header["meta"]


def save_tensors(path: str | Path, tensors: Mapping[str, torch.Tensor | np.ndarray], meta: dict | None = None) -> None:
    atomic_write(path, dump_tensors(tensors, meta))


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_tensors(blob, str(path))


def load_state_into(module: torch.nn.Module, tensors: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Copy tensors named ``prefix + key`` into ``module``'s state dict; every key must be present."""
    state = module.state_dict()
    missing = [k for k in state if prefix + k not in tensors]
    if missing:
        raise DataError(f"checkpoint lacks {len(missing)} tensor(s), e.g. {missing[:3]}")
    for k, v in state.items():
        src = torch.from_numpy(np.asarray(tensors[prefix + k]))
        if tuple(src.shape) != tuple(v.shape):
            raise DataError(f"tensor {prefix + k!r}: checkpoint shape {tuple(src.shape)} != model {tuple(v.shape)}")
        with torch.no_grad():
            v.copy_(src.to(v.dtype))
