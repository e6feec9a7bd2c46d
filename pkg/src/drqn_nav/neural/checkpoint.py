"""Binary tensor container for network weights and optimiser state.

Layout (little-endian)::

    b"DRQN" | version u32 | count u32 |
    count x ( name_len u16 | name | dtype u8 | rank u8 | dims u32 * rank | data )

Only dtype code 0 (float32) is written. Adam moments are stored under
``adam/m/<name>`` and ``adam/v/<name>``, the step counter as ``adam/t``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .optim import AdamState

MAGIC = b"DRQN"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: dict) -> None:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", 0, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_tensors(path) -> dict:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            dtype = _DTYPES.get(code)
            if dtype is None:
                raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
            size = int(np.prod(dims)) * dtype.itemsize
            if pos + size > len(data):
                raise CheckpointError(f"{path}: truncated data for {name}")
            out[name] = np.frombuffer(data, dtype=dtype, count=int(np.prod(dims)), offset=pos).reshape(dims).astype(np.float32)
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return out


def save_checkpoint(path, params: dict, adam: AdamState | None = None) -> None:
    tensors = dict(params)
    if adam is not None:
        tensors.update({f"adam/m/{k}": v for k, v in adam.m.items()})
        tensors.update({f"adam/v/{k}": v for k, v in adam.v.items()})
        tensors["adam/t"] = np.array(adam.t, dtype=np.float32)
    write_tensors(path, tensors)


def load_checkpoint(path):
    """Returns ``(params, adam_state_or_None)``."""
    tensors = read_tensors(path)
    params = {k: v for k, v in tensors.items() if not k.startswith("adam/")}
    adam = None
    if "adam/t" in tensors:
        adam = AdamState({k[7:]: v for k, v in tensors.items() if k.startswith("adam/m/")},
                         {k[7:]: v for k, v in tensors.items() if k.startswith("adam/v/")},
                         int(tensors["adam/t"].reshape(-1)[0]))
    return params, adam
