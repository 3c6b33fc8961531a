"""Raw tensor files and named-tensor checkpoints.

A tensor file is: rank (uint32 LE), one uint32 LE extent per axis, then the
values as little-endian float64 in row-major order. A checkpoint is a
directory with ``manifest.json`` listing ``{name: {file, shape}}`` plus one
tensor file per entry.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor


def encode_tensor(arr) -> bytes:
    arr = np.array(arr, dtype="<f8", order="C")
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise ValueError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", buf, 0)
    if len(buf) < 4 + 4 * rank:
        raise ValueError("truncated tensor header")
    shape = struct.unpack_from(f"<{rank}I", buf, 4)
    offset = 4 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != offset + 8 * count:
        raise ValueError(f"tensor payload has {len(buf) - offset} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", offset=offset, count=count).reshape(shape).astype(np.float64)


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def save_checkpoint(directory, tensors: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for i, (name, t) in enumerate(sorted(tensors.items())):
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        fname = f"t{i:04d}.bin"
        save_tensor(directory / fname, data)
        manifest[name] = {"file": fname, "shape": list(data.shape)}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(directory, requires_grad: bool = True) -> dict[str, Tensor]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    out = {}
    for name, entry in manifest.items():
        arr = load_tensor(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"{name}: manifest shape {entry['shape']} but file holds {list(arr.shape)}")
        out[name] = Tensor(arr, requires_grad=requires_grad)
    return out
