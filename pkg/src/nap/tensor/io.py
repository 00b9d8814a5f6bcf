"""Binary parameter checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  b"NAPT"
    version u32      currently 1
    count   u64      number of parameters
    then per parameter, in ascending name order:
        name_len u32
        name     UTF-8 bytes
        rank     u32
        dims     rank * u64
        values   prod(dims) * f64, C order

Round-trips are bit-exact: load(save(params)) compares equal with ==,
including signed zeros and subnormals (NaN payloads are preserved too,
though parameters should never contain NaN).
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping, Sequence, Union

import numpy as np

from nap.errors import CheckpointError
from nap.tensor.core import Tensor

MAGIC = b"NAPT"
VERSION = 1


def _as_param_dict(params) -> Dict[str, np.ndarray]:
    if isinstance(params, Mapping):
        return {str(k): np.asarray(v, dtype=np.float64) for k, v in params.items()}
    out: Dict[str, np.ndarray] = {}
    for p in params:
        if p.name is None:
            raise CheckpointError("cannot checkpoint an unnamed tensor")
        if p.name in out:
            raise CheckpointError(f"duplicate parameter name '{p.name}'")
        out[p.name] = p.data
    return out


def save_params(path: Union[str, Path],
                params: Union[Mapping[str, np.ndarray], Sequence[Tensor]]) -> None:
    """Write parameters to ``path`` in the container format above."""
    table = _as_param_dict(params)
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(table))]
    for name in sorted(table):
        arr = np.asarray(table[name], dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d shapes intact
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f8", copy=False).tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint file: {self.path}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_params(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Read a checkpoint written by :func:`save_params`."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4) != MAGIC:
        raise CheckpointError(f"bad magic in {path}: not a parameter checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    count = r.u64()
    out: Dict[str, np.ndarray] = {}
    prev_name = None
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        if prev_name is not None and name <= prev_name:
            raise CheckpointError(f"parameter names out of order in {path}")
        prev_name = name
        rank = r.u32()
        dims = tuple(r.u64() for _ in range(rank))
        n_values = 1
        for d in dims:
            n_values *= d
        raw = r.take(8 * n_values)
        out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(r.buf):
        raise CheckpointError(f"trailing bytes after last parameter in {path}")
    return out


def assign_params(tensors: Sequence[Tensor], table: Mapping[str, np.ndarray]) -> None:
    """Copy checkpointed values into existing tensors, matching by name.

    Raises CheckpointError on any missing name, extra name, or shape clash.
    """
    by_name = {t.name: t for t in tensors}
    missing = sorted(set(by_name) - set(table))
    extra = sorted(set(table) - set(by_name))
    if missing or extra:
        raise CheckpointError(
            f"parameter set mismatch: missing from file {missing}, unexpected in file {extra}")
    for name, tensor in by_name.items():
        arr = table[name]
        if arr.shape != tensor.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': file has {arr.shape}, model has {tensor.shape}")
        tensor.data[...] = arr
