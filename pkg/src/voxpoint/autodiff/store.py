"""Named parameter collection and its binary checkpoint format.

Checkpoint layout (little endian): magic ``VPPC``, u32 format version,
u32 tensor count, then per tensor a u16 name length, the UTF-8 name, a
u8 rank, rank u32 dims, and the float32 payload in C order.  Entries
appear in insertion order so a round trip preserves ordering.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"VPPC"
VERSION = 1


class ParameterStore:
    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor, requires_grad=True)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def subset(self, *prefixes) -> "ParameterStore":
        """View of parameters whose names start with any prefix; tensors are
        shared, so optimizers on the view update this store."""
        view = ParameterStore()
        for name, t in self._params.items():
            if any(name.startswith(p) for p in prefixes):
                view._params[name] = t
        return view

    # -- snapshots (divergence recovery) ------------------------------------

    def state_copy(self) -> dict:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict):
        for k, v in self._params.items():
            if k not in state:
                raise KeyError(f"missing parameter in state: {k}")
            if state[k].shape != v.data.shape:
                raise ValueError(f"shape mismatch for {k}")
            v.data = state[k].astype(v.data.dtype, copy=True)

    # -- serialization ------------------------------------------------------

    def save(self, path):
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", VERSION, len(self._params)))
            for name, t in self._params.items():
                nb = name.encode("utf-8")
                arr = np.ascontiguousarray(t.data, dtype="<f4")
                f.write(struct.pack("<H", len(nb)))
                f.write(nb)
                f.write(struct.pack("<B", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
                f.write(arr.tobytes(order="C"))

    @staticmethod
    def load(path) -> "ParameterStore":
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:4] != MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
        version, count = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        store = ParameterStore()
        off = 12
        try:
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", raw, off)
                off += 2
                name = raw[off:off + nlen].decode("utf-8")
                off += nlen
                (rank,) = struct.unpack_from("<B", raw, off)
                off += 1
                dims = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
                off += 4 * rank
                n = int(np.prod(dims)) if rank else 1
                arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
                off += 4 * n
                store.add(name, Tensor(arr.copy(), requires_grad=True, dtype=np.float32))
        except (struct.error, ValueError) as e:
            raise ValueError(f"{path}: truncated or corrupt checkpoint") from e
        if off != len(raw):
            raise ValueError(f"{path}: trailing bytes after last tensor")
        return store


def content_hash(path) -> str:
    """Git-style blob hash (sha1 over 'blob <size>\\0' + bytes) of a file."""
    with open(path, "rb") as f:
        data = f.read()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()
