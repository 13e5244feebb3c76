"""AdamW with decoupled weight decay, optional warmup + cosine schedule.

Optimizer state serializes to a sibling binary format (magic ``VPPO``):
u32 version, u32 step count, five f64 hyperparameters, u32 entry count,
then per parameter the name (u16 length + UTF-8), u8 rank, u32 dims and
the two float32 moment payloads (m then v).
"""

from __future__ import annotations

import math
import struct

import numpy as np

OPT_MAGIC = b"VPPO"
OPT_VERSION = 1


class WarmupCosineSchedule:
    """Linear warmup to ``peak`` over ``warmup`` steps, cosine decay after.

    ``lr_at`` takes the 1-based step index; lr_at(warmup) == peak exactly,
    and the final step lands on peak * floor.
    """

    def __init__(self, peak: float, total_steps: int, warmup: int = 0, floor: float = 0.0):
        if total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not 0 <= warmup < total_steps:
            raise ValueError("warmup must lie in [0, total_steps)")
        self.peak = float(peak)
        self.total_steps = int(total_steps)
        self.warmup = int(warmup)
        self.floor = float(floor)

    def lr_at(self, step: int) -> float:
        if step < 1:
            raise ValueError("steps are 1-based")
        if self.warmup and step <= self.warmup:
            return self.peak * step / self.warmup
        span = self.total_steps - self.warmup
        frac = (min(step, self.total_steps) - self.warmup) / span
        cos = 0.5 * (1.0 + math.cos(math.pi * frac))
        return self.peak * (self.floor + (1.0 - self.floor) * cos)


class AdamW:
    def __init__(self, store, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, schedule: WarmupCosineSchedule | None = None):
        self.store = store
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.schedule = schedule
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def zero_grad(self):
        self.store.zero_grad()

    def step(self) -> int:
        """Apply one update.  Returns how many parameters had no gradient
        and were skipped; gradients are cleared afterwards."""
        self.t += 1
        lr = self.schedule.lr_at(self.t) if self.schedule is not None else self.lr
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        skipped = 0
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                skipped += 1
                continue
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update
            p.grad = None
        return skipped

    # -- serialization ------------------------------------------------------

    def save_state(self, path):
        with open(path, "wb") as f:
            f.write(OPT_MAGIC)
            f.write(struct.pack("<II", OPT_VERSION, self.t))
            f.write(struct.pack("<5d", self.lr, self.beta1, self.beta2,
                                self.eps, self.weight_decay))
            f.write(struct.pack("<I", len(self._m)))
            for name, m in self._m.items():
                nb = name.encode("utf-8")
                f.write(struct.pack("<H", len(nb)))
                f.write(nb)
                f.write(struct.pack("<B", m.ndim))
                f.write(struct.pack(f"<{m.ndim}I", *m.shape) if m.ndim else b"")
                f.write(np.ascontiguousarray(m, dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(self._v[name], dtype="<f4").tobytes())

    def load_state(self, path):
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:4] != OPT_MAGIC:
            raise ValueError(f"{path}: not an optimizer state file")
        version, t = struct.unpack_from("<II", raw, 4)
        if version != OPT_VERSION:
            raise ValueError(f"{path}: unsupported optimizer state version {version}")
        off = 12
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = \
            struct.unpack_from("<5d", raw, off)
        off += 40
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        self.t = t
        self._m.clear()
        self._v.clear()
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
            self._m[name] = np.frombuffer(raw, "<f4", n, off).reshape(dims).copy()
            off += 4 * n
            self._v[name] = np.frombuffer(raw, "<f4", n, off).reshape(dims).copy()
            off += 4 * n
