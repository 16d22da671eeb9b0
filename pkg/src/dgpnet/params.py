"""Named parameter storage, initialization, Adam, and the binary checkpoint format."""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np

from .tensor import Tensor

MAGIC = b"DGPN"
FORMAT_VERSION = 1


class ParameterStore:
    """Trainable tensors plus non-trainable buffers (normalization running stats)."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def __contains__(self, name):
        return name in self.params or name in self.buffers

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __len__(self):
        return len(self.params)

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        if name in self:
            raise KeyError(f"duplicate buffer {name!r}")
        self.buffers[name] = np.array(data, dtype=np.float64)
        return self.buffers[name]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        """Gradient per parameter; parameters untouched by the last pass get zeros."""
        return {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in self.params.items()
        }

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, t in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        for k, b in self.buffers.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()

    def copy(self) -> "ParameterStore":
        other = ParameterStore()
        for k, t in self.params.items():
            other.add(k, t.data)
        for k, b in self.buffers.items():
            other.add_buffer(k, b)
        return other

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, t.data) for k, t in self.params.items())
        out.update(self.buffers)
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray]):
        """Overwrite values in place; names and shapes must match exactly."""
        expected = set(self.params) | set(self.buffers)
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise ValueError(f"checkpoint mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, a in arrays.items():
            target = self.params[k].data if k in self.params else self.buffers[k]
            if target.shape != a.shape:
                raise ValueError(f"checkpoint shape mismatch for {k}: {a.shape} vs {target.shape}")
            target[...] = a

    def save(self, path):
        save_checkpoint(path, self.arrays())

    def load(self, path):
        self.load_arrays(load_checkpoint(path))


# ---------------------------------------------------------------- initializers


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """He-style uniform: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_conv(store: ParameterStore, name: str, rng, k: int, cin: int, cout: int, bias: bool = False):
    store.add(f"{name}.w", fan_in_uniform(rng, (k, k, cin, cout), k * k * cin))
    if bias:
        store.add(f"{name}.b", np.zeros(cout))


def add_linear(store: ParameterStore, name: str, rng, din: int, dout: int):
    store.add(f"{name}.w", fan_in_uniform(rng, (din, dout), din))
    store.add(f"{name}.b", np.zeros(dout))


def add_norm(store: ParameterStore, name: str, channels: int):
    store.add(f"{name}.gamma", np.ones(channels))
    store.add(f"{name}.beta", np.zeros(channels))
    store.add_buffer(f"{name}.running_mean", np.zeros(channels))
    store.add_buffer(f"{name}.running_var", np.ones(channels))


# ------------------------------------------------------------------------ Adam


class Adam:
    """Bias-corrected Adam over every parameter of a store; one shared step counter."""

    def __init__(self, store: ParameterStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in store.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in store.params.items()}

    def step(self, grads: Optional[Mapping[str, np.ndarray]] = None):
        if grads is None:
            grads = self.store.grads()
        for k, g in grads.items():
            if k not in self.store.params:
                raise KeyError(f"gradient for unknown parameter {k!r}")
            if g.shape != self.store.params[k].shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {self.store.params[k].shape}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.lr == 0.0:
                continue
            p = self.store.params[k].data
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------------ checkpoint


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]):
    """Write arrays as: b"DGPN", u32 version, then per record
    u32 name length, name (utf-8), u32 rank, u64 extents, little-endian f64 data."""
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, a in arrays.items():
        raw = name.encode("utf-8")
        a = np.asarray(a, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a DGPN checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out = OrderedDict()
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 8 * count > len(buf):
                raise ValueError("payload overruns file")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out
