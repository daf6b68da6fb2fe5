"""Named parameter collections with binary save/load.

A ``ParameterStore`` maps string names to float64 ``Tensor`` leaves.  The
on-disk format is deliberately dumb: a magic tag, a version, and per entry
the UTF-8 name, rank, dims, and raw little-endian float64 data.  Loading a
file and saving it again reproduces the original bytes, which the
reproducibility checks rely on.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct

import numpy as np

from .autodiff import Tensor

MAGIC = b"RTXP"
VERSION = 1


class FormatError(ValueError):
    """Raised when a parameter file has the wrong magic, version, or layout."""


class ParameterStore:
    """Ordered name -> Tensor map with trainability flags."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name: {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=trainable)
        self._tensors[name] = t
        self._trainable[name] = bool(trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_items(self):
        for name, t in self._tensors.items():
            if self._trainable[name]:
                yield name, t

    def set_trainable(self, trainable: bool, prefix: str = ""):
        """Flip trainability (and grad recording) for names under prefix."""
        for name, t in self._tensors.items():
            if name.startswith(prefix):
                self._trainable[name] = trainable
                t.requires_grad = trainable

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    # -- serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", VERSION, len(self._tensors)))
        for name, t in self._tensors.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(t.data, dtype="<f8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParameterStore":
        buf = io.BytesIO(blob)

        def read(n: int) -> bytes:
            chunk = buf.read(n)
            if len(chunk) != n:
                raise FormatError("truncated parameter data")
            return chunk

        if read(4) != MAGIC:
            raise FormatError("bad magic, not a parameter file")
        version, count = struct.unpack("<II", read(8))
        if version != VERSION:
            raise FormatError(f"unsupported parameter format version {version}")
        store = cls()
        for _ in range(count):
            (name_len,) = struct.unpack("<I", read(4))
            name = read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", read(4))
            shape = struct.unpack(f"<{rank}Q", read(8 * rank))
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(read(8 * size), dtype="<f8").reshape(shape)
            store.add(name, arr.astype(np.float64))
        if buf.read(1):
            raise FormatError("trailing bytes after last parameter entry")
        return store

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParameterStore":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def checksum(self) -> str:
        """SHA-256 over the serialized bytes; used for freeze contracts."""
        return hashlib.sha256(self.to_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Initializers
# ---------------------------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def add_linear(store: ParameterStore, prefix: str, out_dim: int, in_dim: int,
               rng: np.random.Generator):
    """Register an affine layer: weight (out, in) + zero bias (out,)."""
    store.add(f"{prefix}.w", xavier_uniform(rng, (out_dim, in_dim), in_dim, out_dim))
    store.add(f"{prefix}.b", np.zeros(out_dim))


def add_lstm(store: ParameterStore, prefix: str, input_dim: int, hidden_dim: int,
             rng: np.random.Generator):
    """Register one LSTM layer's weights.

    Gate blocks are [input | forget | cell | output]; the forget-gate bias
    starts at +1 so early training does not wash out the cell state.
    """
    store.add(f"{prefix}.wx",
              xavier_uniform(rng, (input_dim, 4 * hidden_dim), input_dim, hidden_dim))
    store.add(f"{prefix}.wh",
              xavier_uniform(rng, (hidden_dim, 4 * hidden_dim), hidden_dim, hidden_dim))
    b = np.zeros(4 * hidden_dim)
    b[hidden_dim:2 * hidden_dim] = 1.0
    store.add(f"{prefix}.b", b)


def add_embedding(store: ParameterStore, name: str, vocab: int, dim: int,
                  rng: np.random.Generator):
    store.add(name, xavier_uniform(rng, (vocab, dim), vocab, dim))
