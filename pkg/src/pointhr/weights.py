"""Named weight tensors, seeded initialization and the PHRW binary format.

File layout (little-endian)::

    b"PHRW" | u32 version (=1) | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | rank x u32 dims
                | row-major float32 values
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"PHRW"
VERSION = 1


class WeightFormatError(ValueError):
    pass


class WeightStore(Mapping[str, np.ndarray]):
    """Immutable mapping from tensor name to a float64 array."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]):
        items = tensors.items() if isinstance(tensors, Mapping) else tensors
        self._tensors: dict[str, np.ndarray] = {}
        for name, value in items:
            if name in self._tensors:
                raise ValueError(f"duplicate tensor name {name!r}")
            arr = np.array(value, dtype=np.float64, copy=True)
            arr.setflags(write=False)
            self._tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"missing weight tensor {name!r}") from None

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightStore) or list(self) != list(other):
            return False
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.values(), other.values()))

    __hash__ = None

    @property
    def num_elements(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix.`` keyed by the remainder of their name."""
        head = prefix + "."
        return {k[len(head):]: v for k, v in self._tensors.items() if k.startswith(head)}

    def replace(self, updates: Mapping[str, np.ndarray]) -> "WeightStore":
        """New store with some tensors swapped; shapes must not change."""
        merged = dict(self._tensors)
        for name, value in updates.items():
            old = self[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != old.shape:
                raise ValueError(f"{name}: shape {value.shape} != {old.shape}")
            merged[name] = value
        return WeightStore(merged)

    def map(self, fn, select=lambda name: True) -> "WeightStore":
        """Apply ``fn(name, array)`` to every selected tensor."""
        return self.replace({k: fn(k, v) for k, v in self._tensors.items() if select(k)})


def tensor_rng(seed: int, name: str) -> np.random.Generator:
    """Counter-based generator keyed by (seed, tensor name); independent of call order."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    digest = int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")
    return np.random.Generator(np.random.Philox(key=(seed % 2**64) << 64 | digest))


def init_tensor(seed: int, name: str, shape: tuple[int, ...], kind: str) -> np.ndarray:
    if kind == "weight":
        bound = 1.0 / np.sqrt(shape[0])
        values = tensor_rng(seed, name).uniform(-bound, bound, size=shape)
        # float32-representable so that a save/load round trip is exact
        return values.astype(np.float32).astype(np.float64)
    if kind == "ones":
        return np.ones(shape)
    return np.zeros(shape)


def init_weights(config, seed: int) -> WeightStore:
    """Seeded initialization of every tensor the architecture declares."""
    from .model import build_model

    graph = build_model(config)
    return WeightStore((p.name, init_tensor(seed, p.name, p.shape, p.init)) for p in graph.params)


def save_weights(store: WeightStore, path) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(store))]
    for name, arr in store.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise WeightFormatError(f"tensor {name!r} cannot be encoded")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFormatError(f"unexpected end of file while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_weights(path) -> WeightStore:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4, "magic") != MAGIC:
        raise WeightFormatError("bad magic: not a PHRW weight file")
    version, count = reader.unpack("<II", "header")
    if version != VERSION:
        raise WeightFormatError(f"unsupported PHRW version {version}")
    tensors = []
    for i in range(count):
        (nlen,) = reader.unpack("<H", f"name length of tensor #{i}")
        try:
            name = reader.take(nlen, f"name of tensor #{i}").decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFormatError(f"tensor #{i}: name is not valid UTF-8") from None
        (rank,) = reader.unpack("<B", f"rank of tensor {name!r}")
        dims = reader.unpack(f"<{rank}I", f"shape of tensor {name!r}")
        size = int(np.prod(dims, dtype=np.int64))
        raw = reader.take(4 * size, f"values of tensor {name!r}")
        values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
        tensors.append((name, values))
    if reader.pos != len(reader.data):
        raise WeightFormatError(
            f"trailing data after {count} tensors (header count does not match contents)")
    try:
        return WeightStore(tensors)
    except ValueError as exc:
        raise WeightFormatError(str(exc)) from None
