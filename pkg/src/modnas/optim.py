"""Parameter storage, ADAM updates, the cosine schedule and the checkpoint container."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import Tensor

__all__ = [
    "OptimizerConfig",
    "ParamEntry",
    "ParamStore",
    "adam_step",
    "adam_update",
    "cosine_lr",
    "CheckpointError",
    "write_container",
    "read_container",
]


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    total_epochs: int = 140

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")


@dataclass
class ParamEntry:
    tensor: Tensor
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamStore:
    """Named trainable tensors together with their ADAM moment buffers."""

    entries: dict[str, ParamEntry] = field(default_factory=dict)

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(data, dtype=np.float32) if not np.issubdtype(np.asarray(data).dtype, np.floating) \
            else np.array(data)
        t = Tensor(arr, requires_grad=True, name=name)
        self.entries[name] = ParamEntry(t, np.zeros_like(arr), np.zeros_like(arr))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return ((k, e.tensor) for k, e in self.entries.items())

    def tensors(self) -> list[Tensor]:
        return [e.tensor for e in self.entries.values()]

    def numel(self) -> int:
        return sum(e.tensor.data.size for e in self.entries.values())

    def zero_grad(self) -> None:
        for e in self.entries.values():
            e.tensor.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for e in self.entries.values():
            e.tensor.requires_grad = flag

    def to_arrays(self, prefix: str = "") -> tuple[dict[str, np.ndarray], dict[str, int]]:
        """Flatten values and moments into a name -> array map plus step counts."""
        arrays, steps = {}, {}
        for name, e in self.entries.items():
            arrays[f"{prefix}{name}"] = e.tensor.data
            arrays[f"{prefix}{name}@m"] = e.m
            arrays[f"{prefix}{name}@v"] = e.v
            steps[f"{prefix}{name}"] = e.step
        return arrays, steps

    def load_arrays(self, arrays: dict[str, np.ndarray], steps: dict[str, int], prefix: str = "") -> None:
        """Overwrite values and moments in place; every entry must be present."""
        for name, e in self.entries.items():
            key = f"{prefix}{name}"
            if key not in arrays:
                raise KeyError(f"checkpoint is missing {key!r}")
            for slot, arr in (("", e.tensor.data), ("@m", e.m), ("@v", e.v)):
                src = arrays.get(key + slot)
                if src is None:
                    raise KeyError(f"checkpoint is missing {key + slot!r}")
                if src.shape != arr.shape:
                    raise ValueError(f"shape mismatch for {key + slot!r}: {src.shape} vs {arr.shape}")
                arr[...] = src
            e.step = int(steps.get(key, 0))


def adam_step(store: ParamStore, name: str, grad: np.ndarray, lr: float,
              cfg: OptimizerConfig | None = None) -> ParamEntry:
    """One bias-corrected ADAM update of ``store[name]`` in place."""
    cfg = cfg or OptimizerConfig()
    e = store.entries[name]
    theta = e.tensor.data
    if grad.shape != theta.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameter {theta.shape}")
    e.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    e.m *= b1
    e.m += (1 - b1) * grad
    e.v *= b2
    e.v += (1 - b2) * grad * grad
    m_hat = e.m / (1 - b1 ** e.step)
    v_hat = e.v / (1 - b2 ** e.step)
    theta -= (lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(theta.dtype)
    return e


def adam_update(store: ParamStore, lr: float, cfg: OptimizerConfig | None = None) -> None:
    """ADAM-update every entry of ``store`` that received a gradient."""
    for name, e in store.entries.items():
        if e.tensor.grad is not None:
            adam_step(store, name, e.tensor.grad, lr, cfg)


def cosine_lr(epoch: int, cfg: OptimizerConfig) -> float:
    """Cosine annealing from ``lr_max`` at epoch 0 to ``lr_min`` at ``total_epochs``."""
    if not 0 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * epoch / cfg.total_epochs))


# ---------------------------------------------------------------------------
# container: magic, u64 index length, JSON index, raw little-endian payload

_MAGIC = b"MODNASPS"


class CheckpointError(ValueError):
    pass


def write_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    index, offset, chunks = [], 0, []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({"arrays": index, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in chunks:
            fh.write(raw)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a parameter container (bad magic)")
    if len(blob) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", blob[8:16])
    if 16 + n > len(blob):
        raise CheckpointError(f"{path}: truncated index")
    try:
        head = json.loads(blob[16 : 16 + n].decode("utf-8"))
        entries = head["arrays"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt index ({exc})") from exc
    payload = memoryview(blob)[16 + n :]
    arrays = {}
    for ent in entries:
        try:
            start, size, dtype = int(ent["offset"]), int(ent["nbytes"]), np.dtype(ent["dtype"])
            shape = tuple(int(s) for s in ent["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: corrupt index entry {ent!r}") from exc
        if start < 0 or start + size > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {ent['name']!r}")
        if size != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"{path}: size of {ent['name']!r} disagrees with its shape")
        arr = np.frombuffer(payload[start : start + size], dtype=dtype).reshape(shape)
        arrays[ent["name"]] = arr.astype(dtype.newbyteorder("="))
    return arrays, head.get("meta", {})
