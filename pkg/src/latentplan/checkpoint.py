"""Bit-exact binary checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  b"LPCK"
    version u32
    config  u64 length + UTF-8 JSON
    count   u32 number of tensors
    per tensor:
        name  u16 length + UTF-8 bytes
        dtype u8 code (0=f32, 1=f64, 2=u8, 3=i64)
        ndim  u8, then ndim x u64 dims
        data  row-major little-endian payload
    rng     u64 length + UTF-8 JSON (hex-encoded generator states)

The payload byte order is pinned to little-endian regardless of host, so a
fixture file written once loads identically everywhere.  Loads validate every
length against the remaining bytes; a truncated or corrupt file raises
without any partial state escaping.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .plans import VariablePlan

MAGIC = b"LPCK"
VERSION = 1

_DTYPE_BY_CODE = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
    3: np.dtype("<i8"),
}
_CODE_BY_KIND = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.uint8): 2,
    np.dtype(np.int64): 3,
}


class CheckpointFormatError(RuntimeError):
    """Raised on bad magic, version mismatch, truncation, or corruption."""


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, torch.Tensor]
    rng: dict = field(default_factory=dict)


def _to_array(value: torch.Tensor | np.ndarray) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.ascontiguousarray(value)
    if arr.dtype not in _CODE_BY_KIND:
        raise CheckpointFormatError(f"unsupported tensor dtype {arr.dtype}")
    return arr


def save_checkpoint(
    path: str | Path,
    config: dict,
    tensors: Mapping[str, torch.Tensor | np.ndarray],
    rng: dict | None = None,
) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<Q", len(config_bytes)))
    chunks.append(config_bytes)
    chunks.append(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = _to_array(value)
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<BB", _CODE_BY_KIND[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        le = arr.astype(_DTYPE_BY_CODE[_CODE_BY_KIND[arr.dtype]], copy=False)
        chunks.append(le.tobytes(order="C"))
    rng_bytes = json.dumps(rng or {}, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<Q", len(rng_bytes)))
    chunks.append(rng_bytes)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise CheckpointFormatError(
                f"truncated checkpoint: needed {count} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}, expected {VERSION}")
    (config_len,) = reader.unpack("<Q")
    config = json.loads(reader.take(config_len).decode("utf-8"))
    (count,) = reader.unpack("<I")
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in _DTYPE_BY_CODE:
            raise CheckpointFormatError(f"unknown dtype code {code} for tensor {name!r}")
        shape = reader.unpack(f"<{ndim}Q")
        dtype = _DTYPE_BY_CODE[code]
        n_items = int(np.prod(shape, dtype=np.int64))  # empty shape -> scalar, prod 1
        payload = reader.take(n_items * dtype.itemsize)
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    (rng_len,) = reader.unpack("<Q")
    rng = json.loads(reader.take(rng_len).decode("utf-8"))
    if reader.pos != len(reader.data):
        raise CheckpointFormatError(
            f"{len(reader.data) - reader.pos} trailing bytes after checkpoint payload"
        )
    return Checkpoint(config=config, tensors=tensors, rng=rng)


def module_tensors(module: nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    """Flat name-to-tensor view of a module's state dict."""
    return {prefix + name: value for name, value in module.state_dict().items()}


def load_module(module: nn.Module, tensors: Mapping[str, torch.Tensor], prefix: str = "") -> None:
    state = {}
    for name, _ in module.state_dict().items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointFormatError(f"checkpoint is missing tensor {key!r}")
        state[name] = tensors[key]
    module.load_state_dict(state)


def plan_tensors(plan: VariablePlan) -> tuple[dict, dict[str, torch.Tensor]]:
    """Serialize a plan: header {n_max, d, n} + float32 V + byte mask s."""
    config = {"n_max": plan.V.shape[0], "d": plan.V.shape[1], "n": plan.n}
    tensors = {
        "plan.V": plan.V.to(torch.float32),
        "plan.s": plan.s.to(torch.uint8),
    }
    return config, tensors


def plan_from_checkpoint(ckpt: Checkpoint) -> VariablePlan:
    V = ckpt.tensors["plan.V"].to(torch.float32)
    s = ckpt.tensors["plan.s"].to(torch.float32)
    plan = VariablePlan(V=V, s=s, n=int(ckpt.config["n"]))
    plan.validate()
    return plan


def torch_gen_state_hex(gen: torch.Generator) -> str:
    return bytes(gen.get_state().numpy().tobytes()).hex()


def restore_torch_gen(hex_state: str) -> torch.Generator:
    gen = torch.Generator()
    state = torch.from_numpy(np.frombuffer(bytes.fromhex(hex_state), dtype=np.uint8).copy())
    gen.set_state(state)
    return gen
