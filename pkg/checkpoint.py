"""
Binary checkpoints and PiT dumps.

Layout (all integers little-endian u32):

    b"DOTCKPT1"
    len(config_json)  config_json (UTF-8, sorted keys)
    tensor_count
    per tensor: len(name) name  ndim  dims...  float32 payload (row-major, '<f4')
"""

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DOTCKPT1"
_U32 = np.dtype("<u4")
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint."""


def _u32(value: int) -> bytes:
    return np.array([value], dtype=_U32).tobytes()


def encode_checkpoint(tensors, config: dict) -> bytes:
    parts = [MAGIC]
    cfg = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    parts += [_u32(len(cfg)), cfg, _u32(len(tensors))]
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
        # ascontiguousarray promotes 0-d buffers to (1,)
        arr = np.asarray(arr, dtype=_F32, order="C")
        raw = name.encode("utf-8")
        parts += [_u32(len(raw)), raw, _u32(arr.ndim)]
        parts += [_u32(dim) for dim in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, source):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return int(np.frombuffer(self.take(4), dtype=_U32)[0])


def decode_checkpoint(data: bytes, source="<bytes>"):
    """-> (OrderedDict name -> float32 ndarray, config dict)."""
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: bad magic")
    r = _Reader(data, source)
    r.take(len(MAGIC))
    try:
        config = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: unreadable config echo ({e})")
    tensors = OrderedDict()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(count * _F32.itemsize), dtype=_F32).reshape(shape).copy()
    if r.pos != len(data):
        raise CheckpointError(f"{source}: trailing bytes after last tensor")
    return tensors, config


def save_checkpoint(params, config: dict, path) -> Path:
    """Write a module's state dict (or a name -> tensor mapping)."""
    tensors = params.state_dict() if isinstance(params, torch.nn.Module) else params
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(tensors, config))
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), source=path)


def load_into(module: torch.nn.Module, tensors) -> torch.nn.Module:
    """Copy checkpoint tensors into `module`, insisting on matching names and shapes."""
    state = module.state_dict()
    missing = [k for k in state if k not in tensors]
    unexpected = [k for k in tensors if k not in state]
    if missing or unexpected:
        raise CheckpointError(f"tensor names differ: missing {missing[:3]}, unexpected {unexpected[:3]}")
    for name, current in state.items():
        stored = tensors[name]
        if tuple(stored.shape) != tuple(current.shape):
            raise CheckpointError(f"tensor {name}: checkpoint shape {tuple(stored.shape)} "
                                  f"does not match model shape {tuple(current.shape)}")
    module.load_state_dict(OrderedDict(
        (name, torch.as_tensor(tensors[name]).to(state[name].dtype)) for name in state))
    return module


# ============================================================
# PiT DUMPS
# ============================================================

def dump_pit(pit, path, fmt: str = None) -> Path:
    """Shape header then row-major floats; `.csv` text or checkpoint encoding."""
    pit = np.asarray(pit, dtype=np.float64)
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "bin")
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        np.savetxt(path, pit.reshape(-1, pit.shape[-1]), delimiter=",", fmt="%.9g",
                   header=",".join(str(s) for s in pit.shape), comments="")
    elif fmt == "bin":
        path.write_bytes(encode_checkpoint({"pit": pit}, {"kind": "pit"}))
    else:
        raise CheckpointError(f"unknown PiT dump format: {fmt}")
    return path


def load_pit(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with path.open(encoding="utf-8") as fh:
            shape = tuple(int(s) for s in fh.readline().strip().split(","))
        return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2).reshape(shape)
    tensors, _ = load_checkpoint(path)
    if "pit" not in tensors:
        raise CheckpointError(f"{path}: no PiT tensor")
    return tensors["pit"].astype(np.float64)
