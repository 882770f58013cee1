"""Checkpoint files: named float64 tensors plus a JSON manifest.

Layout::

    b"STINGCK1"                      8-byte magic
    uint64 little-endian             header length in bytes
    header (UTF-8 JSON, sorted)      {"manifest": {...},
                                      "tensors": [{"name", "shape", "offset"}]}
    data                             little-endian float64, row-major,
                                      offsets relative to the data start
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np
import torch

MAGIC = b"STINGCK1"


class CheckpointError(RuntimeError):
    pass


def encode(tensors: Mapping[str, Union[np.ndarray, torch.Tensor]], manifest: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    # sorted names make the bytes independent of insertion order
    for name, value in sorted(tensors.items()):
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.ascontiguousarray(value, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"manifest": manifest, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + n])
    base = 16 + n
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        tensors[e["name"]] = data.reshape(e["shape"]).copy()
    return tensors, header["manifest"]


def save(path: Union[str, Path], tensors, manifest: dict) -> str:
    """Write the checkpoint and return its sha256."""
    blob = encode(tensors, manifest)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: Union[str, Path]) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())


def file_hash(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: Mapping[str, np.ndarray], prefix: str):
    """Copy ``prefix.*`` tensors into ``module``; any mismatch is an error."""
    own = module.state_dict()
    wanted = {f"{prefix}.{k}" for k in own}
    present = {k for k in tensors if k.startswith(prefix + ".")}
    if wanted != present:
        missing = sorted(wanted - present)
        extra = sorted(present - wanted)
        raise CheckpointError(f"parameter set mismatch for {prefix}: missing {missing}, extra {extra}")
    new_state = {}
    for k, ref in own.items():
        arr = tensors[f"{prefix}.{k}"]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(
                f"shape mismatch for {prefix}.{k}: checkpoint {tuple(arr.shape)}, "
                f"model {tuple(ref.shape)}"
            )
        new_state[k] = torch.from_numpy(arr).to(ref.dtype)
    module.load_state_dict(new_state)
