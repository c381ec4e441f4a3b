"""Checkpoint container: named weight tensors plus training state.

Layout: magic, u32 header length, JSON header (format version, model config,
tensor manifest with byte offsets, optional extra state), raw row-major
little-endian payload, trailing SHA-256 of everything before it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, PreferencePolicy

MAGIC = b"PMDL"
VERSION = 1

_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}
_TORCH_TO_TAG = {torch.float32: "f4", torch.float64: "f8"}


def save_checkpoint(
    path: Path,
    model: PreferencePolicy,
    extra_state: dict | None = None,
    extra_tensors: dict[str, torch.Tensor] | None = None,
) -> None:
    tensors: dict[str, torch.Tensor] = dict(model.state_dict())
    for name, t in (extra_tensors or {}).items():
        tensors[f"extra/{name}"] = t

    manifest = []
    payload = bytearray()
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy()
        tag = _TORCH_TO_TAG[t.dtype]
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[tag])
        manifest.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": tag,
                "offset": len(payload),
            }
        )
        payload.extend(arr.tobytes())

    header = {
        "version": VERSION,
        "config": model.cfg.to_dict(),
        "manifest": manifest,
        "extra": extra_state or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<I", len(head)) + head + bytes(payload)
    digest = hashlib.sha256(body).digest()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(digest)
    tmp.replace(path)


def load_checkpoint(
    path: Path,
) -> tuple[PreferencePolicy, dict, dict[str, torch.Tensor]]:
    """Rebuild the model from a checkpoint; returns (model, extra_state,
    extra_tensors)."""
    blob = Path(path).read_bytes()
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checksum mismatch")
    if body[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (head_len,) = struct.unpack("<I", body[4:8])
    header = json.loads(body[8 : 8 + head_len])
    if header["version"] != VERSION:
        raise ValueError(f"{path}: unsupported version {header['version']}")
    payload = body[8 + head_len :]

    cfg = ModelConfig.from_dict(header["config"])
    model = PreferencePolicy(cfg)

    state = {}
    extra_tensors = {}
    for entry in header["manifest"]:
        dt = _DTYPES[entry["dtype"]]
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(
            payload, dtype=dt, count=n, offset=entry["offset"]
        ).reshape(entry["shape"])
        t = torch.from_numpy(arr.copy())
        name = entry["name"]
        if name.startswith("extra/"):
            extra_tensors[name[len("extra/") :]] = t
        else:
            state[name] = t
    dtype = next(iter(state.values())).dtype if state else torch.float32
    model = model.to(dtype)
    model.load_state_dict(state)
    return model, header["extra"], extra_tensors
