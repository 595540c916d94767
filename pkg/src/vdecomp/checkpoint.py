"""Self-describing, deterministic checkpoint files.

Layout::

    b"VDCK"                      magic
    uint32 LE                    header length n
    n bytes                      JSON header (sorted keys): version, config,
                                 tensors [{name, dtype, shape, nbytes}]
    tensor bytes                 raw little-endian, in header order
    32 bytes                     SHA-256 of everything above

Parameters and buffers are stored, so the batch-norm variant round-trips too.
Writing goes through a temporary file and a rename.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, CheckpointVersionError
from .network import Model, ModelConfig, build_model, config_dict

MAGIC = b"VDCK"
_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


def _payload(model: Model) -> bytes:
    state = model.state_dict()
    entries, blobs = [], []
    for name, t in state.items():
        arr = t.detach().cpu().contiguous().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {dtype} for {name}")
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "nbytes": len(data)})
        blobs.append(data)
    header = json.dumps(
        {"version": Model.FORMAT_VERSION, "config": config_dict(model.config), "tensors": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    body = MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: Model, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_payload(model))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> Model:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 4 + 32 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic or too short)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path} is corrupt or truncated (checksum mismatch)")
    (n,) = struct.unpack("<I", body[4:8])
    try:
        header = json.loads(body[8 : 8 + n])
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    version = header.get("version")
    if version != Model.FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version!r}, this build reads {Model.FORMAT_VERSION}")
    try:
        config = ModelConfig(**header["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid model config: {exc}") from exc
    state, offset = {}, 8 + n
    for entry in header["tensors"]:
        end = offset + entry["nbytes"]
        if end > len(body):
            raise CheckpointError(f"{path}: tensor data truncated")
        arr = np.frombuffer(body[offset:end], dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        state[entry["name"]] = torch.from_numpy(arr.astype(entry["dtype"]).reshape(entry["shape"]))
        offset = end
    if offset != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    # build_model leaves the global RNG untouched
    model = build_model(config, 0)
    float_dtypes = [e["dtype"] for e in header["tensors"] if e["dtype"].startswith("float")]
    if float_dtypes:
        model.to(_DTYPES[float_dtypes[0]])
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: tensors do not match config: {exc}") from exc
    return model
