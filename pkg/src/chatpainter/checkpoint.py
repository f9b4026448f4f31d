"""Versioned binary checkpoint container.

Layout: magic, format version, a JSON header (meta dict plus one manifest
entry per parameter group: name, shape, dtype, byte offset, length, crc32),
then the concatenated raw payload. Loading verifies every checksum, so a
round trip is bit-exact or it fails loudly.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"CPCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed or corrupted checkpoint files."""


def save_checkpoint(path, groups: dict[str, np.ndarray], meta: dict) -> None:
    """Write parameter groups (name -> array) plus a JSON-serializable meta dict."""
    entries = []
    payload = bytearray()
    for name, arr in groups.items():
        arr = np.asarray(arr)
        shape = list(arr.shape)
        arr = np.ascontiguousarray(arr)  # promotes 0-d to 1-d, hence shape above
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "shape": shape,
                "dtype": str(arr.dtype),
                "offset": len(payload),
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            }
        )
        payload.extend(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": meta, "groups": entries}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, 0))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(bytes(payload))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read groups and meta back; verifies magic, version and every crc32."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, _ = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (header_len,) = struct.unpack("<Q", blob[12:20])
    try:
        header = json.loads(blob[20 : 20 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    payload = blob[20 + header_len :]
    groups: dict[str, np.ndarray] = {}
    for entry in header["groups"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload at group {entry['name']}")
        if zlib.crc32(raw) != entry["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch in group {entry['name']}")
        groups[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return groups, header["meta"]


def module_groups(prefix: str, module) -> dict[str, np.ndarray]:
    """Flatten a torch module's state dict (parameters and buffers) to arrays."""
    out = {}
    for key, tensor in module.state_dict().items():
        out[f"{prefix}.{key}"] = tensor.detach().cpu().numpy()
    return out


def load_module_groups(prefix: str, module, groups: dict[str, np.ndarray]) -> None:
    """Inverse of module_groups; shape/type mismatches raise CheckpointError."""
    import torch

    state = {}
    want = module.state_dict()
    for key, ref in want.items():
        name = f"{prefix}.{key}"
        if name not in groups:
            raise CheckpointError(f"checkpoint missing group {name}")
        arr = groups[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"group {name}: shape {arr.shape} != expected {tuple(ref.shape)}")
        state[key] = torch.from_numpy(arr).to(ref.dtype)
    module.load_state_dict(state)


def optimizer_groups(prefix: str, optimizer, named_params: list[tuple[str, object]]) -> dict[str, np.ndarray]:
    """Serialize Adam moments per named parameter (skips unstepped params)."""
    out = {}
    by_id = {id(p): name for name, p in named_params}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = by_id.get(id(p))
            if name is None:
                continue
            out[f"{prefix}.{name}.step"] = np.asarray(float(state["step"]))
            out[f"{prefix}.{name}.exp_avg"] = state["exp_avg"].detach().cpu().numpy()
            out[f"{prefix}.{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
    return out
