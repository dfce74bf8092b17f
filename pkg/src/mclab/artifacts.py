"""Binary artifact container plus checkpoint save/load.

The container is a deliberately boring format (JSON header + raw float
buffers) so that save -> load -> save is byte-identical, which keeps content
hashes meaningful across stages.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .model import EncoderPair, ModelConfig, build_model

CHECKPOINT_MAGIC = b"MCLCKPT1"
TRIGGER_MAGIC = b"MCLTRIG1"
CHECKPOINT_FORMAT_VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


def write_container(magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    head = dict(header)
    head["arrays"] = [
        {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        for name, arr in arrays.items()
    ]
    head_bytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    out = bytearray()
    out += magic
    out += struct.pack("<I", len(head_bytes))
    out += head_bytes
    for arr in arrays.values():
        out += np.ascontiguousarray(arr).tobytes()
    return bytes(out)


def read_container(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != magic:
        raise ValueError(f"bad magic {blob[:8]!r}, expected {magic!r}")
    (head_len,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + head_len].decode())
    arrays = {}
    offset = 12 + head_len
    for meta in header["arrays"]:
        dtype = _DTYPES[meta["dtype"]]
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        nbytes = count * np.dtype(dtype).itemsize
        arr = np.frombuffer(blob[offset:offset + nbytes], dtype=dtype).reshape(meta["shape"])
        arrays[meta["name"]] = arr.copy()
        offset += nbytes
    return header, arrays


def serialize_model(pair: EncoderPair) -> bytes:
    state = {}
    for prefix, module in (("visual", pair.visual), ("textual", pair.textual)):
        for key, tensor in module.state_dict().items():
            state[f"{prefix}.{key}"] = tensor.detach().cpu().numpy()
    arrays = {k: state[k] for k in sorted(state)}
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "temperature": pair.temperature,
        "model_config": asdict(pair.config),
    }
    return write_container(CHECKPOINT_MAGIC, header, arrays)


def deserialize_model(blob: bytes) -> EncoderPair:
    header, arrays = read_container(blob, CHECKPOINT_MAGIC)
    if header["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['format_version']}")
    cfg_dict = dict(header["model_config"])
    cfg_dict["conv_channels"] = tuple(cfg_dict["conv_channels"])
    cfg = ModelConfig(**cfg_dict)
    pair = build_model(cfg, seed=0)
    pair.temperature = float(header["temperature"])
    visual_state, textual_state = {}, {}
    for name, arr in arrays.items():
        prefix, key = name.split(".", 1)
        tensor = torch.from_numpy(arr)
        (visual_state if prefix == "visual" else textual_state)[key] = tensor
    pair.visual.load_state_dict(visual_state)
    pair.textual.load_state_dict(textual_state)
    for p in pair.parameters():
        if not torch.isfinite(p).all():
            raise ValueError("checkpoint contains non-finite parameters")
    return pair


def save_checkpoint(pair: EncoderPair, path: str | Path) -> str:
    """Write the model to `path`; returns the content hash."""
    blob = serialize_model(pair)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: str | Path) -> EncoderPair:
    return deserialize_model(Path(path).read_bytes())


def model_hash(pair: EncoderPair) -> str:
    return hashlib.sha256(serialize_model(pair)).hexdigest()


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
