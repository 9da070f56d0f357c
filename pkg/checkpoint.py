"""
Checkpoint Container - versioned named-tensor file format
Layout: 8-byte little-endian header length, UTF-8 JSON header, raw
little-endian tensor bytes. Every model in the tool persists through here.
"""

import json
import logging
import struct
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

FORMAT_NAME = "gammaldm-ckpt"
FORMAT_VERSION = 1
METADATA_KEY = "__metadata__"

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "int32": (torch.int32, "<i4"),
    "uint8": (torch.uint8, "|u1"),
    "bool": (torch.bool, "|b1"),
}
_TORCH_TO_NAME = {torch_dtype: name for name, (torch_dtype, _) in _DTYPES.items()}


class CheckpointError(ValueError):
    """Unreadable, foreign or version-incompatible checkpoint file"""


def save_checkpoint(path, tensors, metadata=None):
    """
    Write named tensors to a container file

    Args:
        path: output file path
        tensors: dict name -> torch.Tensor
        metadata: JSON-serialisable dict stored under __metadata__

    Returns:
        Path of the written file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    header = {
        METADATA_KEY: {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            **(metadata or {}),
        }
    }
    blobs = []
    offset = 0
    for name in sorted(tensors):
        if name == METADATA_KEY:
            raise CheckpointError(f"Tensor name '{METADATA_KEY}' is reserved")
        tensor = tensors[name].detach().cpu().contiguous()
        if tensor.dtype not in _TORCH_TO_NAME:
            raise CheckpointError(f"Unsupported dtype {tensor.dtype} for '{name}'")
        dtype_name = _TORCH_TO_NAME[tensor.dtype]
        blob = tensor.numpy().astype(_DTYPES[dtype_name][1], copy=False).tobytes()
        header[name] = {
            "shape": list(tensor.shape),
            "dtype": dtype_name,
            "byte_offset": offset,
            "byte_length": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)

    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)

    logger.info(f"Checkpoint saved: {path} ({len(tensors)} tensors, {offset} bytes)")
    return path


def load_checkpoint(path):
    """
    Read a container file

    Returns:
        (tensors dict, metadata dict)
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")

    raw = path.read_bytes()
    if len(raw) < 8:
        raise CheckpointError(f"Truncated checkpoint: {path}")
    (header_len,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint header in {path}: {e}") from e

    metadata = header.pop(METADATA_KEY, {})
    if metadata.get("format") != FORMAT_NAME:
        raise CheckpointError(f"Not a {FORMAT_NAME} file: {path}")
    if metadata.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint version {metadata.get('version')} (expected {FORMAT_VERSION})"
        )

    data_start = 8 + header_len
    tensors = {}
    for name, entry in header.items():
        torch_dtype, np_dtype = _DTYPES[entry["dtype"]]
        start = data_start + entry["byte_offset"]
        chunk = raw[start:start + entry["byte_length"]]
        if len(chunk) != entry["byte_length"]:
            raise CheckpointError(f"Truncated data for '{name}' in {path}")
        array = np.frombuffer(chunk, dtype=np_dtype).reshape(entry["shape"])
        tensors[name] = torch.from_numpy(array.copy()).to(torch_dtype)

    return tensors, metadata


def save_module(path, module, metadata=None):
    """Persist an nn.Module state dict (parameters and buffers)"""
    return save_checkpoint(path, dict(module.state_dict()), metadata)


def load_module_state(path, module):
    """Load a container into an existing nn.Module; returns the metadata"""
    tensors, metadata = load_checkpoint(path)
    module.load_state_dict(tensors)
    return metadata
