"""Binary parameter container shared by checkpoints and auxiliary files.

Layout (little-endian)::

    magic            7 bytes for checkpoints ("ONCKPT1"), 6 for auxiliaries ("ONAUX1")
    u32              byte length of the metadata block
    metadata         UTF-8 JSON; key "arrays" lists {"name", "shape"} in storage order
    arrays           raw f32 data for each listed array, back to back
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"ONCKPT1"
AUX_MAGIC = b"ONAUX1"


class ContainerError(ValueError):
    """A parameter file is malformed; the message names the offending field."""


def dumps(magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    meta = dict(meta)
    meta["arrays"] = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    block = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [magic, struct.pack("<I", len(block)), block]
    for v in arrays.values():
        parts.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(raw: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[: len(magic)] != magic:
        raise ContainerError(f"magic: expected {magic!r}, found {raw[:len(magic)]!r}")
    pos = len(magic)
    if len(raw) < pos + 4:
        raise ContainerError("metadata length: file truncated")
    (size,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) < pos + size:
        raise ContainerError("metadata: file truncated")
    try:
        meta = json.loads(raw[pos:pos + size].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ContainerError(f"metadata: unparseable ({err})") from None
    pos += size
    arrays: dict[str, np.ndarray] = {}
    for entry in meta.get("arrays", []):
        name, shape = entry["name"], tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if len(raw) < pos + nbytes:
            raise ContainerError(f"array '{name}': truncated ({len(raw) - pos} of {nbytes} bytes)")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(raw):
        raise ContainerError(f"trailing data: {len(raw) - pos} unexpected bytes")
    return meta, arrays


def save(path: str | Path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write atomically (temp file then rename)."""
    write_atomic(Path(path), dumps(magic, meta, arrays))


def load(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), magic)


def write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
