"""Binary container used by datasets, knowledge bases and checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes, identifies the artifact kind
    version      uint32
    header_len   uint32
    header       header_len bytes of UTF-8 JSON (sorted keys); its "blocks" entry lists
                 name, dtype ("<f4", "<f8" or "<i8") and shape of every array block
    blocks       raw little-endian array data, concatenated in header order
    checksum     32-byte SHA-256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from ragdp.errors import CorruptedFileError, FormatError

_ALLOWED = {"<f4", "<f8", "<i8"}


def encode(magic: bytes, version: int, header: dict, blocks: dict[str, tuple[str, np.ndarray]]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    specs, payload = [], []
    for name, (dtype, arr) in blocks.items():
        if dtype not in _ALLOWED:
            raise ValueError(f"unsupported block dtype {dtype}")
        arr = np.ascontiguousarray(arr, dtype=np.dtype(dtype))
        specs.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    header = dict(header, blocks=specs)
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = magic + struct.pack("<II", version, len(text)) + text + b"".join(payload)
    return body + hashlib.sha256(body).digest()


def decode(data: bytes, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 8 + 8 + 32 or data[:8] != magic:
        raise FormatError(f"not a {magic.rstrip(bytes(1)).decode()} file")
    body, digest = data[:-32], data[-32:]
    file_version, header_len = struct.unpack("<II", body[8:16])
    if file_version != version:
        raise FormatError(f"unsupported version {file_version} (expected {version})")
    if hashlib.sha256(body).digest() != digest:
        raise CorruptedFileError("checksum mismatch")
    pos = 16 + header_len
    header = json.loads(body[16:pos].decode("utf-8"))
    blocks = {}
    for spec in header.pop("blocks"):
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=pos).reshape(spec["shape"])
        blocks[spec["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
        pos += nbytes
    if pos != len(body):
        raise CorruptedFileError("trailing bytes after last block")
    return header, blocks


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
