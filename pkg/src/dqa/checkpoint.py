"""Binary container for checkpoints and exported models.

Layout: 8-byte magic, one format-version byte, a length-prefixed JSON
header, raw little-endian array payloads (shapes and dtypes listed in the
header), and a trailing CRC-32 over everything before it. Writes are
atomic: temp file, fsync, rename.
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

FORMAT_VERSION = 1

_DTYPES = {"f8": "<f8", "u1": "<u1", "u2": "<u2", "i8": "<i8"}


class CheckpointError(ValueError):
    """Unreadable or corrupt container file."""


def _dtype_tag(arr: np.ndarray) -> str:
    for tag, np_dtype in _DTYPES.items():
        if arr.dtype == np.dtype(np_dtype):
            return tag
    raise CheckpointError(f"unsupported array dtype {arr.dtype}")


def write_container(path, magic: bytes, header: dict, arrays: list[np.ndarray]):
    if len(magic) != 8:
        raise CheckpointError("magic must be 8 bytes")
    manifest = [{"shape": list(a.shape), "dtype": _dtype_tag(np.ascontiguousarray(a))}
                for a in arrays]
    full_header = dict(header)
    full_header["__arrays__"] = manifest
    header_bytes = json.dumps(full_header).encode("utf-8")
    blob = bytearray()
    blob += magic
    blob += struct.pack("<B", FORMAT_VERSION)
    blob += struct.pack("<I", len(header_bytes))
    blob += header_bytes
    for a in arrays:
        blob += np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_container(path, magic: bytes) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 17:
        raise CheckpointError(f"{path}: truncated container")
    body, (crc_stored,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: checksum mismatch")
    if body[:8] != magic:
        raise CheckpointError(f"{path}: bad magic {body[:8]!r}, expected {magic!r}")
    (version,) = struct.unpack("<B", body[8:9])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (header_len,) = struct.unpack("<I", body[9:13])
    header_end = 13 + header_len
    if header_end > len(body):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(body[13:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    manifest = header.pop("__arrays__", [])
    arrays = []
    offset = header_end
    for entry in manifest:
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated payload")
        arr = np.frombuffer(body[offset:offset + nbytes], dtype=dtype).reshape(entry["shape"])
        arrays.append(arr.copy())
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing payload bytes")
    return header, arrays
