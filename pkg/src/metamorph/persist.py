"""NMCK checkpoint format.

Layout (all integers little-endian)::

    b"NMCK" | u32 version | u32 manifest_len | manifest (UTF-8 JSON) | payload | u32 crc32(payload)

The manifest is ``{"meta": {...}, "tensors": [{"name", "dtype", "shape", "offset"}, ...]}``
with offsets relative to the payload start. Payload blobs are float32,
little-endian, row-major, packed in directory order without gaps.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"NMCK"
VERSION = 1
_HEAD = struct.Struct("<4sII")
_CRC = struct.Struct("<I")


def atomic_write(path, data: bytes) -> None:
    """Write via a temporary sibling then rename, so readers never see partial files."""
    path = os.fspath(path)
    tmp = f"{path}.tmp-{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    directory = []
    blobs = []
    offset = 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        directory.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    manifest = canonical_json({"meta": dict(meta or {}), "tensors": directory}).encode("utf-8")
    payload = b"".join(blobs)
    return _HEAD.pack(MAGIC, VERSION, len(manifest)) + manifest + payload + _CRC.pack(zlib.crc32(payload))


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < _HEAD.size + _CRC.size:
        raise FormatError("file too short for an NMCK checkpoint")
    magic, version, mlen = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported NMCK version {version}")
    start = _HEAD.size + mlen
    if start + _CRC.size > len(blob):
        raise FormatError("manifest runs past end of file")
    try:
        manifest = json.loads(blob[_HEAD.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from exc
    payload = blob[start:-_CRC.size]
    (crc,) = _CRC.unpack(blob[-_CRC.size:])
    if zlib.crc32(payload) != crc:
        raise FormatError("payload checksum mismatch")
    tensors: dict[str, np.ndarray] = {}
    end_prev = 0
    for entry in manifest.get("tensors", []):
        if entry.get("dtype") != "f32":
            raise FormatError(f"unsupported dtype tag {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        off = entry["offset"]
        if off < end_prev or off + nbytes > len(payload):
            raise FormatError(f"tensor {entry['name']} has an invalid offset")
        tensors[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off) \
            .reshape(shape).astype(np.float32)
        end_prev = off + nbytes
    return tensors, manifest.get("meta", {})


def save(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    atomic_write(path, encode(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return decode(fh.read())
