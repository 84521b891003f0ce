"""Binary checkpoint container shared by the trainer and the CLI.

Layout of a ``.ckpt`` file::

    8 bytes   magic  b"MILPCKPT"
    8 bytes   little-endian uint64, length L of the JSON header
    L bytes   UTF-8 JSON header (sorted keys)
    rest      parameter blob: little-endian float64 arrays, C order,
              concatenated in the order listed in header["fields"]

``header["fields"]`` is a list of ``[name, shape]`` pairs and
``header["blob_sha256"]`` guards the blob. Writes go to a temporary file in
the same directory followed by ``os.replace`` so readers never observe a
partial checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"MILPCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    fields = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"refusing to write non-finite values in {name}")
        fields.append([name, list(arr.shape)])
        chunks.append(np.ascontiguousarray(arr).tobytes())
    blob = b"".join(chunks)
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["fields"] = fields
    header["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + blob


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError("not a milpool checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')!r}")
    blob = data[16 + hlen :]
    if hashlib.sha256(blob).hexdigest() != header.get("blob_sha256"):
        raise CheckpointError("checkpoint blob checksum mismatch")
    arrays = {}
    offset = 0
    for name, shape in header["fields"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(blob):
            raise CheckpointError(f"blob too short for field {name}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError("trailing bytes after last field")
    return header, arrays


def save(path, header: dict, arrays: dict[str, np.ndarray]):
    atomic_write_bytes(path, encode(header, arrays))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return decode(path.read_bytes())
