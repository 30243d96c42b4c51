"""Versioned binary containers for checkpoints (MODBAL) and datasets (MBDATA).

Layout::

    <MAGIC><version>\\n          e.g. b"MBDATA1\\n"
    <sha256 hex of the rest>\\n
    <json header>\\n            config + array index
    <float64 little-endian arrays, concatenated in index order>
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


def write_container(path, magic: str, version: int, header: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write arrays plus a JSON header; returns the content checksum."""
    index = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    head = dict(header)
    head["arrays"] = index
    body = json.dumps(head, sort_keys=True).encode() + b"\n" + b"".join(chunks)
    digest = hashlib.sha256(body).hexdigest()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(f"{magic}{version}\n".encode())
        fh.write(digest.encode() + b"\n")
        fh.write(body)
    os.replace(tmp, path)
    return digest


def read_container(path, magic: str, version: int) -> tuple[dict, dict[str, np.ndarray], str]:
    """Inverse of :func:`write_container`. Returns (header, arrays, checksum)."""
    raw = Path(path).read_bytes()
    first, _, rest = raw.partition(b"\n")
    m = re.fullmatch(rb"([A-Z]+)(\d+)", first)
    if m is None or m.group(1).decode() != magic:
        raise FormatError(f"{path}: not a {magic} file")
    found = int(m.group(2))
    if found != version:
        raise VersionError(f"{path}: format version {found} is not supported (expected {version})")
    digest, _, body = rest.partition(b"\n")
    if hashlib.sha256(body).hexdigest().encode() != digest:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupted")
    head_raw, _, payload = body.partition(b"\n")
    header = json.loads(head_raw)
    arrays = {}
    offset = 0
    for entry in header.pop("arrays"):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        arrays[entry["name"]] = arr.astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(payload):
        raise FormatError(f"{path}: trailing or missing payload bytes")
    return header, arrays, digest.decode()
