"""Parameter container file.

Layout::

    MGCKPT 1
    <entry count>
    <name> <dtype> <dim0>x<dim1>x...      (one line per entry, '-' for scalars)
    <blank line>
    <payload: little-endian float32 values, entries in header order>

Names may not contain whitespace.  Any float array is stored as float32, so
round trips are byte-exact for float32 data.
"""
from __future__ import annotations

import hashlib
import io

import numpy as np

MAGIC = "MGCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _shape_str(shape):
    return "x".join(str(d) for d in shape) if shape else "-"


def _parse_shape(s):
    return () if s == "-" else tuple(int(d) for d in s.split("x"))


def dumps(state: dict) -> bytes:
    names = sorted(state)
    header = io.StringIO()
    header.write(f"{MAGIC} {VERSION}\n{len(names)}\n")
    payload = io.BytesIO()
    for name in names:
        if any(c.isspace() for c in name):
            raise CheckpointError(f"entry name {name!r} contains whitespace")
        arr = np.asarray(state[name])
        header.write(f"{name} float32 {_shape_str(arr.shape)}\n")
        payload.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header.write("\n")
    return header.getvalue().encode("ascii") + payload.getvalue()


def loads(blob: bytes) -> dict:
    try:
        sep = blob.index(b"\n\n")
    except ValueError:
        raise CheckpointError("missing header terminator") from None
    lines = blob[:sep].decode("ascii").split("\n")
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if int(magic[1]) != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {magic[1]}")
    count = int(lines[1])
    entries = lines[2:]
    if len(entries) != count:
        raise CheckpointError(f"header lists {len(entries)} entries, expected {count}")
    offset = sep + 2
    out = {}
    for line in entries:
        name, dtype, shape_s = line.split(" ")
        if dtype != "float32":
            raise CheckpointError(f"unsupported dtype {dtype}")
        shape = _parse_shape(shape_s)
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise CheckpointError(f"payload truncated in entry {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after payload")
    return out


def save(state: dict, path) -> str:
    blob = dumps(state)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> dict:
    with open(path, "rb") as fh:
        return loads(fh.read())


def content_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
