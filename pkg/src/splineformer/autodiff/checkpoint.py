"""Binary checkpoint files.

Layout: ``b"SPLF"``, u32 version, u32 header length, UTF-8 JSON header, then
one record per tensor until end of file: u32 name length, name bytes, u32
rank, rank x u64 dims, float32 little-endian values.
"""

import json
import struct

import numpy as np

from ..errors import CheckpointError

MAGIC = b"SPLF"
VERSION = 1


def write_checkpoint(path, tensors, header=None):
    """Write ``tensors`` (name -> array) and a JSON-serialisable ``header``."""
    head = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(head)))
        fh.write(head)
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(path):
    """Return ``(header, tensors)``; tensors come back as float32 arrays."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint header (magic {buf[:4]!r})")
    try:
        version, hlen = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 12
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        tensors = {}
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}Q", buf, pos + 4)
            pos += 4 + 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
    return header, tensors
