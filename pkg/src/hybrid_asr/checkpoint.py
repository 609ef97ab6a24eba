"""Named-tensor checkpoint files.

Layout (all integers little-endian, no padding)::

    b"LSF1"  u64 count
    count x { u64 name_len, utf-8 name, u64 rank, rank x u64 extent,
              u8 dtype (0=f32, 1=f64), raw little-endian values }
"""
import os
import struct
import tempfile
from collections import OrderedDict

import numpy as np

from .errors import CheckpointError

MAGIC = b"LSF1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def dumps(tensors):
    """Serialize a mapping of name -> float array to bytes."""
    parts = [MAGIC, struct.pack("<Q", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        tag = _TAGS[arr.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", tag))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def loads(buf):
    """Parse bytes produced by :func:`dumps`; raises CheckpointError on any defect."""
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic, not an LSF1 checkpoint")
    (count,) = struct.unpack("<Q", take(8))
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<Q", take(8))
        try:
            name = bytes(take(nlen)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("tensor name is not valid utf-8") from exc
        (rank,) = struct.unpack("<Q", take(8))
        if rank > 32:
            raise CheckpointError(f"implausible rank {rank} for {name!r}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        (tag,) = struct.unpack("<B", take(1))
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
        dtype = _DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(n * dtype.itemsize), dtype=dtype).reshape(shape)
        out[name] = data.astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after {count} tensors")
    return out


def save(path, tensors):
    """Write atomically (temp file + rename)."""
    data = dumps(tensors)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".lsf-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def require(tensors, names):
    """Raise a CheckpointError listing every name absent from ``tensors``."""
    missing = [n for n in names if n not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint is missing {len(missing)} tensor(s): {', '.join(missing)}",
                              missing=missing)
