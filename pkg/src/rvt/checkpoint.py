"""RVTCKPT1 binary format for named float64 arrays.

Layout: the 8-byte magic ``RVTCKPT1`` followed by records until EOF.  Each
record is ``u64 name_len | name (UTF-8) | u64 rank | rank * u64 extents |
prod(extents) * f64 data``, all little-endian, data in row-major order.
The same container stores model parameters and raw frame blobs.
"""

import struct

import numpy as np

MAGIC = b"RVTCKPT1"
_U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def dumps(arrays):
    """Serialize a mapping name -> array (insertion order kept) to bytes."""
    parts = [MAGIC]
    for name, arr in arrays.items():
        arr = np.asarray(getattr(arr, "data", arr), dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(_U64.pack(len(raw)))
        parts.append(raw)
        parts.append(_U64.pack(arr.ndim))
        parts.extend(_U64.pack(n) for n in arr.shape)
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def loads(buf):
    if buf[:8] != MAGIC:
        raise CheckpointError(f"bad magic {bytes(buf[:8])!r}, expected {MAGIC!r}")
    out = {}
    pos = 8
    end = len(buf)

    def u64():
        nonlocal pos
        if pos + 8 > end:
            raise CheckpointError("truncated checkpoint")
        (v,) = _U64.unpack_from(buf, pos)
        pos += 8
        return v

    while pos < end:
        n = u64()
        name = bytes(buf[pos:pos + n]).decode("utf-8")
        pos += n
        rank = u64()
        shape = tuple(u64() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if pos + nbytes > end:
            raise CheckpointError(f"truncated data for {name!r}")
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += nbytes
        if name in out:
            raise CheckpointError(f"duplicate record {name!r}")
        out[name] = arr.reshape(shape)
    return out


def save(path, arrays):
    with open(path, "wb") as fh:
        fh.write(dumps(arrays))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
