"""Binary ``.ten`` tensor files.

Layout (all integers little-endian)::

    b"TEN1" | u8 dtype code (0=f32, 1=f64) | u32 rank | rank x u64 dims | payload

The payload is the raw little-endian element buffer in C order.
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TEN1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_KINDS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TensorFormatError(ValueError):
    """The bytes do not form a valid ``.ten`` record."""


def encode_tensor(array):
    array = np.asarray(array)
    kind = array.dtype.newbyteorder("=") if array.dtype.kind == "f" else array.dtype
    if kind not in _KINDS:
        raise TypeError(f"only float32/float64 arrays can be stored, got {array.dtype}")
    code = _KINDS[kind]
    header = MAGIC + struct.pack("<BI", code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_CODES[code]).tobytes()


def decode_tensor(buf):
    buf = bytes(buf)
    if len(buf) < 9 or buf[:4] != MAGIC:
        raise TensorFormatError("missing TEN1 magic")
    code, rank = struct.unpack_from("<BI", buf, 4)
    if code not in _CODES:
        raise TensorFormatError(f"unknown dtype code {code}")
    off = 9
    if len(buf) < off + 8 * rank:
        raise TensorFormatError("truncated shape header")
    shape = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    dt = _CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != off + count * dt.itemsize:
        raise TensorFormatError(
            f"payload holds {len(buf) - off} bytes, shape {shape} needs {count * dt.itemsize}"
        )
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape)
    return arr.astype(dt.newbyteorder("="))


def save_ten(path, array):
    Path(path).write_bytes(encode_tensor(array))


def load_ten(path):
    return decode_tensor(Path(path).read_bytes())
