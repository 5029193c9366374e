"""The AUGSAL1 portable tensor file format.

Layout, in order:

==========  =======  ====================================================
field       size     contents
==========  =======  ====================================================
magic       7 bytes  ASCII ``AUGSAL1``
dtype tag   1 byte   1 = float64, 2 = float32, 3 = int64
rank        1 byte   number of dimensions (0..8)
shape       4*rank   unsigned 32-bit little-endian dims, outermost first
payload     n bytes  row-major little-endian element data
==========  =======  ====================================================

Round-trips are bit-exact. Intermediates (latents, saliency, features) use
this format rather than image formats because they need full float precision.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import TensorFormatError

MAGIC = b"AUGSAL1"
MAX_RANK = 8

_DTYPE_TAGS = {
    np.dtype("<f8"): 1,
    np.dtype("<f4"): 2,
    np.dtype("<i8"): 3,
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def _payload_array(t) -> np.ndarray:
    if isinstance(t, np.ndarray):
        return t
    data = getattr(t, "data", None)
    if isinstance(data, np.ndarray):
        return data
    raise TypeError(f"cannot serialize object of type {type(t).__name__}; "
                    "pass an ndarray or a domain type with a .data array")


def write_tensor(t, path: Union[str, Path]) -> None:
    """Write an ndarray (or a domain type carrying one) to ``path``."""
    arr = np.ascontiguousarray(_payload_array(t))
    if arr.dtype.kind == "f" and arr.dtype not in _DTYPE_TAGS:
        arr = arr.astype("<f8")
    elif arr.dtype.kind in "iu" and arr.dtype not in _DTYPE_TAGS:
        arr = arr.astype("<i8")
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    if arr.dtype not in _DTYPE_TAGS:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > MAX_RANK:
        raise TypeError(f"rank {arr.ndim} exceeds format maximum {MAX_RANK}")

    header = MAGIC + struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_tensor(path: Union[str, Path], expect_shape=None, expect_dtype=None) -> np.ndarray:
    """Read an AUGSAL1 file back into an ndarray.

    ``expect_shape`` / ``expect_dtype``, when given, are checked against the
    header and raise shape/dtype-mismatch errors on disagreement.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 2:
        raise TensorFormatError(TensorFormatError.MALFORMED_HEADER,
                                f"file too short for a header ({len(raw)} bytes)")
    if raw[:len(MAGIC)] != MAGIC:
        raise TensorFormatError(TensorFormatError.MALFORMED_HEADER,
                                f"bad magic {raw[:len(MAGIC)]!r}")
    tag, rank = struct.unpack_from("<BB", raw, len(MAGIC))
    if tag not in _TAG_DTYPES:
        raise TensorFormatError(TensorFormatError.MALFORMED_HEADER,
                                f"unknown dtype tag {tag}")
    if rank > MAX_RANK:
        raise TensorFormatError(TensorFormatError.MALFORMED_HEADER,
                                f"rank {rank} exceeds format maximum {MAX_RANK}")
    shape_off = len(MAGIC) + 2
    shape_end = shape_off + 4 * rank
    if len(raw) < shape_end:
        raise TensorFormatError(TensorFormatError.MALFORMED_HEADER,
                                "header truncated inside shape")
    shape = struct.unpack_from(f"<{rank}I", raw, shape_off)

    dtype = _TAG_DTYPES[tag]
    n_expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = raw[shape_end:]
    if len(payload) < n_expected:
        raise TensorFormatError(TensorFormatError.TRUNCATED_PAYLOAD,
                                f"payload has {len(payload)} bytes, header promises {n_expected}")
    if len(payload) > n_expected:
        raise TensorFormatError(TensorFormatError.SHAPE_MISMATCH,
                                f"payload has {len(payload) - n_expected} trailing bytes "
                                "beyond the header shape")

    if expect_dtype is not None and np.dtype(expect_dtype) != dtype:
        raise TensorFormatError(TensorFormatError.DTYPE_MISMATCH,
                                f"expected dtype {np.dtype(expect_dtype)}, file has {dtype}")
    if expect_shape is not None and tuple(expect_shape) != tuple(shape):
        raise TensorFormatError(TensorFormatError.SHAPE_MISMATCH,
                                f"expected shape {tuple(expect_shape)}, file has {tuple(shape)}")

    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
