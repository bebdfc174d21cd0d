"""Dense tensor kernels and the PFST binary tensor format.

Tensors are plain row-major ``numpy.ndarray`` objects of dtype float32 or
float64 (uint8 is allowed for stored labels and images).  The kernels here
validate shapes and finiteness and then defer to numpy.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"PFST"
VERSION = 1

DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}
FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class TensorFormatError(ValueError):
    """Raised when a PFST stream is malformed."""


class UnsupportedDtypeError(TensorFormatError):
    pass


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached a public operation."""


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if x.dtype.kind == "f" and not np.isfinite(x).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner extents differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a @ b


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    check_finite(x, "softmax input")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    check_finite(x, "log_softmax input")
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a rank-2 tensor, stabilised by subtracting the row max."""
    if x.ndim != 2:
        raise ValueError(f"softmax_rows expects [m, n], got {x.shape}")
    return softmax(x, axis=1)


def reshape(x: np.ndarray, shape) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ValueError(f"cannot reshape {x.shape} into {shape}")
    return x.reshape(shape)


def transpose2d(x: np.ndarray) -> np.ndarray:
    if x.ndim != 2:
        raise ValueError(f"transpose2d expects rank 2, got {x.shape}")
    return np.ascontiguousarray(x.T)


def max0(x):
    return np.maximum(x, 0)


def _axis(x: np.ndarray, axis):
    if axis is None:
        return None
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for rank {x.ndim}")
    return axis


def reduce_sum(x: np.ndarray, axis=None) -> np.ndarray:
    return np.sum(x, axis=_axis(x, axis))


def reduce_mean(x: np.ndarray, axis=None) -> np.ndarray:
    return np.mean(x, axis=_axis(x, axis))


def reduce_max(x: np.ndarray, axis=None) -> np.ndarray:
    return np.max(x, axis=_axis(x, axis))


# --- PFST serialization -------------------------------------------------------

def tensor_to_bytes(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    code = DTYPE_CODES.get(t.dtype)
    if code is None:
        raise UnsupportedDtypeError(f"dtype {t.dtype} cannot be stored")
    if t.ndim > 255:
        raise TensorFormatError("rank exceeds 255")
    header = MAGIC + struct.pack("<BBB", VERSION, code, t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    payload = np.ascontiguousarray(t, dtype=t.dtype.newbyteorder("<")).tobytes()
    return header + payload


def tensor_from_buffer(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns it and the end offset."""
    if len(buf) - offset < 7:
        raise TensorFormatError("truncated tensor header")
    if buf[offset:offset + 4] != MAGIC:
        raise TensorFormatError(f"bad magic {bytes(buf[offset:offset + 4])!r}")
    version, code, ndim = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in CODE_DTYPES:
        raise UnsupportedDtypeError(f"unsupported dtype code {code}")
    pos = offset + 7
    if len(buf) - pos < 4 * ndim:
        raise TensorFormatError("truncated shape")
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype = CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise TensorFormatError("truncated payload")
    data = np.frombuffer(buf, dtype=dtype.newbyteorder("<"), count=nbytes // dtype.itemsize, offset=pos)
    return data.astype(dtype).reshape(shape), pos + nbytes


def save_tensor(t: np.ndarray, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = tensor_from_buffer(buf)
    if end != len(buf):
        raise TensorFormatError(f"{len(buf) - end} trailing bytes in {path}")
    return t
