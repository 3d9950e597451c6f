"""Reader/writer for the NPY v1.0 single-array container.

Layout: ``\\x93NUMPY`` magic, version bytes ``1 0``, a little-endian uint16
header length, an ASCII dict literal ``{'descr': ..., 'fortran_order': ...,
'shape': ...}`` padded with spaces and a trailing newline so the payload
starts on a 64-byte boundary, then the raw C-order little-endian payload.
"""
from __future__ import annotations

import ast
import io
import os
import struct

import numpy as np

MAGIC = b"\x93NUMPY"
ALIGN = 64

SUPPORTED = {
    "<f4": np.dtype("<f4"),
    "<f8": np.dtype("<f8"),
    "<i4": np.dtype("<i4"),
    "<i8": np.dtype("<i8"),
    "<i2": np.dtype("<i2"),
    "|u1": np.dtype("u1"),
    "|i1": np.dtype("i1"),
    "|b1": np.dtype("?"),
}


class NpyFormatError(ValueError):
    """Base class for container errors."""


class NpyHeaderError(NpyFormatError):
    pass


class NpyTruncatedError(NpyFormatError):
    pass


class NpyDtypeError(NpyFormatError):
    pass


def _descr(dtype: np.dtype) -> str:
    dtype = np.dtype(dtype)
    if dtype.itemsize == 1:
        key = "|" + dtype.str[1:]
    else:
        key = "<" + dtype.str[1:]
    if key not in SUPPORTED:
        raise NpyDtypeError(f"unsupported dtype {dtype}")
    return key


def to_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    descr = _descr(array.dtype)
    shape = tuple(int(s) for s in array.shape)
    header = "{'descr': '%s', 'fortran_order': False, 'shape': %r, }" % (descr, shape)
    prefix = len(MAGIC) + 2 + 2
    pad = (-(prefix + len(header) + 1)) % ALIGN
    header_bytes = (header + " " * pad + "\n").encode("latin1")
    payload = np.ascontiguousarray(array, dtype=SUPPORTED[descr]).tobytes()
    return MAGIC + b"\x01\x00" + struct.pack("<H", len(header_bytes)) + header_bytes + payload


def parse_header(stream) -> tuple[np.dtype, tuple[int, ...], bool]:
    """Read magic + header from ``stream``; returns (dtype, shape, fortran_order)."""
    magic = stream.read(len(MAGIC))
    if magic != MAGIC:
        raise NpyHeaderError("missing NPY magic string")
    version = stream.read(2)
    if len(version) != 2:
        raise NpyTruncatedError("truncated header")
    if version[0] != 1:
        raise NpyHeaderError(f"unsupported container version {version[0]}.{version[1]}")
    raw_len = stream.read(2)
    if len(raw_len) != 2:
        raise NpyTruncatedError("truncated header")
    (hlen,) = struct.unpack("<H", raw_len)
    text = stream.read(hlen)
    if len(text) != hlen:
        raise NpyTruncatedError("truncated header")
    try:
        meta = ast.literal_eval(text.decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise NpyHeaderError(f"malformed header: {exc}") from None
    if not isinstance(meta, dict) or set(meta) != {"descr", "fortran_order", "shape"}:
        raise NpyHeaderError(f"header must have descr/fortran_order/shape keys, got {meta!r}")
    shape = meta["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise NpyHeaderError(f"bad shape {shape!r}")
    descr = meta["descr"]
    if descr not in SUPPORTED:
        raise NpyDtypeError(f"unsupported dtype {descr!r}")
    return SUPPORTED[descr], shape, bool(meta["fortran_order"])


def from_stream(stream) -> np.ndarray:
    dtype, shape, fortran = parse_header(stream)
    count = int(np.prod(shape)) if shape else 1
    nbytes = count * dtype.itemsize
    payload = stream.read(nbytes)
    if len(payload) != nbytes:
        raise NpyTruncatedError(f"truncated payload: expected {nbytes} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=dtype, count=count)
    order = "F" if fortran else "C"
    return arr.reshape(shape, order=order).astype(dtype.newbyteorder("="), copy=True)


def from_bytes(data: bytes) -> np.ndarray:
    return from_stream(io.BytesIO(data))


def tensor_io_write(path: str | os.PathLike, array: np.ndarray) -> None:
    data = to_bytes(array)
    with open(path, "wb") as fh:
        fh.write(data)


def tensor_io_read(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return from_stream(fh)


save = tensor_io_write
load = tensor_io_read
