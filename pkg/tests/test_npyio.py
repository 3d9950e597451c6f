import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from usforce import npyio

DTYPES = ["<f4", "<f8", "<i4", "<i8", "<i2", "|u1", "|i1", "|b1"]


def _rand(rng, shape, dtype):
    dt = np.dtype(dtype)
    if dt.kind == "f":
        return rng.standard_normal(shape).astype(dt)
    if dt.kind == "b":
        return rng.random(shape) > 0.5
    info = np.iinfo(dt)
    return rng.integers(info.min, info.max, size=shape, dtype=dt, endpoint=True)


def test_roundtrip_345(tmp_path):
    x = np.random.default_rng(0).standard_normal((3, 4, 5)).astype(np.float32)
    npyio.save(tmp_path / "x.npy", x)
    y = npyio.load(tmp_path / "x.npy")
    assert y.dtype == x.dtype and y.shape == x.shape and x.tobytes() == y.tobytes()


def test_header_2x3_float32():
    data = npyio.to_bytes(np.zeros((2, 3), np.float32))
    dtype, shape, fortran = npyio.parse_header(io.BytesIO(data))
    assert (dtype, shape, fortran) == (np.dtype("<f4"), (2, 3), False)
    assert data[:8] == b"\x93NUMPY\x01\x00"
    assert (10 + int.from_bytes(data[8:10], "little")) % 64 == 0


@given(st.lists(st.integers(0, 5), min_size=0, max_size=4), st.sampled_from(DTYPES),
       st.integers(0, 2**32 - 1))
def test_roundtrip_property_and_numpy_interop(shape, dtype, seed):
    x = _rand(np.random.default_rng(seed), tuple(shape), dtype)
    raw = npyio.to_bytes(x)
    y = npyio.from_bytes(raw)
    assert y.shape == x.shape and y.dtype == x.dtype and y.tobytes() == x.tobytes()
    # numpy's own reader decodes our bytes, and we decode numpy's.
    z = np.load(io.BytesIO(raw))
    assert z.tobytes() == x.tobytes()
    buf = io.BytesIO()
    np.save(buf, x)
    assert npyio.from_bytes(buf.getvalue()).tobytes() == x.tobytes()


def test_nan_and_signed_zero_bits_preserved():
    x = np.array([np.nan, -0.0, np.inf, -np.inf, 1e-45], np.float32)
    assert npyio.from_bytes(npyio.to_bytes(x)).tobytes() == x.tobytes()


def test_fortran_order_input_written_c_order():
    x = np.asfortranarray(np.arange(12.0).reshape(3, 4))
    y = npyio.from_bytes(npyio.to_bytes(x))
    assert np.array_equal(x, y)


def test_reads_fortran_order_files():
    buf = io.BytesIO()
    np.save(buf, np.asfortranarray(np.arange(6.0).reshape(2, 3)))
    assert np.array_equal(npyio.from_bytes(buf.getvalue()), np.arange(6.0).reshape(2, 3))


def test_truncated_payload_error():
    data = npyio.to_bytes(np.ones(10))
    with pytest.raises(npyio.NpyTruncatedError, match="truncated payload"):
        npyio.from_bytes(data[:-3])


def test_truncated_header_error():
    data = npyio.to_bytes(np.ones(10))
    with pytest.raises(npyio.NpyTruncatedError):
        npyio.from_bytes(data[:20])


def test_bad_magic_and_malformed_header():
    with pytest.raises(npyio.NpyHeaderError, match="magic"):
        npyio.from_bytes(b"NOTNUMPY" + b"\x00" * 100)
    bad = b"\x93NUMPY\x01\x00" + (14).to_bytes(2, "little") + b"{'descr': <f4\n"
    with pytest.raises(npyio.NpyHeaderError):
        npyio.from_bytes(bad)


def test_unsupported_dtype_errors():
    with pytest.raises(npyio.NpyDtypeError):
        npyio.to_bytes(np.zeros(3, np.complex64))
    buf = io.BytesIO()
    np.save(buf, np.zeros(3, np.complex64))
    with pytest.raises(npyio.NpyDtypeError):
        npyio.from_bytes(buf.getvalue())


def test_error_kinds_are_distinct():
    kinds = {npyio.NpyHeaderError, npyio.NpyTruncatedError, npyio.NpyDtypeError}
    assert len(kinds) == 3 and all(issubclass(k, npyio.NpyFormatError) for k in kinds)
