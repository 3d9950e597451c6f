import json
import struct

import numpy as np
import pytest

from usforce import checkpoint as C
from usforce import model as M

ARCH = M.ArchitectureConfig(64, 64, (4, 8, 8, 16, 16), 16)


@pytest.fixture(params=["skill", "force"])
def params(request):
    p = M.build_model(ARCH, request.param, 3)
    rng = np.random.default_rng(0)
    for k in p.tensors:
        if "running_var" in k:
            p.tensors[k] = rng.uniform(0.5, 2, p[k].shape).astype(np.float32)
    return p


def test_save_load_fixed_point(tmp_path, params):
    a = C.save(params, tmp_path / "a.ckpt").read_bytes()
    back = C.load(tmp_path / "a.ckpt")
    assert back.head == params.head and back.config == params.config and back.seed == params.seed
    assert C.to_bytes(back) == a
    for k, v in params.tensors.items():
        assert back[k].dtype == v.dtype and back[k].tobytes() == v.tobytes()


def test_inference_bit_exact_after_reload(tmp_path, params):
    x = np.random.default_rng(1).random((10, 64, 64, 1), dtype=np.float32)
    C.save(params, tmp_path / "m.ckpt")
    y0, _ = M.forward_batch(params, x, "infer")
    y1, _ = M.forward_batch(C.load(tmp_path / "m.ckpt"), x, "infer")
    assert y0.tobytes() == y1.tobytes()


def test_every_truncation_is_corrupt(params):
    raw = C.to_bytes(params)
    for cut in list(range(0, 64)) + list(range(64, len(raw), 97)) + [len(raw) - 1]:
        with pytest.raises(C.CheckpointCorruptError):
            C.from_bytes(raw[:cut])


def test_flipped_payload_byte_is_corrupt(params):
    raw = bytearray(C.to_bytes(params))
    raw[-5] ^= 0xFF
    with pytest.raises(C.CheckpointCorruptError, match="checksum"):
        C.from_bytes(bytes(raw))


def _rewrite_header(raw, edit):
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    edit(header)
    hb = json.dumps(header).encode()
    return C.MAGIC + struct.pack("<I", len(hb)) + hb + raw[12 + hlen:]


def test_version_mismatch(params):
    raw = _rewrite_header(C.to_bytes(params), lambda h: h.update(format_version=2))
    with pytest.raises(C.CheckpointVersionError, match="version 2"):
        C.from_bytes(raw)


def test_missing_tensor_rejected(params):
    def drop(h):
        h["tensors"] = [e for e in h["tensors"] if e["name"] != "head.b"]
    raw = C.to_bytes(params)
    with pytest.raises(C.CheckpointCorruptError):
        C.from_bytes(_rewrite_header(raw, drop))


def test_bad_magic():
    with pytest.raises(C.CheckpointCorruptError, match="magic"):
        C.from_bytes(b"\x93NUMPY" + b"\0" * 50)


def test_error_hierarchy():
    assert issubclass(C.CheckpointVersionError, C.CheckpointError)
    assert issubclass(C.CheckpointCorruptError, C.CheckpointError)
    assert not issubclass(C.CheckpointVersionError, C.CheckpointCorruptError)
