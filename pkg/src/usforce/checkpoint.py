"""Weight checkpoints: a JSON header followed by one NPY blob per tensor.

File layout::

    b"USFCKPT\\n"            magic
    uint32 LE               header length
    header                  UTF-8 JSON: format_version, config, head, seed,
                            tensors [{name, offset, nbytes}], crc32
    payload                 NPY blobs back to back (offsets relative to payload start)

The header is written with sorted keys, so save -> load -> save is a fixed point.
"""
from __future__ import annotations

import io
import json
import os
import struct
import zlib
from pathlib import Path

from . import model as M
from . import npyio

MAGIC = b"USFCKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    """The file was written by an incompatible format version."""


class CheckpointCorruptError(CheckpointError):
    """Truncated, garbled or checksum-mismatched file."""


def to_bytes(params: M.ModelParameters) -> bytes:
    payload = io.BytesIO()
    index = []
    for name in sorted(params.tensors):
        blob = npyio.to_bytes(params.tensors[name])
        index.append({"name": name, "offset": payload.tell(), "nbytes": len(blob)})
        payload.write(blob)
    data = payload.getvalue()
    header = {
        "format_version": FORMAT_VERSION,
        "config": params.config.to_dict(),
        "head": params.head,
        "seed": params.seed,
        "tensors": index,
        "crc32": zlib.crc32(data),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hb)) + hb + data


def from_bytes(raw: bytes) -> M.ModelParameters:
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError("not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise CheckpointCorruptError("truncated checkpoint header")
    (hlen,) = struct.unpack("<I", raw[pos:pos + 4])
    pos += 4
    if len(raw) < pos + hlen:
        raise CheckpointCorruptError("truncated checkpoint header")
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"unreadable checkpoint header: {exc}") from None
    version = header.get("format_version") if isinstance(header, dict) else None
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version!r}, this build reads {FORMAT_VERSION}")
    data = raw[pos + hlen:]
    try:
        index, crc = header["tensors"], header["crc32"]
        config = M.ArchitectureConfig.from_dict(header["config"])
        head, seed = header["head"], header["seed"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"incomplete checkpoint header: {exc}") from None
    expected = sum(e["nbytes"] for e in index)
    if len(data) != expected:
        raise CheckpointCorruptError(f"payload is {len(data)} bytes, header promises {expected}")
    if zlib.crc32(data) != crc:
        raise CheckpointCorruptError("payload checksum mismatch")
    tensors = {}
    for e in index:
        try:
            tensors[e["name"]] = npyio.from_bytes(data[e["offset"]:e["offset"] + e["nbytes"]])
        except npyio.NpyFormatError as exc:
            raise CheckpointCorruptError(f"tensor {e['name']}: {exc}") from None
    params = M.ModelParameters(config, head, tensors, seed)
    want = set(M.build_model(config, head, 0).tensors)
    if set(tensors) != want:
        raise CheckpointCorruptError(
            f"tensor set mismatch: missing {sorted(want - set(tensors))}, extra {sorted(set(tensors) - want)}")
    return params


def save(params: M.ModelParameters, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(params))
    return path


def load(path: str | os.PathLike) -> M.ModelParameters:
    return from_bytes(Path(path).read_bytes())


checkpoint_save = save
checkpoint_load = load
