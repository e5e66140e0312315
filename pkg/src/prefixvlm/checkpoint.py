"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"SVLM"  u32 version  u64 json_len  json (sorted keys, compact)
    records: u32 name_len  name  u8 dtype  u8 rank  u64 dims[rank]  payload
    footer:  u64 n_records  u64 total_file_len  32-byte sha256(all preceding bytes)

The footer length field separates truncation from corruption: a short file
fails the length check before the checksum is even consulted.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SVLM"
VERSION = 1
FOOTER = 8 + 8 + 32
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.float32: 0, np.float64: 1, np.int64: 2}


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


class ShapeError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix`` with the prefix stripped."""
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def num_parameters(self) -> int:
        return int(sum(v.size for k, v in self.tensors.items() if not k.startswith("optim.")))


def encode(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", ckpt.version, len(meta)), meta]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.type)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    total = len(body) + FOOTER
    head = body + struct.pack("<QQ", len(ckpt.tensors), total)
    return head + hashlib.sha256(head).digest()


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not a checkpoint: bad magic")
    if len(buf) < 16:
        raise TruncatedError("file ends inside the header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, expected {VERSION}")
    if len(buf) < 16 + FOOTER:
        raise TruncatedError("file too short for a footer")
    n_records, total = struct.unpack_from("<QQ", buf, len(buf) - FOOTER)
    if total != len(buf):
        raise TruncatedError(f"file is {len(buf)} bytes, footer records {total}")
    if hashlib.sha256(buf[:-32]).digest() != buf[-32:]:
        raise IntegrityError("checksum mismatch")

    end = len(buf) - FOOTER
    (meta_len,) = struct.unpack_from("<Q", buf, 8)
    pos = 16 + meta_len
    if pos > end:
        raise TruncatedError("config block overruns the file")
    meta = json.loads(buf[16:pos].decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}

    def need(n):
        if pos + n > end:
            raise TruncatedError("record overruns the file")

    while pos < end:
        need(4)
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(name_len + 2)
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        need(8 * rank)
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(nbytes)
        arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
        pos += nbytes
    if len(tensors) != n_records:
        raise TruncatedError(f"found {len(tensors)} records, footer lists {n_records}")
    return Checkpoint(meta, tensors, version)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def restore_params(params: dict, tensors: dict[str, np.ndarray], allow_partial: bool = False) -> list[str]:
    """Copy tensors into same-named parameters.

    Returns the parameter names left untouched (only possible with
    ``allow_partial``).  Unknown names and missing names are errors otherwise.
    """
    unknown = sorted(set(tensors) - set(params))
    missing = sorted(set(params) - set(tensors))
    if unknown and not allow_partial:
        raise UnknownTensorError(f"checkpoint holds unknown tensors: {unknown[:5]}")
    if missing and not allow_partial:
        raise UnknownTensorError(f"checkpoint lacks tensors: {missing[:5]}")
    for name, p in params.items():
        if name not in tensors:
            continue
        arr = tensors[name]
        if arr.shape != p.data.shape:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape}, model shape {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
    return missing
