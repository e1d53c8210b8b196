"""ACKP checkpoint files.

Layout (little endian)::

    magic "ACKP" | version u32 | meta_len u32 | meta (UTF-8 JSON, sorted keys)
    n_blocks u32 | blocks... | crc32 u32 over every preceding byte

    block: name_len u16 | name | dtype u8 | ndim u8 | dims u32 * ndim | raw data

Parameters are stored under ``param/<name>``, optimizer moments under
``opt/<slot>/<name>``. Arrays round-trip bit for bit.
"""

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, StorageError

MAGIC = b"ACKP"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


@dataclass
class Checkpoint:
    kind: str  # "extractor" | "cluster"
    config: dict
    params: dict
    optimizer: dict = field(default_factory=dict)
    epoch: int = 0
    history: list = field(default_factory=list)
    seed: int = 0
    version: int = VERSION


def _blocks(ckpt):
    yield from ((f"param/{k}", v) for k, v in ckpt.params.items())
    for slot in ("m", "v"):
        for k, v in ckpt.optimizer.get(slot, {}).items():
            yield f"opt/{slot}/{k}", v


def to_bytes(ckpt):
    meta = {
        "kind": ckpt.kind,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "seed": ckpt.seed,
        "optimizer": {k: v for k, v in ckpt.optimizer.items() if k not in ("m", "v")},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<4sII", MAGIC, VERSION, len(meta_bytes)), meta_bytes]
    blocks = list(_blocks(ckpt))
    parts.append(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dtype not in DTYPE_CODES:
            raise FormatError(f"cannot store array {name!r} of dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack(f"<H{len(encoded)}sBB", len(encoded), encoded, DTYPE_CODES[dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(raw):
    if len(raw) < 16:
        raise FormatError("checkpoint is truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint checksum mismatch (corrupted file)")
    magic, version, meta_len = struct.unpack_from("<4sII", body, 0)
    if magic != MAGIC:
        raise FormatError(f"not an ACKP checkpoint (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        pos = 12
        meta = json.loads(body[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (n_blocks,) = struct.unpack_from("<I", body, pos)
        pos += 4
        params, optimizer = {}, dict(meta.get("optimizer", {}))
        for _ in range(n_blocks):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + name_len].decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            dtype = DTYPES[code]
            nbytes = int(np.prod(dims)) * dtype.itemsize
            if pos + nbytes > len(body):
                raise FormatError(f"checkpoint block {name!r} is truncated")
            arr = np.frombuffer(body, dtype=dtype, count=int(np.prod(dims)), offset=pos).reshape(dims).copy()
            pos += nbytes
            section, _, rest = name.partition("/")
            if section == "param":
                params[rest] = arr
            elif section == "opt":
                slot, _, pname = rest.partition("/")
                optimizer.setdefault(slot, {})[pname] = arr
            else:
                raise FormatError(f"unknown checkpoint block {name!r}")
        if pos != len(body):
            raise FormatError("trailing bytes after checkpoint blocks")
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from exc
    return Checkpoint(meta["kind"], meta["config"], params, optimizer, meta["epoch"], meta["history"], meta["seed"], version)


def save(ckpt, path):
    try:
        with open(path, "wb") as fh:
            fh.write(to_bytes(ckpt))
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(raw)
