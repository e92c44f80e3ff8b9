"""Binary checkpoint: magic, version, canonical config JSON, named float64 records, CRC-32."""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, IntegrityError
from .model import XGPAConfig, XGPAModel

MAGIC = b"XGPA"
VERSION = 1
DATASET_CHANNELS = 1


def encode(model: XGPAModel) -> bytes:
    records = list(model.named_parameters())
    extra = []
    if model.norm_mean is not None:
        extra = [("norm.mean", model.norm_mean), ("norm.std", model.norm_std)]
    cfg = model.config.to_json().encode()
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(cfg)), cfg]
    parts.append(struct.pack("<I", len(records) + len(extra)))
    for name, value in [(n, p.data) for n, p in records] + extra:
        raw = name.encode()
        arr = np.ascontiguousarray(value, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(model: XGPAModel, path: str | Path) -> None:
    Path(path).write_bytes(encode(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(blob: bytes) -> XGPAModel:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("not an XGPA checkpoint (bad magic bytes)")
    if len(blob) < 10:
        raise IntegrityError("checkpoint is truncated")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    (version,) = struct.unpack("<H", blob[4:6])
    if version != VERSION:
        raise FormatError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    if zlib.crc32(payload) != crc:
        raise IntegrityError("checkpoint checksum mismatch")
    r = _Reader(payload)
    r.take(6)
    (n,) = r.unpack("<I")
    try:
        config = XGPAConfig.from_dict(json.loads(r.take(n).decode()))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"checkpoint config is invalid: {exc}") from None
    model = XGPAModel(config)
    params = dict(model.named_parameters())
    (count,) = r.unpack("<I")
    stats = {}
    seen = set()
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if name in ("norm.mean", "norm.std"):
            stats[name] = arr
            continue
        if name not in params:
            raise FormatError(f"checkpoint has unknown parameter {name!r}")
        if params[name].shape != tuple(shape):
            raise FormatError(f"parameter {name!r} has shape {tuple(shape)}, model expects {params[name].shape}")
        params[name].data[...] = arr
        seen.add(name)
    missing = sorted(set(params) - seen)
    if missing:
        raise FormatError(f"checkpoint lacks parameters {missing}")
    if r.pos != len(payload):
        raise FormatError("trailing bytes after the last record")
    if stats:
        model.set_normalization(stats["norm.mean"], stats["norm.std"])
    return model


def load_checkpoint(path: str | Path, dataset=None) -> XGPAModel:
    """Read a checkpoint; with ``dataset`` also check that its width and node count fit."""
    model = decode(Path(path).read_bytes())
    if dataset is not None:
        check_dataset(model, dataset)
    return model


def check_dataset(model: XGPAModel, dataset) -> None:
    d_in = model.config.d_in
    if d_in != DATASET_CHANNELS:
        raise ContractError(f"model expects D_in={d_in} input channels but the dataset provides D_in={DATASET_CHANNELS}")
    if model.norm_mean is not None and model.norm_mean.shape[0] != dataset.num_nodes:
        raise ContractError(f"model was trained on {model.norm_mean.shape[0]} nodes, dataset has {dataset.num_nodes}")
