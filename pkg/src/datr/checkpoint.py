"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes  b"DATRCKPT"
    version      u32
    header_len   u32, then header_len bytes of UTF-8 JSON (sorted keys):
                 {"model": <ModelConfig>, "domains": [<DomainSpec>...], "seed": int}
    sections     repeated until EOF:
                 tag u8[4]  ("PARM", "OPTM", "BNST", "META")
                 length u64, then that many payload bytes

Tensor-record payloads (PARM, OPTM, BNST) are ``u32 count`` followed by
records sorted by name::

    name_len u16, name UTF-8, dtype u8 (0=f32, 1=f64, 2=i64), ndim u8,
    shape u32 * ndim, raw little-endian values (row-major)

META is UTF-8 JSON (sorted keys) with training bookkeeping.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DATR, DomainSpec, ModelConfig

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "encode_records",
           "decode_records", "FORMAT_VERSION", "CheckpointError"]

MAGIC = b"DATRCKPT"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    domains: list[DomainSpec]
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    bn_stats: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def from_model(cls, model: DATR, domains: list[DomainSpec], optimizer=None, meta=None) -> "Checkpoint":
        bn = {}
        for key, state in model.store.buffers.items():
            bn[f"{key}/running_mean"] = state.running_mean.copy()
            bn[f"{key}/running_var"] = state.running_var.copy()
        return cls(model.config, list(domains), model.store.snapshot(),
                   dict(optimizer or {}), bn, dict(meta or {}), model.seed)

    def build_model(self) -> DATR:
        """Instantiate a model and load parameters and batch-norm statistics."""
        model = DATR(self.config, [(d.name, d.num_landmarks) for d in self.domains], seed=self.seed)
        missing = set(model.store.keys()) ^ set(self.params)
        if missing:
            raise CheckpointError(f"checkpoint/model parameter mismatch: {sorted(missing)[:3]}")
        model.store.load_values(self.params)
        for key, state in model.store.buffers.items():
            state.running_mean = self.bn_stats[f"{key}/running_mean"].astype(state.running_mean.dtype)
            state.running_var = self.bn_stats[f"{key}/running_var"].astype(state.running_var.dtype)
        return model

    def domain(self, name: str) -> DomainSpec:
        for d in self.domains:
            if d.name == name:
                return d
        raise KeyError(f"domain {name!r} is not in the checkpoint")


def encode_records(records: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(records)))
    for name in sorted(records):
        arr = np.asarray(records[name])
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def decode_records(payload: bytes) -> dict[str, np.ndarray]:
    view = memoryview(payload)
    (count,) = struct.unpack_from("<I", view, 0)
    pos = 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + n]).decode()
        pos += n
        code, ndim = struct.unpack_from("<BB", view, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(view[pos:pos + nbytes], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        pos += nbytes
    return out


def _header(ckpt: Checkpoint) -> bytes:
    doc = {
        "model": ckpt.config.to_dict(),
        "domains": [dataclasses.asdict(d) for d in ckpt.domains],
        "seed": ckpt.seed,
    }
    return json.dumps(doc, sort_keys=True).encode()


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = _header(ckpt)
    sections = [
        (b"PARM", encode_records(ckpt.params)),
        (b"OPTM", encode_records(ckpt.optimizer)),
        (b"BNST", encode_records(ckpt.bn_stats)),
        (b"META", json.dumps(ckpt.meta, sort_keys=True).encode()),
    ]
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    for tag, payload in sections:
        out += [tag, struct.pack("<Q", len(payload)), payload]
    return b"".join(out)


def sections_of(data: bytes) -> dict[bytes, bytes]:
    if data[:8] != MAGIC or len(data) < 16:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16 + hlen
    if pos > len(data):
        raise CheckpointError("truncated checkpoint header")
    out = {b"HEAD": data[16:pos]}
    while pos < len(data):
        if pos + 12 > len(data):
            raise CheckpointError("truncated checkpoint section header")
        tag = data[pos:pos + 4]
        (length,) = struct.unpack_from("<Q", data, pos + 4)
        pos += 12
        if pos + length > len(data):
            raise CheckpointError(f"truncated {tag.decode(errors='replace')} section")
        out[tag] = data[pos:pos + length]
        pos += length
    return out


def from_bytes(data: bytes) -> Checkpoint:
    secs = sections_of(data)
    if b"PARM" not in secs:
        raise CheckpointError("checkpoint has no parameter section")
    try:
        head = json.loads(secs[b"HEAD"])
        config = ModelConfig.from_dict(head["model"])
        domains = [DomainSpec(**{**d, "sdr_thresholds": tuple(d["sdr_thresholds"])}) for d in head["domains"]]
        return Checkpoint(
            config=config, domains=domains,
            params=decode_records(secs[b"PARM"]),
            optimizer=decode_records(secs.get(b"OPTM", struct.pack("<I", 0))),
            bn_stats=decode_records(secs.get(b"BNST", struct.pack("<I", 0))),
            meta=json.loads(secs.get(b"META", b"{}") or b"{}"),
            seed=int(head.get("seed", 0)),
        )
    except (struct.error, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: checkpoint not found") from None
    return from_bytes(data)
