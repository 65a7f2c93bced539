"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MWT3"                  magic
    u32                      format version
    u64                      header length N
    N bytes                  UTF-8 JSON header: run config, optimizer
                             hyperparameters, tensor directory
                             [{name, dtype, shape, offset, nbytes}, ...]
    payload                  raw little-endian tensor bytes, offsets relative
                             to the payload start
    32 bytes                 SHA-256 over everything above

Optimizer moments are stored as ordinary tensors named ``optim.m/<param>``
and ``optim.v/<param>``.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .multiway import MultiwayConfig, MultiwayModel, param_specs
from .tensorcore import Tensor
from .training import OptimizerState

MAGIC = b"MWT3"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DIGEST = 32
_DTYPES = {"f32": "<f4", "f64": "<f8"}


class CheckpointError(Exception):
    kind = "checkpoint"


class FormatError(CheckpointError):
    kind = "format"


class VersionError(CheckpointError):
    kind = "version"


class TruncationError(CheckpointError):
    kind = "truncated"


class ChecksumError(CheckpointError):
    kind = "checksum"


class CompatibilityError(CheckpointError):
    kind = "incompatible"


@dataclass
class Checkpoint:
    tensors: dict
    config: dict = field(default_factory=dict)
    optimizer: OptimizerState | None = None
    meta: dict = field(default_factory=dict)

    @property
    def model_config(self) -> MultiwayConfig:
        return MultiwayConfig(**self.config["model"])

    def params(self, prefix=""):
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix) and not k.startswith("optim.")}


def _dtype_name(arr):
    if arr.dtype == np.float64:
        return "f64"
    if arr.dtype == np.float32:
        return "f32"
    raise TypeError(f"unsupported dtype {arr.dtype}")


def encode_checkpoint(tensors: dict, config=None, optimizer: OptimizerState | None = None,
                      meta=None) -> bytes:
    arrays = dict(tensors)
    opt = None
    if optimizer is not None:
        opt = optimizer.hyperparameters()
        for k in optimizer.m:
            arrays[f"optim.m/{k}"] = optimizer.m[k]
            arrays[f"optim.v/{k}"] = optimizer.v[k]
    directory, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = _dtype_name(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
        directory.append({"name": name, "dtype": dt, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config or {}, "optimizer": opt, "meta": meta or {},
                         "tensors": directory}, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def _check_header(header):
    """Structural checks so a damaged header fails as FormatError, not KeyError."""
    try:
        entries = header["tensors"]
        end = 0
        for t in entries:
            if t["dtype"] not in _DTYPES or not isinstance(t["name"], str):
                raise ValueError(f"bad entry {t!r}")
            shape = [int(d) for d in t["shape"]]
            if min(shape, default=0) < 0 or t["offset"] != end:
                raise ValueError(f"bad entry {t!r}")
            size = int(np.prod(shape, dtype=np.int64)) * np.dtype(_DTYPES[t["dtype"]]).itemsize
            if t["nbytes"] != size:
                raise ValueError(f"entry {t['name']} claims {t['nbytes']} bytes for shape {shape}")
            end += size
        opt = header.get("optimizer")
        if opt is not None:
            for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "t"):
                float(opt[k])
        if not isinstance(header.get("config", {}), dict) or not isinstance(header.get("meta", {}), dict):
            raise ValueError("config and meta must be tables")
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise FormatError(f"malformed header: {e}") from None


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < 4:
        raise TruncationError("file shorter than the magic bytes")
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _PREFIX.size:
        raise TruncationError("file ends inside the fixed prefix")
    _, version, hlen = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise VersionError(f"format version {version} unsupported (expected {VERSION})")
    hend = _PREFIX.size + hlen
    if len(raw) < hend:
        raise TruncationError(f"file ends inside the {hlen}-byte header")
    try:
        header = json.loads(raw[_PREFIX.size:hend].decode("utf-8"))
        if not isinstance(header, dict):
            raise ValueError("header is not a JSON object")
    except (UnicodeDecodeError, ValueError) as e:
        raise FormatError(f"unreadable header: {e}") from None
    _check_header(header)
    payload_len = sum(t["nbytes"] for t in header["tensors"])
    expected = hend + payload_len + _DIGEST
    if len(raw) < expected:
        raise TruncationError(f"expected {expected} bytes, file has {len(raw)}")
    if len(raw) > expected:
        raise FormatError(f"{len(raw) - expected} trailing bytes after checksum")
    body = raw[:-_DIGEST]
    if hashlib.sha256(body).digest() != raw[-_DIGEST:]:
        raise ChecksumError("content checksum mismatch")
    tensors = {}
    for t in header["tensors"]:
        start = hend + t["offset"]
        arr = np.frombuffer(raw, dtype=_DTYPES[t["dtype"]], count=int(np.prod(t["shape"], dtype=np.int64)),
                            offset=start).reshape(t["shape"])
        tensors[t["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    state = None
    if header.get("optimizer") is not None:
        h = header["optimizer"]
        state = OptimizerState(lr=h["lr"], beta1=h["beta1"], beta2=h["beta2"], eps=h["eps"],
                               weight_decay=h["weight_decay"], t=h["t"])
        for name in list(tensors):
            if name.startswith("optim.m/"):
                state.m[name[8:]] = tensors.pop(name)
            elif name.startswith("optim.v/"):
                state.v[name[8:]] = tensors.pop(name)
    return Checkpoint(tensors, header.get("config", {}), state, header.get("meta", {}))


def save_checkpoint(path, model: MultiwayModel, state: OptimizerState | None = None,
                    run_config=None, extra: dict | None = None, meta=None):
    tensors = {k: p.data for k, p in model.params.items()}
    for k, p in (extra or {}).items():
        tensors[k] = p.data if isinstance(p, Tensor) else p
    config = dict(run_config or {})
    config["model"] = model.config.to_dict()
    raw = encode_checkpoint(tensors, config, state, meta)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(raw)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def restore_model(ckpt: Checkpoint, config: MultiwayConfig | None = None) -> MultiwayModel:
    """Model from checkpoint tensors; shapes are checked against ``config``."""
    cfg = config or ckpt.model_config
    params = {}
    for name, shape, _ in param_specs(cfg):
        if name not in ckpt.tensors:
            raise CompatibilityError(f"checkpoint lacks tensor {name}")
        arr = ckpt.tensors[name]
        if tuple(arr.shape) != tuple(shape):
            raise CompatibilityError(f"tensor {name} has shape {tuple(arr.shape)}, config expects {tuple(shape)}")
        params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
    return MultiwayModel(cfg, params)
