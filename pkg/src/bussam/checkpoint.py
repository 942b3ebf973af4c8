"""Binary checkpoint container.

Layout (all integers little-endian uint32 unless noted)::

    b"BUSSAMCKPT"  version
    n_config  { key_len key  value_len value } * n_config
    n_params  { name_len name  rank  dims[rank]  float32[prod(dims)]  trainable:u8 } * n_params
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from bussam.config import TrainConfig, config_from_dict, config_to_dict
from bussam.errors import CheckpointError
from bussam.model import BussamModel, build_model
from bussam.params import ParameterStore

MAGIC = b"BUSSAMCKPT"
VERSION = 1


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_checkpoint(store: ParameterStore, config: dict[str, str]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(config))]
    for k, v in config.items():
        parts += [_pack_str(k), _pack_str(v)]
    parts.append(struct.pack("<I", len(store)))
    for name, t in store.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts += [
            _pack_str(name),
            struct.pack("<I", arr.ndim),
            struct.pack(f"<{arr.ndim}I", *arr.shape),
            arr.tobytes(),
            struct.pack("<B", 1 if store.is_trainable(name) else 0),
        ]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (wanted {n} more bytes)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode_checkpoint(buf: bytes) -> tuple[dict[str, str], list[tuple[str, np.ndarray, bool]]]:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    config = {}
    for _ in range(r.u32()):
        k = r.string()
        config[k] = r.string()
    params = []
    for _ in range(r.u32()):
        name = r.string()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        trainable = r.take(1) != b"\x00"
        params.append((name, arr, trainable))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint payload")
    return config, params


def save_checkpoint(path: str | Path, store: ParameterStore, cfg: TrainConfig) -> None:
    Path(path).write_bytes(encode_checkpoint(store, config_to_dict(cfg)))


def load_checkpoint(path: str | Path, dtype=np.float32) -> tuple[BussamModel, ParameterStore, TrainConfig]:
    """Rebuild the model described by a checkpoint and load its tensors."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    raw_cfg, params = decode_checkpoint(buf)
    cfg = config_from_dict(raw_cfg)
    model, store = build_model(cfg.model, seed=cfg.seed, dtype=dtype)
    names = {name for name, _, _ in params}
    if names != set(store.names()):
        missing = sorted(set(store.names()) - names)[:3]
        extra = sorted(names - set(store.names()))[:3]
        raise CheckpointError(f"checkpoint parameters do not match config (missing {missing}, unexpected {extra})")
    for name, arr, trainable in params:
        t = store[name]
        if t.shape != arr.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {arr.shape}, model expects {t.shape}")
        if trainable != store.is_trainable(name):
            raise CheckpointError(f"parameter {name}: trainable flag mismatch")
        t.data = arr.astype(dtype)
    return model, store, cfg
