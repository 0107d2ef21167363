"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"DOTCNET1"  version  config_len  config_json
    repeated until EOF:
        name_len  name  rank  extent * rank  float32-le data

The config is compact JSON with sorted keys, so saving the same state twice
yields the same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError
from .network import NetConfig, NetworkState, init_network

MAGIC = b"DOTCNET1"
VERSION = 1
_U32 = struct.Struct("<I")


def config_text(cfg: NetConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))


def dumps(cfg: NetConfig, state: NetworkState) -> bytes:
    chunks = [MAGIC, _U32.pack(VERSION)]
    text = config_text(cfg).encode("utf-8")
    chunks += [_U32.pack(len(text)), text]
    for name, param in state.parameters().items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(param.data, dtype="<f4")
        chunks += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        chunks += [_U32.pack(n) for n in arr.shape]
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def save_checkpoint(cfg: NetConfig, state: NetworkState, path) -> None:
    Path(path).write_bytes(dumps(cfg, state))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def at_end(self):
        return self.pos >= len(self.buf)

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]


def loads(buf: bytes):
    r = _Reader(buf)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    text = r.take(r.u32("config length"), "config").decode("utf-8")
    try:
        cfg = NetConfig.from_dict(json.loads(text)).validate()
    except (ValueError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"invalid config record: {exc}") from exc

    state = init_network(cfg, seed=0)
    params = state.parameters()
    seen = set()
    while not r.at_end():
        name = r.take(r.u32("parameter name length"), "parameter name").decode("utf-8")
        if name not in params:
            raise CheckpointError(f"unknown parameter {name!r}")
        if name in seen:
            raise CheckpointError(f"duplicate parameter {name!r}")
        rank = r.u32(f"rank of {name}")
        shape = tuple(r.u32(f"extent of {name}") for _ in range(rank))
        if shape != params[name].shape:
            raise CheckpointError(f"parameter {name!r} has shape {shape}, config implies {params[name].shape}")
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * count, f"data of {name}"), dtype="<f4")
        params[name].data = data.astype(np.float32).reshape(shape)
        seen.add(name)
    missing = [n for n in params if n not in seen]
    if missing:
        raise CheckpointError(f"checkpoint is missing parameter {missing[0]!r}")
    return cfg, state


def load_checkpoint(path):
    return loads(Path(path).read_bytes())
