"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DAVI"  u32 version
    u32 n    n bytes of UTF-8 "key=value\\n" lines, keys sorted
    u32 count
    count × { u32 name_len, name, u32 ndim, ndim × u32 dims, prod(dims) × f64 }

Arrays appear in sorted name order. Names are prefixed by their group:
``live/``, ``ema/``, ``adam.m/`` and ``adam.v/``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams
from .tensor import Tensor

MAGIC = b"DAVI"
VERSION = 1
GROUPS = ("live", "ema", "adam.m", "adam.v")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: ModelConfig
    live: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    extra: dict[str, str] = field(default_factory=dict)

    def params(self, which: str = "ema") -> ModelParams:
        """Materialise ``ema`` (inference default) or ``live`` weights."""
        src = self.ema if which == "ema" else self.live
        tensors = {k: Tensor(v.copy(), requires_grad=False, name=k) for k, v in src.items()}
        return ModelParams(self.config, tensors, self.kind)

    def header(self) -> dict[str, str]:
        h = {f"model.{k}": str(v) for k, v in self.config.to_dict().items()}
        h.update({"kind": self.kind, "step": str(self.step), "seed": str(self.seed)})
        h.update(self.extra)
        return h


def _config_block(header: dict[str, str]) -> bytes:
    for k, v in header.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise CheckpointError(f"header entry {k!r} not representable as key=value")
    return "".join(f"{k}={header[k]}\n" for k in sorted(header)).encode("utf-8")


def dumps(ckpt: Checkpoint) -> bytes:
    arrays: dict[str, np.ndarray] = {}
    for group, d in zip(GROUPS, (ckpt.live, ckpt.ema, ckpt.adam_m, ckpt.adam_v)):
        for k, v in d.items():
            arrays[f"{group}/{k}"] = v
    block = _config_block(ckpt.header())
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(block)), block]
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def loads(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic bytes, not a DAVI checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = {}
    for line in r.take(r.u32()).decode("utf-8").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed header line {line!r}")
        header[key] = value
    groups: dict[str, dict[str, np.ndarray]] = {g: {} for g in GROUPS}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        group, _, path = name.partition("/")
        if group not in groups:
            raise CheckpointError(f"unknown array group in {name!r}")
        groups[group][path] = arr
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    model_cfg = {k[len("model."):]: v for k, v in header.items() if k.startswith("model.")}
    reserved = {"kind", "step", "seed"}
    extra = {k: v for k, v in header.items() if not k.startswith("model.") and k not in reserved}
    return Checkpoint(
        kind=header.get("kind", "davi"),
        config=ModelConfig.from_dict(model_cfg),
        live=groups["live"],
        ema=groups["ema"],
        adam_m=groups["adam.m"],
        adam_v=groups["adam.v"],
        step=int(header.get("step", 0)),
        seed=int(header.get("seed", 0)),
        extra=extra,
    )


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def from_params(params: ModelParams, seed: int = 0, ema: ModelParams | None = None, **kw) -> Checkpoint:
    live = {k: t.data.astype(np.float64) for k, t in params.items()}
    shadow = live if ema is None else {k: t.data.astype(np.float64) for k, t in ema.items()}
    return Checkpoint(params.kind, params.config, live, dict(shadow), seed=seed, **kw)
