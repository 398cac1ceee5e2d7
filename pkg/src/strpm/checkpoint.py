"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"STRPM1"
    u32 header length, header JSON (UTF-8, sorted keys): {"config", "meta"}
    u32 array count
    per array: u16 name length, name, u8 ndim, ndim x u32 dims, float32 data
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, STRPMNet

MAGIC = b"STRPM1"


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: "OrderedDict[str, np.ndarray]"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.arrays = OrderedDict(
            (k, np.asarray(v, dtype="<f4").copy()) for k, v in self.arrays.items()
        )

    def group(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        cut = len(prefix) + 1
        return OrderedDict((k[cut:], v) for k, v in self.arrays.items() if k.startswith(prefix + "."))

    def check_compatible(self, config: ModelConfig) -> None:
        """Raise :class:`ShapeMismatchError` naming the first array that does not fit ``config``."""
        expected = expected_shapes(config)
        for name, shape in expected.items():
            if name not in self.arrays:
                raise ShapeMismatchError(f"array {name!r} expected by config is missing")
            if self.arrays[name].shape != shape:
                raise ShapeMismatchError(
                    f"shape mismatch for {name!r}: config expects {shape}, checkpoint has {self.arrays[name].shape}"
                )
        extra = [n for n in self.arrays if n not in expected]
        if extra:
            raise ShapeMismatchError(f"array {extra[0]!r} not expected by config")


def expected_shapes(config: ModelConfig) -> "OrderedDict[str, tuple]":
    from .objectives import Discriminator

    net = STRPMNet(config, seed=None)
    disc = Discriminator.from_config(config, seed=None)
    out = OrderedDict()
    for prefix, module in (("P", net), ("D", disc)):
        for name, p in module.parameters().items():
            out[f"{prefix}.{name}"] = p.shape
    for opt, module in (("adam_p", net), ("adam_d", disc)):
        for kind in ("m", "v"):
            for name, p in module.parameters().items():
                out[f"{opt}.{kind}.{name}"] = p.shape
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = json.dumps({"config": ckpt.config.to_dict(), "meta": ckpt.meta}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(ckpt.arrays))]
    for name, arr in ckpt.arrays.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"truncated checkpoint: needed {n} bytes at offset {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, config: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``config`` given, reject it unless every array fits."""
    buf = Path(path).read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:len(MAGIC)]!r}")
    r = _Reader(buf)
    r.take(len(MAGIC))
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    (count,) = r.unpack("<I")
    arrays = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    ckpt = Checkpoint(ModelConfig.from_dict(header["config"]), arrays, header.get("meta", {}))
    if config is not None:
        ckpt.check_compatible(config)
        if config != ckpt.config:
            diffs = [k for k, v in config.to_dict().items() if header["config"].get(k) != v]
            raise CheckpointError(f"config mismatch on keys {diffs}")
    return ckpt
