"""Weight bundles and the little-endian ``SLPW`` container.

Layout: magic ``b"SLPW"``, u16 version, u32 tensor count, then per tensor
u16 name length, UTF-8 name, u8 dtype (0 float32, 1 int8), u8 rank, u32 per
dim, f64 scale (1.0 for float tensors), raw data. Bundle metadata travels as
an int8 tensor named ``__meta__`` holding UTF-8 JSON; activation scales of a
quantized bundle travel as empty int8 tensors named ``act.<site>``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .config import ModelConfig
from .tensor import QuantTensor

MAGIC = b"SLPW"
VERSION = 1
META_NAME = "__meta__"
ACT_PREFIX = "act."
DTYPE_F32, DTYPE_I8 = 0, 1


class WeightFormatError(ValueError):
    pass


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for prefix, path in (("shape", cfg.shape_path), ("detail", cfg.detail_path)):
        for i, s in enumerate(path.layers, start=1):
            shapes[f"{prefix}.conv{i}.weight"] = (s.out_channels, s.in_channels, s.kernel_size)
    h, n_in = cfg.lstm.hidden_size, cfg.lstm.input_size
    for d in ("fwd", "rev"):
        shapes[f"lstm.{d}.weight"] = (4 * h, n_in + h)
    shapes["dense.hidden.weight"] = (cfg.dense.hidden, cfg.dense_in)
    shapes["dense.out.weight"] = (cfg.dense.n_classes, cfg.dense.hidden)
    return shapes


@dataclass
class WeightBundle:
    """Named tensors plus metadata (config hash, quantization state)."""

    tensors: dict
    meta: dict = field(default_factory=dict)

    @property
    def quantized(self) -> bool:
        return bool(self.meta.get("quantized", False))

    def __getitem__(self, name):
        return self.tensors[name]

    def act_scales(self) -> dict[str, float]:
        return {k[len(ACT_PREFIX):]: v.scale for k, v in self.tensors.items()
                if k.startswith(ACT_PREFIX)}

    def validate(self, cfg: ModelConfig) -> None:
        if self.meta.get("config_hash") not in (None, cfg.config_hash()):
            raise WeightFormatError(
                f"weights built for config {self.meta['config_hash']}, got {cfg.config_hash()}")
        for name, shape in expected_shapes(cfg).items():
            if name not in self.tensors:
                raise WeightFormatError(f"missing tensor {name}")
            t = self.tensors[name]
            got = t.shape if isinstance(t, QuantTensor) else np.shape(t)
            if tuple(got) != shape:
                raise WeightFormatError(f"{name}: shape {tuple(got)} != {shape}")
            if self.quantized != isinstance(t, QuantTensor):
                raise WeightFormatError(f"{name}: dtype inconsistent with quantization state")


def _write_tensor(buf: io.BytesIO, name: str, t) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    if isinstance(t, QuantTensor):
        dtype, scale, data = DTYPE_I8, float(t.scale), np.ascontiguousarray(t.data, dtype="<i1")
    else:
        dtype, scale, data = DTYPE_F32, 1.0, np.ascontiguousarray(t, dtype="<f4")
    buf.write(struct.pack("<BB", dtype, data.ndim))
    buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
    buf.write(struct.pack("<d", scale))
    buf.write(data.tobytes())


def to_bytes(bundle: WeightBundle) -> bytes:
    buf = io.BytesIO()
    items = sorted(bundle.tensors.items())
    meta = json.dumps(bundle.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(items) + 1))
    meta_codes = np.frombuffer(meta, dtype=np.uint8).view(np.int8)
    _write_tensor(buf, META_NAME, QuantTensor(meta_codes, 1.0))
    for name, t in items:
        _write_tensor(buf, name, t)
    return buf.getvalue()


def from_bytes(blob: bytes) -> WeightBundle:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise WeightFormatError("truncated weight file")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise WeightFormatError("not an SLPW file")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise WeightFormatError(f"unsupported SLPW version {version}")
    tensors, meta = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        dtype, rank = struct.unpack("<BB", take(2))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        (scale,) = struct.unpack("<d", take(8))
        n = int(np.prod(dims)) if rank else 1
        if dtype == DTYPE_F32:
            arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
            tensors[name] = arr
        elif dtype == DTYPE_I8:
            arr = np.frombuffer(take(n), dtype="<i1").reshape(dims)
            if name == META_NAME:
                meta = json.loads(arr.view(np.uint8).tobytes().decode("utf-8"))
            else:
                tensors[name] = QuantTensor(arr.copy(), scale)
        else:
            raise WeightFormatError(f"unknown dtype tag {dtype} for {name}")
    if pos != len(view):
        raise WeightFormatError("trailing bytes after last tensor")
    return WeightBundle(tensors, meta)


def save_bundle(bundle: WeightBundle, path: Union[str, Path]) -> None:
    Path(path).write_bytes(to_bytes(bundle))


def load_bundle(path: Union[str, Path]) -> WeightBundle:
    return from_bytes(Path(path).read_bytes())
