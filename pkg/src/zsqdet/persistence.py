"""Binary checkpoint container.

Byte layout (all integers little-endian)::

    b"ZSQD"                         magic
    u32 version                     currently 1
    u32 len, bytes                  metadata, canonical JSON (UTF-8)
    u32 n_tensors
      n_tensors x { u16 len, name; u8 dtype (1 = f64); u8 ndim; ndim x u32 dim; f64 payload }
    u32 n_quantizers
      n_quantizers x { u16 len, name; u8 kind (0 weight, 1 activation); u8 asymmetric;
                       u8 initialized; u32 bits; f64 step; f64 offset }
    32 bytes                        SHA-256 of everything above

Serialization is canonical: tables are written in sorted-name order, so
save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .detector import GridDetector
from .quant import Quantizer, QuantizerParams

MAGIC = b"ZSQD"
VERSION = 1
DTYPE_F64 = 1
KINDS = ("weight", "activation")


class CheckpointError(ValueError):
    pass


def _canonical(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()


def _name(name: str) -> bytes:
    raw = name.encode()
    return struct.pack("<H", len(raw)) + raw


def serialize(model: GridDetector, metadata: dict | None = None) -> bytes:
    meta = {"architecture": model.architecture(), **(metadata or {})}
    tensors = {**{k: v.data for k, v in model.named_parameters().items()}, **model.named_buffers()}
    quants = model.named_quantizers()
    if set(tensors) & set(quants):
        raise CheckpointError(f"name collision between tensors and quantizers: "
                              f"{sorted(set(tensors) & set(quants))}")
    out = bytearray(MAGIC + struct.pack("<I", VERSION))
    mbytes = _canonical(meta)
    out += struct.pack("<I", len(mbytes)) + mbytes
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        out += _name(name) + struct.pack("<BB", DTYPE_F64, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    out += struct.pack("<I", len(quants))
    for name in sorted(quants):
        q = quants[name]
        p = q.params()
        out += _name(name) + struct.pack("<BBBIdd", KINDS.index(q.kind), int(q.asymmetric),
                                         int(q.initialized), q.bits, p.step, p.offset)
    out += hashlib.sha256(out).digest()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated payload at byte {self.pos} "
                                  f"(need {n}, have {len(self.buf) - self.pos})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode()


def deserialize(buf: bytes, path="<bytes>") -> tuple[GridDetector, dict]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    if len(buf) < 8 + 32:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupt or truncated)")
    r = _Reader(body, path)
    r.take(8)
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen))
    tensors: dict[str, np.ndarray] = {}
    (nt,) = r.unpack("<I")
    for _ in range(nt):
        name = r.name()
        dtype, ndim = r.unpack("<BB")
        if dtype != DTYPE_F64:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {dtype}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    quants: dict[str, tuple] = {}
    (nq,) = r.unpack("<I")
    for _ in range(nq):
        name = r.name()
        if name in quants or name in tensors:
            raise CheckpointError(f"{path}: duplicate entry {name!r}")
        quants[name] = r.unpack("<BBBIdd")
    if r.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.pos} trailing bytes")

    arch = meta["architecture"]
    model = GridDetector(num_classes=arch["num_classes"], channels=arch["channels"],
                         image_size=arch["image_size"], seed=arch["seed"])
    expected = {**model.named_parameters(), **model.named_buffers()}
    if set(expected) != set(tensors):
        raise CheckpointError(f"{path}: tensor table does not match architecture "
                              f"(missing {sorted(set(expected) - set(tensors))}, "
                              f"unexpected {sorted(set(tensors) - set(expected))})")
    for name, arr in tensors.items():
        target = expected[name]
        dest = target if isinstance(target, np.ndarray) else target.data
        if dest.shape != arr.shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {arr.shape}, expected {dest.shape}")
        dest[...] = arr
    convs = dict(zip([f"block{i}.conv" for i in range(len(model.convs))] + ["head"],
                     model.conv_layers()))
    for name, (kind, asym, init, bits, step, offset) in quants.items():
        layer, _, slot = name.rpartition(".")
        if layer not in convs or slot not in ("weight_quant", "act_quant"):
            raise CheckpointError(f"{path}: unknown quantizer slot {name!r}")
        q = Quantizer(bits, KINDS[kind], asymmetric=bool(asym))
        q.load(QuantizerParams(bits, step, offset, KINDS[kind], bool(asym)))
        q.initialized = bool(init)
        setattr(convs[layer], slot, q)
    model.set_mode("eval")
    return model, meta


def save_checkpoint(model: GridDetector, path, metadata: dict | None = None) -> bytes:
    data = serialize(model, metadata)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return data


def load_checkpoint(path) -> GridDetector:
    return load_checkpoint_with_meta(path)[0]


def load_checkpoint_with_meta(path) -> tuple[GridDetector, dict]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return deserialize(buf, path)
