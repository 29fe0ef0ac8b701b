"""Bit-exact named-tensor checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes  b"CSTNCKPT"
    version      u32
    count        u64
    per entry, sorted by name:
        name_len u32, name (UTF-8)
        rank     u32, extents (u64 each)
        values   float32 little-endian, row-major
    digest       u64      FNV-1a over every preceding byte

Saving is a pure function of the tensor values: no timestamps, stable order.
"""
from __future__ import annotations

import struct
import warnings
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import FUSION_PREFIX
from .nn import Module

MAGIC = b"CSTNCKPT"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a; the recurrence is byte-sequential so it runs in plain Python."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


class Checkpoint(dict):
    """Ordered ``name -> float32 array`` mapping."""

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<IQ", VERSION, len(self))]
        for name in sorted(self):
            arr = np.ascontiguousarray(self[name], dtype="<f4")
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<I", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(arr.tobytes())
        payload = b"".join(parts)
        return payload + struct.pack("<Q", fnv1a64(payload))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < len(MAGIC) + 12 + 8 or blob[:len(MAGIC)] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        payload, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
        if fnv1a64(payload) != stored:
            raise CheckpointError("checkpoint digest mismatch: file is corrupt")
        pos = len(MAGIC)
        version, count = struct.unpack_from("<IQ", payload, pos)
        pos += 12
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        ckpt = cls()
        try:
            for _ in range(count):
                (nlen,) = struct.unpack_from("<I", payload, pos)
                pos += 4
                name = payload[pos:pos + nlen].decode("utf-8")
                pos += nlen
                (rank,) = struct.unpack_from("<I", payload, pos)
                pos += 4
                shape = struct.unpack_from(f"<{rank}Q", payload, pos)
                pos += 8 * rank
                n = int(np.prod(shape, dtype=np.int64))
                values = np.frombuffer(payload, dtype="<f4", count=n, offset=pos)
                pos += 4 * n
                ckpt[name] = values.reshape(shape).astype(np.float32)
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"truncated checkpoint: {exc}") from exc
        if pos != len(payload):
            raise CheckpointError(f"{len(payload) - pos} trailing bytes after last entry")
        return ckpt

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint {path} does not exist")
        return cls.from_bytes(path.read_bytes())

    def fusion_entries(self) -> list[str]:
        return sorted(n for n in self if n.startswith(FUSION_PREFIX))


def from_model(model: Module) -> Checkpoint:
    return Checkpoint({name: np.asarray(arr, dtype=np.float32)
                       for name, arr in model.state_dict().items()})


def save_checkpoint(model: Module, path) -> Path:
    return from_model(model).save(path)


def apply_checkpoint(ckpt: Checkpoint, model: Module, strict: bool = True):
    """Copy checkpoint values into ``model``.

    Strict mode requires an exact match of names and shapes and reports every
    offender.
    """
    params = dict(model.named_parameters())
    buffers = {name: (owner, attr) for name, owner, attr in model.named_buffers()}
    expected = {n: p.shape for n, p in params.items()}
    expected.update({n: owner._buffers[a].shape for n, (owner, a) in buffers.items()})
    missing = sorted(set(expected) - set(ckpt))
    extra = sorted(set(ckpt) - set(expected))
    mismatched = sorted(n for n in set(ckpt) & set(expected)
                        if tuple(ckpt[n].shape) != tuple(expected[n]))
    if strict and (missing or extra or mismatched):
        problems = []
        if missing:
            problems.append("missing: " + ", ".join(missing))
        if extra:
            problems.append("unexpected: " + ", ".join(extra))
        if mismatched:
            problems.append("shape mismatch: " + ", ".join(
                f"{n} {tuple(ckpt[n].shape)} vs {tuple(expected[n])}" for n in mismatched))
        err = CheckpointError("strict load failed; " + "; ".join(problems))
        err.missing, err.unexpected, err.mismatched = missing, extra, mismatched
        raise err
    for name, arr in ckpt.items():
        if name in mismatched or name not in expected:
            continue
        if name in params:
            p = params[name]
            p.data = np.array(arr, dtype=p.dtype)
        else:
            owner, attr = buffers[name]
            owner.set_buffer(attr, np.array(arr, dtype=owner._buffers[attr].dtype))
    return model


def load_checkpoint(path, model: Module, strict: bool = True) -> Module:
    return apply_checkpoint(Checkpoint.load(path), model, strict)


def transfer_to_small(full: Checkpoint) -> Checkpoint:
    """Drop every fusion entry; the remaining names are unchanged."""
    fusion = full.fusion_entries()
    if not fusion:
        warnings.warn("checkpoint has no fusion entries; transfer is a no-op", stacklevel=2)
    return Checkpoint({n: a for n, a in full.items() if not n.startswith(FUSION_PREFIX)})
