"""Binary checkpoints and weight-space interpolation.

File layout (all integers little-endian)::

    b"FSCK" | version u32 | count u32
    per tensor: name_len u16 | name utf-8 | rank u8 | dims u64 * rank | f32 payload
    meta_len u64 | metadata JSON utf-8
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FSCK"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class CorruptFile(ValueError):
    pass


class StructureMismatch(ValueError):
    pass


class DigestMismatch(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def config_digest(config: dict) -> str:
    return f"{fnv1a64(canonical_json(config).encode('utf-8')):016x}"


@dataclass
class Checkpoint:
    tensors: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tensors = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in self.tensors.items()}

    def structure(self) -> dict:
        return {k: v.shape for k, v in self.tensors.items()}

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", VERSION, len(self.tensors))]
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF or arr.ndim > 0xFF:
                raise ValueError(f"tensor {name!r} cannot be encoded")
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(arr.astype("<f4").tobytes())
        meta = canonical_json(self.metadata).encode("utf-8")
        parts.append(struct.pack("<Q", len(meta)) + meta)
        return b"".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        view = memoryview(blob)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise CorruptFile(f"truncated at byte {pos} (need {n} more)")
            out = view[pos : pos + n]
            pos += n
            return out

        if bytes(take(4)) != MAGIC:
            raise CorruptFile("bad magic")
        version, count = struct.unpack("<II", take(8))
        if version != VERSION:
            raise CorruptFile(f"unsupported version {version}")
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2))
            try:
                name = bytes(take(name_len)).decode("utf-8")
            except UnicodeDecodeError:
                raise CorruptFile("tensor name is not utf-8") from None
            (rank,) = struct.unpack("<B", take(1))
            dims = struct.unpack(f"<{rank}Q", take(8 * rank))
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
            if name in tensors:
                raise CorruptFile(f"duplicate tensor {name!r}")
            tensors[name] = payload.astype(np.float32)
        (meta_len,) = struct.unpack("<Q", take(8))
        try:
            metadata = json.loads(bytes(take(meta_len)).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise CorruptFile("metadata is not valid JSON") from None
        if pos != len(view):
            raise CorruptFile(f"{len(view) - pos} trailing bytes")
        return cls(tensors, metadata)


def atomic_write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, ckpt.to_bytes())


def load(path, expected_digest: str | None = None) -> Checkpoint:
    """Read a checkpoint and verify its stored config digest.

    The digest recorded in the metadata must match the recorded config; when
    ``expected_digest`` is given it must match as well.
    """
    ckpt = Checkpoint.from_bytes(Path(path).read_bytes())
    meta = ckpt.metadata
    if "config" in meta or "config_digest" in meta:
        if config_digest(meta.get("config", {})) != meta.get("config_digest"):
            raise CorruptFile("stored config digest does not match stored config")
    if expected_digest is not None and meta.get("config_digest") != expected_digest:
        raise DigestMismatch(f"checkpoint config digest {meta.get('config_digest')} != expected {expected_digest}")
    return ckpt


def wise_ft_interpolate(pre: Checkpoint, ft: Checkpoint, alpha: float) -> Checkpoint:
    """``(1 - alpha) * pre + alpha * ft`` tensor by tensor.

    Endpoints are copied verbatim; interior points are blended in float64
    and rounded once to float32.
    """
    if pre.structure() != ft.structure():
        raise StructureMismatch("checkpoints differ in tensor names or shapes")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 0.0:
        tensors = {k: v.copy() for k, v in pre.tensors.items()}
    elif alpha == 1.0:
        tensors = {k: v.copy() for k, v in ft.tensors.items()}
    else:
        tensors = {
            k: ((1.0 - alpha) * pre.tensors[k].astype(np.float64) + alpha * ft.tensors[k].astype(np.float64))
            for k in pre.tensors
        }
    meta = dict(ft.metadata)
    meta["wise_ft_alpha"] = alpha
    return Checkpoint(tensors, meta)
