"""Binary checkpoints: magic, version, JSON metadata, named float32 blobs.

Layout, all integers little-endian:

    bytes 0..3   magic "EKD1"
    byte  4      format version (currently 1)
    u32          metadata length
    ...          metadata: UTF-8 JSON (model config, vocabulary hash,
                 optimizer step and hyperparameters, stage label, seed,
                 blob count)
    per blob, in sorted name order:
        u16      name length, then the UTF-8 name
        u64      element count
        ...      count * 4 bytes of little-endian float32

Parameters are stored under ``param/<name>``; optimizer moments, when a
state is saved, under ``adam.m/<name>`` and ``adam.v/<name>``.  Loading
re-reads every length field strictly, so truncation or trailing garbage
fails instead of producing a silently wrong model.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, IntegrityError
from .model import ModelConfig, TransformerModel, parameter_shapes
from .optim import AdamHyper, AdamState
from .tensor import Tensor

__all__ = ["MAGIC", "VERSION", "save_checkpoint", "load_checkpoint"]

MAGIC = b"EKD1"
VERSION = 1


def _blob_map(model: TransformerModel, state: AdamState | None) -> dict[str, np.ndarray]:
    blobs = {f"param/{n}": p.data for n, p in model.parameters.items()}
    if state is not None:
        for n, arr in state.m.items():
            blobs[f"adam.m/{n}"] = arr
        for n, arr in state.v.items():
            blobs[f"adam.v/{n}"] = arr
    return blobs


def save_checkpoint(
    model: TransformerModel,
    state: AdamState | None,
    path: str | Path,
    stage: str = "",
    seed: int = 0,
) -> Path:
    """Write model (and optionally optimizer) to ``path``; returns the path."""
    meta = {
        "config": model.config.to_dict(),
        "vocab_hash": model.vocab_hash,
        "step": state.step if state is not None else 0,
        "hyper": state.hyper.to_dict() if state is not None else None,
        "stage": stage,
        "seed": seed,
    }
    blobs = _blob_map(model, state)
    meta["blob_count"] = len(blobs)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    out = bytearray()
    out += MAGIC
    out += bytes([VERSION])
    out += struct.pack("<I", len(meta_bytes))
    out += meta_bytes
    for name in sorted(blobs):
        arr = np.ascontiguousarray(blobs[name], dtype="<f4")
        name_b = name.encode("utf-8")
        out += struct.pack("<H", len(name_b))
        out += name_b
        out += struct.pack("<Q", arr.size)
        out += arr.tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(out))
    return path


class _Reader:
    def __init__(self, buf: bytes, path: Path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError(
                f"checkpoint {self.path} is truncated: wanted {n} bytes at "
                f"offset {self.pos}, file has {len(self.buf)}"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def done(self) -> bool:
        return self.pos == len(self.buf)


def load_checkpoint(path: str | Path) -> tuple[TransformerModel, AdamState | None]:
    """Read a checkpoint; the returned model is bit-identical to what was saved."""
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version = r.take(1)[0]
    if version != VERSION:
        raise CheckpointError(f"{path} has unsupported format version {version}")
    (meta_len,) = struct.unpack("<I", r.take(4))
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has unreadable metadata: {exc}") from exc

    config = ModelConfig.from_dict(meta["config"])
    blobs: dict[str, np.ndarray] = {}
    for _ in range(int(meta["blob_count"])):
        (name_len,) = struct.unpack("<H", r.take(2))
        name = r.take(name_len).decode("utf-8")
        (count,) = struct.unpack("<Q", r.take(8))
        data = np.frombuffer(r.take(count * 4), dtype="<f4").copy()
        blobs[name] = data
    if not r.done():
        raise IntegrityError(
            f"checkpoint {path} has {len(r.buf) - r.pos} trailing bytes after the last blob"
        )

    shapes = parameter_shapes(config)
    params: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        flat = blobs.pop(f"param/{name}", None)
        if flat is None:
            raise IntegrityError(f"checkpoint {path} is missing parameter {name!r}")
        want = int(np.prod(shape))
        if flat.size != want:
            raise IntegrityError(
                f"checkpoint {path} parameter {name!r} has {flat.size} values, expected {want}"
            )
        params[name] = Tensor(flat.reshape(shape), requires_grad=True)
    model = TransformerModel(config, params)
    model.vocab_hash = meta.get("vocab_hash")

    state: AdamState | None = None
    if meta.get("hyper") is not None:
        state = AdamState(hyper=AdamHyper.from_dict(meta["hyper"]), step=int(meta["step"]))
        for name, shape in shapes.items():
            m = blobs.pop(f"adam.m/{name}", None)
            v = blobs.pop(f"adam.v/{name}", None)
            if m is not None:
                state.m[name] = m.reshape(shape)
            if v is not None:
                state.v[name] = v.reshape(shape)
    if blobs:
        raise IntegrityError(
            f"checkpoint {path} has unexpected blobs: {sorted(blobs)[:3]}"
        )
    return model, state
