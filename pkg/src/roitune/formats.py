"""Binary dumps (GRFM feature maps, GRSQ sequences, GRCK checkpoints) and the text config format.

All integers are little-endian u32, all tensors little-endian float32 row-major.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import FormatError, ParseError
from .sequence import IGNORE_INDEX, InterleavedSequence

GRFM_VERSION = 1
GRCK_VERSION = 1
_U32 = struct.Struct("<I")
IGNORE_U32 = 0xFFFFFFFF


class _Reader:
    def __init__(self, data: bytes, name: str):
        self.data, self.pos, self.name = data, 0, name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.name}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(size * count), dtype=dtype).copy()

    def magic(self, expected: bytes) -> None:
        got = self.take(4)
        if got != expected:
            raise FormatError(f"{self.name}: bad magic {got!r}, expected {expected!r}")

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{self.name}: {len(self.data) - self.pos} trailing bytes")


def _f32(t) -> bytes:
    a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


# ---------------------------------------------------------------- GRFM

def write_grfm(path, maps) -> None:
    """One image's encoder layers, each C x H x W."""
    parts = [b"GRFM", _U32.pack(GRFM_VERSION), _U32.pack(len(maps))]
    for m in maps:
        if m.ndim != 3:
            raise FormatError(f"feature map must be C x H x W, got shape {tuple(m.shape)}")
        parts += [_U32.pack(int(d)) for d in m.shape]
        parts.append(_f32(m))
    Path(path).write_bytes(b"".join(parts))


def read_grfm(path, dtype=torch.float64) -> list[torch.Tensor]:
    r = _Reader(Path(path).read_bytes(), Path(path).name)
    r.magic(b"GRFM")
    version = r.u32()
    if version != GRFM_VERSION:
        raise FormatError(f"{r.name}: unsupported GRFM version {version}")
    maps = []
    for _ in range(r.u32()):
        c, h, w = r.u32(), r.u32(), r.u32()
        maps.append(torch.from_numpy(r.array("<f4", c * h * w).reshape(c, h, w)).to(dtype))
    r.done()
    return maps


# ---------------------------------------------------------------- GRSQ

def write_grsq(path, seq: InterleavedSequence) -> None:
    t, d = seq.embeddings.shape
    targets = np.array([IGNORE_U32 if x == IGNORE_INDEX else x for x in seq.target_ids], dtype="<u4")
    Path(path).write_bytes(b"".join([
        b"GRSQ", _U32.pack(t), _U32.pack(d), _f32(seq.embeddings),
        np.asarray(seq.provenance, dtype=np.uint8).tobytes(),
        np.asarray(seq.loss_mask, dtype=np.uint8).tobytes(),
        targets.tobytes(),
    ]))


def read_grsq(path) -> dict:
    """Returns embeddings (T x D float32 tensor), provenance, mask and targets (IGNORE restored)."""
    r = _Reader(Path(path).read_bytes(), Path(path).name)
    r.magic(b"GRSQ")
    t, d = r.u32(), r.u32()
    emb = torch.from_numpy(r.array("<f4", t * d).reshape(t, d))
    prov = r.array("u1", t).tolist()
    mask = r.array("u1", t).tolist()
    targets = [IGNORE_INDEX if x == IGNORE_U32 else int(x) for x in r.array("<u4", t)]
    r.done()
    return {"embeddings": emb, "provenance": prov, "loss_mask": mask, "target_ids": targets}


# ---------------------------------------------------------------- GRCK

def write_grck(path, state: Mapping[str, torch.Tensor]) -> None:
    parts = [b"GRCK", _U32.pack(GRCK_VERSION), _U32.pack(len(state))]
    for name, tensor in state.items():
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(tensor.ndim)]
        parts += [_U32.pack(int(d)) for d in tensor.shape]
        parts.append(_f32(tensor))
    Path(path).write_bytes(b"".join(parts))


def read_grck(path, dtype=torch.float64) -> dict[str, torch.Tensor]:
    r = _Reader(Path(path).read_bytes(), Path(path).name)
    r.magic(b"GRCK")
    version = r.u32()
    if version != GRCK_VERSION:
        raise FormatError(f"{r.name}: unsupported GRCK version {version}")
    out = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        out[name] = torch.from_numpy(r.array("<f4", int(np.prod(shape, dtype=np.int64))).reshape(shape)).to(dtype)
    r.done()
    return out


# ---------------------------------------------------------------- config

def parse_config(text: str, name: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later keys win."""
    out = {}
    offset = 0
    for line in text.splitlines(keepends=True):
        body = line.split("#", 1)[0].strip()
        if body:
            key, sep, value = body.partition("=")
            if not sep or not key.strip():
                raise ParseError(f"expected 'key = value', got {body!r}", offset, name)
            out[key.strip()] = value.strip()
        offset += len(line.encode("utf-8"))
    return out


def read_config(path) -> dict[str, str]:
    return parse_config(Path(path).read_text(encoding="utf-8"), Path(path).name)
