"""
Binary file formats. All multi-byte integers and floats are little-endian.

Matrix file (``.crmx``)::

    magic "CRMX" | version u16 | rows u32 | cols u32 | dtype u8 (0x01 = f64) | payload

Checkpoint file (``.crck``)::

    magic "CRCK" | version u16 | count u32
    per tensor: name_len u16 | utf-8 name | rank u8 | dims u32 * rank | dtype u8 | payload
    crc32 u32 over every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional

import numpy as np

from .errors import CRClipError
from .tensor import Tensor

MATRIX_MAGIC = b"CRMX"
CHECKPOINT_MAGIC = b"CRCK"
VERSION = 1
DTYPE_F64 = 0x01

_MATRIX_HEADER = struct.Struct("<4sHIIB")
_CKPT_HEADER = struct.Struct("<4sHI")
_LE_F64 = np.dtype("<f8")


class FormatError(CRClipError, ValueError):
    """Base class for unreadable data files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class KeyMismatchError(FormatError):
    def __init__(self, missing: Iterable[str], extra: Iterable[str]):
        self.missing = sorted(missing)
        self.extra = sorted(extra)
        super().__init__(f"checkpoint keys differ: missing {self.missing}, extra {self.extra}")


def _as_array(m) -> np.ndarray:
    return np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64)


class _Reader:
    """Bounds-checked cursor; never reads past the bytes actually present."""

    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"{self.what}: needed {n} bytes at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} remain")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(count * 8), dtype=_LE_F64).astype(np.float64)


def _check_magic(got: bytes, want: bytes, what: str) -> None:
    if got != want:
        raise BadMagicError(f"{what}: bad magic {got!r}, expected {want!r}")


def _check_version(version: int, what: str) -> None:
    if version != VERSION:
        raise UnsupportedVersionError(f"{what}: unsupported version {version}")


def _check_dtype(tag: int, what: str) -> None:
    if tag != DTYPE_F64:
        raise FormatError(f"{what}: unknown dtype tag {tag:#04x}")


# ---------------------------------------------------------------------------
# Matrices
# ---------------------------------------------------------------------------

def matrix_bytes(m) -> bytes:
    arr = _as_array(m)
    if arr.ndim != 2:
        raise FormatError(f"matrix files hold 2-d data, got shape {arr.shape}")
    rows, cols = arr.shape
    header = _MATRIX_HEADER.pack(MATRIX_MAGIC, VERSION, rows, cols, DTYPE_F64)
    return header + np.ascontiguousarray(arr, dtype=_LE_F64).tobytes()


def parse_matrix(buf: bytes, what: str = "matrix") -> np.ndarray:
    r = _Reader(buf, what)
    magic, version, rows, cols, dtype = r.unpack(_MATRIX_HEADER)
    _check_magic(magic, MATRIX_MAGIC, what)
    _check_version(version, what)
    _check_dtype(dtype, what)
    data = r.floats(rows * cols).reshape(rows, cols)
    if r.pos != len(buf):
        raise FormatError(f"{what}: {len(buf) - r.pos} trailing bytes")
    return data


def write_matrix(path, m) -> None:
    _atomic_write(path, matrix_bytes(m))


def read_matrix(path) -> np.ndarray:
    return parse_matrix(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(named: Mapping[str, object]) -> bytes:
    parts = [_CKPT_HEADER.pack(CHECKPOINT_MAGIC, VERSION, len(named))]
    for name, value in named.items():
        arr = _as_array(value)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(struct.pack("<B", DTYPE_F64))
        parts.append(np.ascontiguousarray(arr, dtype=_LE_F64).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def parse_checkpoint(buf: bytes, what: str = "checkpoint") -> Dict[str, np.ndarray]:
    r = _Reader(buf, what)
    magic, version, count = r.unpack(_CKPT_HEADER)
    _check_magic(magic, CHECKPOINT_MAGIC, what)
    _check_version(version, what)
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n_name,) = r.unpack(struct.Struct("<H"))
        try:
            name = r.take(n_name).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what}: tensor name is not valid utf-8") from None
        (rank,) = r.unpack(struct.Struct("<B"))
        dims = r.unpack(struct.Struct(f"<{rank}I"))
        (dtype,) = r.unpack(struct.Struct("<B"))
        _check_dtype(dtype, what)
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if name in out:
            raise FormatError(f"{what}: duplicate tensor name {name!r}")
        out[name] = r.floats(size).reshape(dims)
    body_end = r.pos
    (stored,) = r.unpack(struct.Struct("<I"))
    if r.pos != len(buf):
        raise FormatError(f"{what}: {len(buf) - r.pos} trailing bytes")
    if zlib.crc32(buf[:body_end]) != stored:
        raise ChecksumError(f"{what}: checksum mismatch, file is corrupted")
    return out


def save_checkpoint(path, named: Mapping[str, object]) -> None:
    _atomic_write(path, checkpoint_bytes(named))


def load_checkpoint(path, expected: Optional[Iterable[str]] = None) -> Dict[str, np.ndarray]:
    out = parse_checkpoint(Path(path).read_bytes(), str(path))
    if expected is not None:
        want = set(expected)
        if want != set(out):
            raise KeyMismatchError(want - set(out), set(out) - want)
    return out


# ---------------------------------------------------------------------------
# JSON and helpers
# ---------------------------------------------------------------------------

def write_json(path, obj) -> None:
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

DATASET_FILES = ("clips.crmx", "captions.crmx", "labels.crmx", "relevance.crmx", "dataset.json")


def write_dataset(out_dir, ds) -> Path:
    """Store a SynthDataset as matrix files plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(ds)
    write_matrix(out / "clips.crmx", ds.clips.reshape(n, -1))
    write_matrix(out / "captions.crmx", ds.captions)
    write_matrix(out / "labels.crmx", ds.labels)
    write_matrix(out / "relevance.crmx", ds.relevance)
    g = ds.geometry
    write_json(out / "dataset.json", {
        "n_samples": n, "n_verbs": ds.n_verbs, "n_nouns": ds.n_nouns,
        "caption_length": int(ds.captions.shape[1]),
        "geometry": {"frames": g.frames, "height": g.height, "width": g.width,
                     "channels": g.channels, "patch": g.patch},
    })
    return out


def read_dataset(data_dir):
    from .synthdata import Geometry, SynthDataset

    d = Path(data_dir)
    meta = read_json(d / "dataset.json")
    g = Geometry(**meta["geometry"])
    n = int(meta["n_samples"])
    clips = read_matrix(d / "clips.crmx")
    if clips.shape != (n, g.frames * g.height * g.width * g.channels):
        raise FormatError(f"{d}: clip matrix shape {clips.shape} disagrees with dataset.json")
    captions = read_matrix(d / "captions.crmx")
    if not np.all(captions == np.round(captions)):
        raise FormatError(f"{d}: caption ids are not integers")
    return SynthDataset(
        clips=clips.reshape(n, g.frames, g.height, g.width, g.channels),
        captions=captions.astype(np.int64),
        labels=read_matrix(d / "labels.crmx").astype(np.int64),
        relevance=read_matrix(d / "relevance.crmx"),
        n_verbs=int(meta["n_verbs"]), n_nouns=int(meta["n_nouns"]), geometry=g,
    )
