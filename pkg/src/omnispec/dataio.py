"""Bit-exact file formats: spectral image container, corpus manifests, and
checkpoints.

All binary formats are little-endian, magic-prefixed, and versioned; readers
reject anything they do not recognize instead of guessing. Image payloads are
f32 on disk and widened to f64 in memory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, PayloadError, TruncationError,
                     ValidationError, VersionError)

UNLABELED = 0xFFFF

_IMAGE_MAGIC = b"CSP1"
_IMAGE_VERSION = 1
_CKPT_MAGIC = b"OSCK"
_CKPT_VERSION = 1


@dataclass
class SpectralImage:
    """H x W x C reflectance cube plus per-channel wavelengths in nm."""

    data: np.ndarray                     # (H, W, C) float64
    wavelengths_nm: np.ndarray           # (C,) float64, strictly increasing
    labels: np.ndarray | None = None     # (H, W) uint16, UNLABELED = no class

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]

    def validate(self) -> None:
        if self.data.ndim != 3:
            raise ValidationError(f"image data must be (H, W, C), got {self.data.shape}")
        w = self.wavelengths_nm
        if w.shape != (self.n_channels,):
            raise ValidationError(f"wavelength count {w.shape} != C={self.n_channels}")
        if not np.all(np.isfinite(self.data)):
            raise PayloadError("image data contains non-finite values")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise PayloadError("wavelengths must be finite and positive")
        if np.any(np.diff(w) <= 0):
            raise PayloadError("wavelengths must be strictly increasing")
        if self.labels is not None and self.labels.shape != (self.height, self.width):
            raise ValidationError(f"label plane {self.labels.shape} != "
                                  f"({self.height}, {self.width})")


def write_image(path, img: SpectralImage) -> None:
    img.validate()
    h, w, c = img.data.shape
    parts = [
        _IMAGE_MAGIC,
        struct.pack("<IIIIB", _IMAGE_VERSION, h, w, c,
                    1 if img.labels is not None else 0),
        img.wavelengths_nm.astype("<f4").tobytes(),
        img.data.astype("<f4").tobytes(),
    ]
    if img.labels is not None:
        parts.append(img.labels.astype("<u2").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_image(path) -> SpectralImage:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != _IMAGE_MAGIC:
        raise BadMagicError(f"{path}: not a spectral image (bad magic)")
    header_end = 4 + struct.calcsize("<IIIIB")
    if len(raw) < header_end:
        raise TruncationError(f"{path}: header truncated")
    version, h, w, c, has_labels = struct.unpack("<IIIIB", raw[4:header_end])
    if version != _IMAGE_VERSION:
        raise VersionError(f"{path}: unsupported image version {version}")
    n_data = h * w * c
    expected = header_end + 4 * c + 4 * n_data + (2 * h * w if has_labels else 0)
    if len(raw) != expected:
        raise TruncationError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = header_end
    wavelengths = np.frombuffer(raw, dtype="<f4", count=c, offset=off).astype(np.float64)
    off += 4 * c
    data = np.frombuffer(raw, dtype="<f4", count=n_data, offset=off)
    data = data.astype(np.float64).reshape(h, w, c)
    off += 4 * n_data
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<u2", count=h * w, offset=off)
        labels = labels.reshape(h, w).copy()
    img = SpectralImage(data=data, wavelengths_nm=wavelengths, labels=labels)
    img.validate()
    return img


# ---------------------------------------------------------------------------
# corpus manifests


@dataclass
class CorpusEntry:
    path: str
    subject: str
    camera: str
    split: str


@dataclass
class Corpus:
    root: Path
    entries: list[CorpusEntry] = field(default_factory=list)

    def split(self, tag: str) -> list[CorpusEntry]:
        return [e for e in self.entries if e.split == tag]

    def load(self, entry: CorpusEntry) -> SpectralImage:
        return read_image(self.root / entry.path)


def write_manifest(path, entries: list[CorpusEntry]) -> None:
    lines = []
    for e in entries:
        if e.split not in ("train", "val", "test"):
            raise ValidationError(f"bad split tag {e.split!r}")
        lines.append(f"{e.path}\t{e.subject}\t{e.camera}\t{e.split}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> Corpus:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise PayloadError(f"{path}:{lineno}: expected 4 tab-separated fields")
        entry = CorpusEntry(*fields)
        if entry.split not in ("train", "val", "test"):
            raise PayloadError(f"{path}:{lineno}: bad split tag {entry.split!r}")
        entries.append(entry)
    root = path.parent
    corpus = Corpus(root=root, entries=entries)
    for e in entries:
        if not (root / e.path).exists():
            raise PayloadError(f"{path}: manifest entry {e.path} does not resolve")
    return corpus


# ---------------------------------------------------------------------------
# checkpoints: meta JSON + named float64 tensor table


def save_checkpoint(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [_CKPT_MAGIC, struct.pack("<IQ", _CKPT_VERSION, len(meta_blob)), meta_blob,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        name_b = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B", arr.ndim))
        if arr.ndim:
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != _CKPT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<IQ", raw, 4)
        if version != _CKPT_VERSION:
            raise VersionError(f"{path}: unsupported checkpoint version {version}")
        off = 4 + struct.calcsize("<IQ")
        meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (n_tensors,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
            off += 4 * ndim
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
            off += 8 * count
            tensors[name] = arr.astype(np.float64).reshape(shape)
        if off != len(raw):
            raise TruncationError(f"{path}: {len(raw) - off} trailing bytes")
        return meta, tensors
    except struct.error as exc:
        raise TruncationError(f"{path}: checkpoint truncated") from exc
