"""Synthetic anisotropic volumes, the CSVL binary format, and fold splits.

The phantom is a pair of nested ellipsoids in physical (mm) coordinates: the
inner ellipsoid is class 2, the shell between inner and outer boundaries is
class 1, everything else is background. Ellipsoids never touch the first or
last slice, so per-slice attention has a real signal to learn.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class VolumeFormatError(IOError):
    """Base class for CSVL decode failures."""


class BadMagicError(VolumeFormatError):
    pass


class VersionMismatchError(VolumeFormatError):
    pass


class TruncatedFileError(VolumeFormatError):
    pass


@dataclass
class Volume:
    data: np.ndarray                   # (l, c, h, w) float64
    spacing: tuple[float, float, float]  # (z, y, x) in mm
    labels: np.ndarray | None = None   # (l, h, w) int32
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ValueError("volume data must be (l, c, h, w)")
        if min(self.spacing) <= 0:
            raise ValueError("spacings must be positive")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int32)
            l, _, h, w = self.data.shape
            if self.labels.shape != (l, h, w):
                raise ValueError("labels must share (l, h, w) with data")


@dataclass
class PhantomSpec:
    size: tuple[int, int, int] = (8, 32, 32)  # (l, h, w)
    spacing: tuple[float, float, float] = (5.0, 1.0, 1.0)
    num_classes: int = 3
    noise_sigma: float = 0.05
    intensities: tuple[float, ...] = (0.1, 0.5, 0.9)  # per class
    seed: int = 0

    def __post_init__(self):
        if self.size[0] < 4:
            raise ValueError("phantom needs at least 4 slices")
        if self.num_classes != 3:
            raise ValueError("phantom models exactly 3 classes")
        if len(set(self.intensities)) != len(self.intensities):
            raise ValueError("class intensities must be distinct")
        if len(self.intensities) != self.num_classes:
            raise ValueError("one intensity per class required")


def generate_phantom(spec: PhantomSpec, seed: int | None = None) -> Volume:
    """Deterministic nested-ellipsoid volume with labels."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    l, h, w = spec.size
    zs, ys, xs = spec.spacing
    z_extent, y_extent, x_extent = (l - 1) * zs, (h - 1) * ys, (w - 1) * xs

    # outer ellipsoid center near the middle, z semi-axis kept off the
    # first/last slice by at least half a slice spacing
    cz = z_extent * rng.uniform(0.4, 0.6)
    cy = y_extent * rng.uniform(0.4, 0.6)
    cx = x_extent * rng.uniform(0.4, 0.6)
    az_max = min(cz, z_extent - cz) - 0.5 * zs
    if az_max <= zs:
        raise ValueError("volume too shallow for an interior ellipsoid")
    az = rng.uniform(0.6, 0.95) * az_max
    ay = rng.uniform(0.28, 0.42) * y_extent
    ax = rng.uniform(0.28, 0.42) * x_extent
    inner_scale = rng.uniform(0.4, 0.6)

    zg = np.arange(l)[:, None, None] * zs
    yg = np.arange(h)[None, :, None] * ys
    xg = np.arange(w)[None, None, :] * xs
    outer = (((zg - cz) / az) ** 2 + ((yg - cy) / ay) ** 2
             + ((xg - cx) / ax) ** 2) <= 1.0
    inner = (((zg - cz) / (inner_scale * az)) ** 2
             + ((yg - cy) / (inner_scale * ay)) ** 2
             + ((xg - cx) / (inner_scale * ax)) ** 2) <= 1.0

    labels = np.zeros((l, h, w), dtype=np.int32)
    labels[outer] = 1
    labels[inner] = 2
    data = np.take(np.asarray(spec.intensities), labels).astype(np.float64)
    data += rng.standard_normal((l, h, w)) * spec.noise_sigma
    sid = f"phantom-{spec.seed if seed is None else seed:06d}"
    return Volume(data=data[:, None, :, :], spacing=spec.spacing,
                  labels=labels, id=sid)


# ---------------------------------------------------------------------------
# CSVL binary format
#
#   magic "CSVL" | version u8 (=1) | l,c,h,w u32 LE | has_labels u8 |
#   spacing 3 x f64 LE | id_len u16 LE | id UTF-8 |
#   data f64 LE row-major (l,c,h,w) | labels i32 LE (l,h,w) if present

_MAGIC = b"CSVL"
_VERSION = 1


def write_volume(v: Volume, path) -> None:
    l, c, h, w = v.data.shape
    ident = v.id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<B4IB3dH", _VERSION, l, c, h, w,
                             1 if v.labels is not None else 0,
                             *v.spacing, len(ident)))
        fh.write(ident)
        fh.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
        if v.labels is not None:
            fh.write(np.ascontiguousarray(v.labels, dtype="<i4").tobytes())


def _must_read(fh, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise TruncatedFileError(f"truncated while reading {what}")
    return raw


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        magic = _must_read(fh, 4, "magic")
        if magic != _MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        header = _must_read(fh, struct.calcsize("<B4IB3dH"), "header")
        (version, l, c, h, w, has_labels, zs, ys, xs,
         id_len) = struct.unpack("<B4IB3dH", header)
        if version != _VERSION:
            raise VersionMismatchError(f"unsupported version {version}")
        ident = _must_read(fh, id_len, "id").decode("utf-8")
        data = np.frombuffer(_must_read(fh, 8 * l * c * h * w, "voxel data"),
                             dtype="<f8").reshape(l, c, h, w).copy()
        labels = None
        if has_labels:
            labels = np.frombuffer(_must_read(fh, 4 * l * h * w, "labels"),
                                   dtype="<i4").reshape(l, h, w).copy()
    return Volume(data=data, spacing=(zs, ys, xs), labels=labels, id=ident)


def expected_file_size(v: Volume) -> int:
    l, c, h, w = v.data.shape
    header = 4 + struct.calcsize("<B4IB3dH") + len(v.id.encode("utf-8"))
    return header + 8 * l * c * h * w + (4 * l * h * w if v.labels is not None else 0)


# ---------------------------------------------------------------------------
# splits and manifests

def split_folds(ids: list[str], k: int, seed: int) -> list[list[str]]:
    """Seeded round-robin fold assignment, invariant to input order."""
    if k > len(ids):
        raise ValueError(f"cannot make {k} folds from {len(ids)} ids")
    rng = np.random.default_rng(seed)
    shuffled = sorted(ids)
    rng.shuffle(shuffled)
    folds: list[list[str]] = [[] for _ in range(k)]
    for i, ident in enumerate(shuffled):
        folds[i % k].append(ident)
    return folds


def write_manifest(path, entries: list[tuple[str, int]]) -> None:
    """One `relative-path<TAB>fold` line per volume."""
    with open(path, "w", encoding="utf-8") as fh:
        for rel, fold in entries:
            fh.write(f"{rel}\t{fold}\n")


def read_manifest(path) -> list[tuple[Path, int]]:
    base = Path(path).parent
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rel, fold = line.rsplit("\t", 1)
            out.append((base / rel, int(fold)))
    return out


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
