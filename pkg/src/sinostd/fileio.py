"""Binary sinogram (SGRM) and image (SIMG) files, plus 16-bit PGM export.

Both formats are little-endian and self-describing:

    SGRM: magic "SGRM", version u16, n_views u32, n_bins u32,
          angle model tag u8 (0 = even spacing over [0, pi)),
          detector_spacing f64, then n_views*n_bins f32 row-major.
    SIMG: magic "SIMG", version u16, side u32, pixel_size f64,
          then side*side f32 row-major.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .projection import Geometry, Image, Sinogram

SINO_MAGIC = b"SGRM"
IMAGE_MAGIC = b"SIMG"
FORMAT_VERSION = 1
ANGLES_EVEN_HALF_TURN = 0


class FileFormatError(IOError):
    """Malformed file; message carries the failing byte offset."""


class _Cursor:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.path = path
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise FileFormatError(f"{self.path}: truncated while reading {what} at byte "
                                  f"{self.offset} (need {n}, have {len(self.blob) - self.offset})")
        piece = self.blob[self.offset:self.offset + n]
        self.offset += n
        return piece

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _is_even_half_turn(geometry: Geometry) -> bool:
    expected = np.arange(geometry.n_views) * (math.pi / geometry.n_views)
    return bool(np.allclose(geometry.angles, expected, atol=1e-12))


def write_sinogram(path, sino: Sinogram) -> None:
    if not _is_even_half_turn(sino.geometry):
        raise FileFormatError(f"{path}: only the even [0, pi) angle model is storable")
    with open(path, "wb") as fh:
        fh.write(SINO_MAGIC)
        fh.write(struct.pack("<HIIBd", FORMAT_VERSION, sino.geometry.n_views,
                             sino.geometry.n_bins, ANGLES_EVEN_HALF_TURN,
                             sino.geometry.detector_spacing))
        fh.write(np.ascontiguousarray(sino.values, dtype="<f4").tobytes())


def read_sinogram(path) -> Sinogram:
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read(), path)
    magic = cur.take(4, "magic")
    if magic != SINO_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r} at byte 0, expected {SINO_MAGIC!r}")
    version, n_views, n_bins, tag, spacing = cur.unpack("<HIIBd", "header")
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version} at byte 4")
    if tag != ANGLES_EVEN_HALF_TURN:
        raise FileFormatError(f"{path}: unknown angle model tag {tag} at byte 14")
    raw = cur.take(4 * n_views * n_bins, "sinogram data")
    if cur.offset != len(cur.blob):
        raise FileFormatError(f"{path}: {len(cur.blob) - cur.offset} trailing bytes "
                              f"at byte {cur.offset}")
    values = np.frombuffer(raw, dtype="<f4").reshape(n_views, n_bins).astype(np.float32)
    return Sinogram(Geometry(n_views, n_bins, detector_spacing=spacing), values)


def write_image(path, image: Image) -> None:
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<HId", FORMAT_VERSION, image.side, image.pixel_size))
        fh.write(np.ascontiguousarray(image.values, dtype="<f4").tobytes())


def read_image(path) -> Image:
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read(), path)
    magic = cur.take(4, "magic")
    if magic != IMAGE_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r} at byte 0, expected {IMAGE_MAGIC!r}")
    version, side, pixel_size = cur.unpack("<HId", "header")
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version} at byte 4")
    raw = cur.take(4 * side * side, "image data")
    if cur.offset != len(cur.blob):
        raise FileFormatError(f"{path}: {len(cur.blob) - cur.offset} trailing bytes "
                              f"at byte {cur.offset}")
    values = np.frombuffer(raw, dtype="<f4").reshape(side, side).astype(np.float32)
    return Image(values, pixel_size=pixel_size)


def write_pgm(path, grid) -> None:
    """16-bit binary PGM with min-max windowing, for quick eyeballing."""
    values = np.asarray(getattr(grid, "values", grid), dtype=np.float64)
    if values.ndim != 2:
        raise FileFormatError(f"{path}: PGM export needs a 2D grid, got shape {values.shape}")
    lo, hi = float(values.min()), float(values.max())
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    scaled = ((values - lo) * scale).round().astype(">u2")
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n65535\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(scaled.tobytes())
