"""Parallel-beam acquisition geometry: forward/back projection, FBP, visibility
masks, and procedural phantoms.

Rays are integrated Joseph-style: bilinear samples at half-pixel steps along
each ray, restricted to the field-of-view disk. The back projector scatters
with the exact same sample points and weights, so the two operators form an
adjoint pair to float precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    """Angles and detector layout of a parallel-beam scan."""

    n_views: int
    n_bins: int
    detector_spacing: float = 1.0
    fov_radius: float | None = None
    angles: np.ndarray | None = None

    def __post_init__(self):
        if self.n_views < 1 or self.n_bins < 1:
            raise ProjectionError(f"geometry needs n_views >= 1 and n_bins >= 1, "
                                  f"got {self.n_views}, {self.n_bins}")
        if self.detector_spacing <= 0:
            raise ProjectionError("detector_spacing must be positive")
        if self.angles is None:
            angles = np.arange(self.n_views, dtype=np.float64) * (math.pi / self.n_views)
        else:
            angles = np.asarray(self.angles, dtype=np.float64)
        if angles.shape != (self.n_views,):
            raise ProjectionError(f"angles shape {angles.shape} != ({self.n_views},)")
        if np.any(angles < 0) or np.any(angles >= 2 * math.pi):
            raise ProjectionError("angles must lie in [0, 2*pi)")
        if self.n_views > 1 and np.any(np.diff(angles) <= 0):
            raise ProjectionError("angles must be strictly increasing")
        object.__setattr__(self, "angles", angles)
        if self.fov_radius is None:
            object.__setattr__(self, "fov_radius", self.n_bins * self.detector_spacing / 2.0)
        elif self.fov_radius <= 0:
            raise ProjectionError("fov_radius must be positive")

    @property
    def bin_centers(self) -> np.ndarray:
        return (np.arange(self.n_bins) - (self.n_bins - 1) / 2.0) * self.detector_spacing

    def same_grid(self, other: "Geometry") -> bool:
        return (self.n_views == other.n_views and self.n_bins == other.n_bins
                and np.allclose(self.angles, other.angles)
                and self.detector_spacing == other.detector_spacing)


@dataclass
class Image:
    """Square grid of attenuation values; row index maps to +y."""

    values: np.ndarray
    pixel_size: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ProjectionError(f"image must be square 2D, got shape {self.values.shape}")
        if self.values.shape[0] < 2:
            raise ProjectionError("image side must be >= 2")
        if not np.all(np.isfinite(self.values)):
            raise ProjectionError("image contains non-finite values")

    @property
    def side(self) -> int:
        return self.values.shape[0]


@dataclass
class Sinogram:
    """n_views x n_bins grid of line integrals (views are rows)."""

    geometry: Geometry
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        expected = (self.geometry.n_views, self.geometry.n_bins)
        if self.values.shape != expected:
            raise ProjectionError(f"sinogram shape {self.values.shape} != geometry {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ProjectionError("sinogram contains non-finite values")

    def copy(self) -> "Sinogram":
        return Sinogram(self.geometry, self.values.copy())


@dataclass
class VisibilityMask:
    target_angle: float
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 1:
            raise ProjectionError("visibility mask must be 1D over detector bins")


# ---------------------------------------------------------------------------
# ray sampling core

def _sample_lattice(geometry: Geometry, side: int, pixel_size: float, angle: float,
                    shift: tuple[float, float] = (0.0, 0.0)):
    """Pixel-space coordinates of the ray sample lattice for one view.

    Returns (rows, cols, dt) with rows/cols shaped (n_bins, n_steps). `shift`
    displaces the sampled object (used by the motion degradation).
    """
    radius = geometry.fov_radius
    step = 0.5 * pixel_size
    n_steps = max(1, int(math.ceil(2.0 * radius / step)))
    dt = 2.0 * radius / n_steps
    t = -radius + (np.arange(n_steps) + 0.5) * dt
    s = geometry.bin_centers
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    # world point = s*u + t*d with u=(cos,sin), d=(-sin,cos); motion samples f(p - shift)
    x = s[:, None] * cos_a - t[None, :] * sin_a - shift[0]
    y = s[:, None] * sin_a + t[None, :] * cos_a - shift[1]
    center = (side - 1) / 2.0
    cols = x / pixel_size + center
    rows = y / pixel_size + center
    return rows, cols, dt


def _corner_terms(rows: np.ndarray, cols: np.ndarray, side: int):
    """Bilinear corner indices, weights and validity for gather/scatter."""
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    terms = []
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                      (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr = r0 + dr
        cc = c0 + dc
        valid = (rr >= 0) & (rr < side) & (cc >= 0) & (cc < side)
        terms.append((np.clip(rr, 0, side - 1), np.clip(cc, 0, side - 1), w * valid))
    return terms


def _fov_mask(side: int, pixel_size: float, radius: float) -> np.ndarray:
    center = (side - 1) / 2.0
    idx = (np.arange(side) - center) * pixel_size
    return (idx[:, None] ** 2 + idx[None, :] ** 2) <= radius ** 2


def _project_view(masked: np.ndarray, geometry: Geometry, pixel_size: float, angle: float,
                  shift: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    side = masked.shape[0]
    rows, cols, dt = _sample_lattice(geometry, side, pixel_size, angle, shift)
    flat = masked.ravel()
    acc = np.zeros(rows.shape, dtype=np.float64)
    for rr, cc, w in _corner_terms(rows, cols, side):
        acc += flat[rr * side + cc] * w
    return acc.sum(axis=1) * dt


def _backproject_view(row_values: np.ndarray, geometry: Geometry, side: int,
                      pixel_size: float, angle: float) -> np.ndarray:
    rows, cols, dt = _sample_lattice(geometry, side, pixel_size, angle)
    out = np.zeros(side * side, dtype=np.float64)
    vals = np.broadcast_to(row_values[:, None] * dt, rows.shape)
    for rr, cc, w in _corner_terms(rows, cols, side):
        out += np.bincount((rr * side + cc).ravel(), weights=(vals * w).ravel(),
                           minlength=side * side)
    return out.reshape(side, side)


# ---------------------------------------------------------------------------
# public operators

def forward_project(image: Image, geometry: Geometry,
                    view_shifts: np.ndarray | None = None) -> Sinogram:
    """Line integrals of the image over every view; pixels outside the FOV disk
    are ignored. `view_shifts` (n_views, 2) displaces the object per view."""
    masked = image.values.astype(np.float64) * _fov_mask(image.side, image.pixel_size,
                                                         geometry.fov_radius)
    if view_shifts is not None:
        view_shifts = np.asarray(view_shifts, dtype=np.float64)
        if view_shifts.shape != (geometry.n_views, 2):
            raise ProjectionError(f"view_shifts shape {view_shifts.shape} != "
                                  f"({geometry.n_views}, 2)")
    out = np.empty((geometry.n_views, geometry.n_bins), dtype=np.float64)
    for v, angle in enumerate(geometry.angles):
        shift = tuple(view_shifts[v]) if view_shifts is not None else (0.0, 0.0)
        out[v] = _project_view(masked, geometry, image.pixel_size, angle, shift)
    return Sinogram(geometry, out.astype(np.float32))


def back_project(sino: Sinogram, side: int | None = None, pixel_size: float = 1.0) -> Image:
    """Adjoint of forward_project: smear each view along its rays."""
    side = sino.geometry.n_bins if side is None else side
    acc = np.zeros((side, side), dtype=np.float64)
    values = sino.values.astype(np.float64)
    for v, angle in enumerate(sino.geometry.angles):
        acc += _backproject_view(values[v], sino.geometry, side, pixel_size, angle)
    acc *= _fov_mask(side, pixel_size, sino.geometry.fov_radius)
    return Image(acc.astype(np.float32), pixel_size)


def ramp_filter(sino: Sinogram, hann: bool = False) -> Sinogram:
    """Ram-Lak filtering of every view via zero-padded FFT."""
    n = sino.geometry.n_bins
    n_pad = 1 << max(1, int(math.ceil(math.log2(2 * n))))
    freqs = np.fft.rfftfreq(n_pad, d=sino.geometry.detector_spacing)
    response = np.abs(freqs)
    if hann:
        response = response * (0.5 + 0.5 * np.cos(math.pi * freqs / freqs[-1]))
    spectra = np.fft.rfft(sino.values.astype(np.float64), n=n_pad, axis=1)
    filtered = np.fft.irfft(spectra * response, n=n_pad, axis=1)[:, :n]
    return Sinogram(sino.geometry, filtered.astype(np.float32))


def fbp(sino: Sinogram, side: int | None = None, pixel_size: float = 1.0,
        hann: bool = False) -> Image:
    """Filtered back-projection: ramp filter per view, back-project, scale by
    pi/n_views (with the detector/pixel measure correction)."""
    filtered = ramp_filter(sino, hann=hann)
    image = back_project(filtered, side=side, pixel_size=pixel_size)
    scale = (math.pi / sino.geometry.n_views) * sino.geometry.detector_spacing / pixel_size ** 2
    return Image(image.values * scale, pixel_size)


def visibility_mask(sino: Sinogram, known_view_indices: Sequence[int], target_angle: float,
                    side: int | None = None, pixel_size: float = 1.0,
                    support_threshold: float = 1e-6) -> VisibilityMask:
    """Detector bins where a projection at target_angle can be nonzero.

    Each known view's support is binarized (> support_threshold x view max),
    back-projected as an indicator, the supports are intersected in the image
    domain, and the intersection is forward-projected along target_angle; bins
    with strictly positive projection are visible. An empty intersection yields
    an all-false mask.
    """
    known = list(known_view_indices)
    if not known:
        raise ProjectionError("visibility_mask needs at least one known view")
    geometry = sino.geometry
    side = geometry.n_bins if side is None else side
    region: np.ndarray | None = None
    for v in known:
        row = sino.values[v].astype(np.float64)
        peak = row.max()
        support = (row > support_threshold * peak) if peak > 0 else np.zeros_like(row, dtype=bool)
        band = _backproject_view(support.astype(np.float64), geometry, side, pixel_size,
                                 geometry.angles[v]) > 0
        region = band if region is None else (region & band)
        if not region.any():
            return VisibilityMask(target_angle, np.zeros(geometry.n_bins, dtype=bool))
    masked = region.astype(np.float64) * _fov_mask(side, pixel_size, geometry.fov_radius)
    projection = _project_view(masked, geometry, pixel_size, target_angle)
    return VisibilityMask(target_angle, projection > 0)


# ---------------------------------------------------------------------------
# phantoms

# (x0, y0, a, b, angle_deg, value) in unit coordinates, Kak & Slaney gray levels
SHEPP_LOGAN_ELLIPSES = [
    (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
    (0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
    (-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
    (0.0, -0.605, 0.023, 0.023, 0.0, 0.1),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
]

_SUPERSAMPLE = 4


def _rasterize_ellipses(side: int, ellipses, pixel_size: float = 1.0) -> np.ndarray:
    """Anti-aliased sum of ellipses given in unit coordinates (FOV disk = unit disk)."""
    center = (side - 1) / 2.0
    radius = side * pixel_size / 2.0
    ss = _SUPERSAMPLE
    offsets = (np.arange(ss) + 0.5) / ss - 0.5
    base = np.arange(side)
    acc = np.zeros((side, side), dtype=np.float64)
    for oy in offsets:
        for ox in offsets:
            x = ((base + ox) - center) * pixel_size / radius
            y = ((base + oy) - center) * pixel_size / radius
            xg = np.broadcast_to(x[None, :], (side, side))
            yg = np.broadcast_to(y[:, None], (side, side))
            for (x0, y0, a, b, ang, value) in ellipses:
                phi = math.radians(ang)
                xr = (xg - x0) * math.cos(phi) + (yg - y0) * math.sin(phi)
                yr = -(xg - x0) * math.sin(phi) + (yg - y0) * math.cos(phi)
                acc += value * ((xr / a) ** 2 + (yr / b) ** 2 <= 1.0)
    return acc / (ss * ss)


def _apply_fov(values: np.ndarray, pixel_size: float) -> np.ndarray:
    side = values.shape[0]
    return values * _fov_mask(side, pixel_size, side * pixel_size / 2.0)


def shepp_logan(side: int, pixel_size: float = 1.0) -> Image:
    """Standard Shepp-Logan head phantom normalized to [0, 1]."""
    if side < 16:
        raise ProjectionError("phantom side must be >= 16")
    values = _rasterize_ellipses(side, SHEPP_LOGAN_ELLIPSES, pixel_size)
    values = np.clip(values, 0.0, None)
    peak = values.max()
    if peak > 0:
        values = values / peak
    return Image(_apply_fov(values, pixel_size).astype(np.float32), pixel_size)


def disk_phantom(side: int, radius: float, value: float = 1.0, pixel_size: float = 1.0) -> Image:
    """Centered disk of the given radius (in pixels) and constant value."""
    unit_r = 2.0 * radius / side
    values = _rasterize_ellipses(side, [(0.0, 0.0, unit_r, unit_r, 0.0, value)], pixel_size)
    return Image(_apply_fov(values, pixel_size).astype(np.float32), pixel_size)


def random_ellipse_phantom(side: int, n_ellipses: int | None = None, seed: int = 0,
                           pixel_size: float = 1.0) -> Image:
    """Seeded random sum of 3-8 ellipses, non-negative, support inside the FOV disk."""
    if side < 16:
        raise ProjectionError("phantom side must be >= 16")
    rng = np.random.default_rng(np.random.SeedSequence([0x9E3779B9, int(seed)]))
    if n_ellipses is None:
        n_ellipses = int(rng.integers(3, 9))
    if not 1 <= n_ellipses <= 16:
        raise ProjectionError("n_ellipses out of range")
    ellipses = []
    for i in range(n_ellipses):
        a = rng.uniform(0.08, 0.45)
        b = rng.uniform(0.08, 0.45)
        reach = max(a, b)
        rho = rng.uniform(0.0, max(0.0, 0.92 - reach))
        phi = rng.uniform(0.0, 2 * math.pi)
        x0 = rho * math.cos(phi)
        y0 = rho * math.sin(phi)
        ang = rng.uniform(0.0, 180.0)
        value = rng.uniform(0.2, 1.0) if i == 0 else rng.uniform(-0.3, 1.0)
        ellipses.append((x0, y0, a, b, ang, value))
    values = np.clip(_rasterize_ellipses(side, ellipses, pixel_size), 0.0, None)
    return Image(_apply_fov(values, pixel_size).astype(np.float32), pixel_size)
