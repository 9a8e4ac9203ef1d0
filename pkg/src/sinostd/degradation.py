"""Sinogram undersampling operators and the random mixing strategy.

All operators preserve the sinogram grid (masked entries are zero-filled) and
are pure functions; only the low-dose photon noise consumes a seed. `mix`
composes operators in a fixed physical order: object-level effects first
(motion replaces the base projection, then metal), then acquisition masks and
resampling, with photon noise last.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .projection import Geometry, Image, ProjectionError, Sinogram, forward_project


class DegradationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# operator descriptors (JSON-serializable recipes)

@dataclass
class LowDoseOp:
    i0: float
    kind: str = field(default="low_dose", init=False)

    def __post_init__(self):
        if self.i0 <= 0:
            raise DegradationError(f"low_dose needs I0 > 0, got {self.i0}")


@dataclass
class SparseViewOp:
    keep_every: int | None = None
    mask: list[bool] | None = None
    kind: str = field(default="sparse_view", init=False)

    def __post_init__(self):
        if (self.keep_every is None) == (self.mask is None):
            raise DegradationError("sparse_view needs exactly one of keep_every or mask")
        if self.keep_every is not None and self.keep_every < 1:
            raise DegradationError(f"keep_every must be >= 1, got {self.keep_every}")


@dataclass
class LimitedAngleOp:
    theta1: float
    theta2: float
    kind: str = field(default="limited_angle", init=False)

    def __post_init__(self):
        if not self.theta1 < self.theta2:
            raise DegradationError(f"limited_angle needs theta1 < theta2, "
                                   f"got [{self.theta1}, {self.theta2})")


@dataclass
class TruncateOp:
    s1: int
    s2: int
    kind: str = field(default="truncate", init=False)

    def __post_init__(self):
        if not 0 <= self.s1 < self.s2:
            raise DegradationError(f"truncate needs 0 <= s1 < s2, got [{self.s1}, {self.s2})")


@dataclass
class MetalOp:
    """Implant described as a disk in unit FOV coordinates; c=None means
    1.2 x max of the input sinogram."""

    cx: float
    cy: float
    radius: float
    c: float | None = None
    kind: str = field(default="metal", init=False)

    def __post_init__(self):
        if self.radius <= 0:
            raise DegradationError("metal implant radius must be positive")


@dataclass
class GeometryShiftOp:
    """Per-view detector offset delta(theta) = amplitude * sin(cycles*theta + phase), in bins."""

    amplitude: float
    cycles: float = 1.0
    phase: float = 0.0
    kind: str = field(default="geometry_shift", init=False)


@dataclass
class RingOp:
    channels: list[int]
    offsets: list[float]
    relative: bool = False
    kind: str = field(default="ring", init=False)

    def __post_init__(self):
        if len(self.channels) != len(self.offsets):
            raise DegradationError("ring needs one offset per channel")


@dataclass
class MotionOp:
    """Rigid per-view translation t(theta) = amplitude * sin(cycles*theta + phase)
    along the given axis, in pixels."""

    amplitude: float
    cycles: float = 1.0
    phase: float = 0.0
    axis: str = "x"

    kind: str = field(default="motion", init=False)

    def __post_init__(self):
        if self.axis not in ("x", "y"):
            raise DegradationError(f"motion axis must be 'x' or 'y', got {self.axis!r}")


@dataclass
class DownsampleOp:
    factor: int
    kind: str = field(default="downsample", init=False)

    def __post_init__(self):
        if self.factor < 1:
            raise DegradationError(f"downsample factor must be >= 1, got {self.factor}")


Operator = Union[LowDoseOp, SparseViewOp, LimitedAngleOp, TruncateOp, MetalOp,
                 GeometryShiftOp, RingOp, MotionOp, DownsampleOp]

OPERATOR_KINDS = ("low_dose", "sparse_view", "limited_angle", "truncate", "metal",
                  "geometry_shift", "ring", "motion", "downsample")

_OP_CLASSES = {cls.__dataclass_fields__["kind"].default: cls for cls in
               (LowDoseOp, SparseViewOp, LimitedAngleOp, TruncateOp, MetalOp,
                GeometryShiftOp, RingOp, MotionOp, DownsampleOp)}

# object-level first, photon noise last
_CANONICAL_ORDER = ("motion", "metal", "geometry_shift", "truncate", "limited_angle",
                    "sparse_view", "downsample", "ring", "low_dose")


@dataclass
class DegradationSpec:
    ops: list[Operator]
    seed: int = 0

    def to_json(self) -> dict:
        items = []
        for op in self.ops:
            entry = {"kind": op.kind}
            for name in op.__dataclass_fields__:
                if name == "kind":
                    continue
                entry[name] = getattr(op, name)
            items.append(entry)
        return {"seed": int(self.seed), "ops": items}

    @staticmethod
    def from_json(doc: dict) -> "DegradationSpec":
        ops = []
        for entry in doc.get("ops", []):
            entry = dict(entry)
            kind = entry.pop("kind", None)
            cls = _OP_CLASSES.get(kind)
            if cls is None:
                raise DegradationError(f"unknown degradation kind {kind!r}")
            ops.append(cls(**entry))
        return DegradationSpec(ops=ops, seed=int(doc.get("seed", 0)))


@dataclass
class DegradedPair:
    clean: Sinogram
    degraded: Sinogram
    spec: DegradationSpec
    source_image: Image | None = None

    def __post_init__(self):
        if not self.clean.geometry.same_grid(self.degraded.geometry):
            raise DegradationError("clean and degraded sinograms must share geometry")


# ---------------------------------------------------------------------------
# operators

def low_dose(x0: Sinogram, i0: float, seed: int) -> Sinogram:
    """Photon-starved acquisition: counts ~ Poisson(I0*exp(-x0)), zero counts
    clamped to one, returned as ln(I0/counts)."""
    if i0 <= 0:
        raise DegradationError(f"low_dose needs I0 > 0, got {i0}")
    vals = x0.values.astype(np.float64)
    if np.any(vals < 0):
        raise DegradationError("low_dose input has negative line integrals")
    rng = np.random.default_rng(np.random.SeedSequence([0x10DE, int(seed) & 0xFFFFFFFFFFFFFFFF]))
    counts = rng.poisson(i0 * np.exp(-vals))
    out = np.log(i0 / np.maximum(counts, 1))
    return Sinogram(x0.geometry, out.astype(np.float32))


def view_mask_from_keep_every(n_views: int, keep_every: int) -> np.ndarray:
    return (np.arange(n_views) % keep_every) == 0


def sparse_view(x0: Sinogram, mask: Sequence[bool]) -> Sinogram:
    """Zero the views where mask is False; grid size is preserved."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x0.geometry.n_views,):
        raise DegradationError(f"view mask length {mask.shape} != n_views "
                               f"{x0.geometry.n_views}")
    if not mask.any():
        raise DegradationError("sparse_view mask removes every view")
    out = x0.values.copy()
    out[~mask] = 0.0
    return Sinogram(x0.geometry, out)


def limited_angle(x0: Sinogram, theta1: float, theta2: float) -> Sinogram:
    """Keep views with theta1 <= angle < theta2, zero the rest."""
    if not theta1 < theta2:
        raise DegradationError(f"limited_angle window [{theta1}, {theta2}) is empty")
    keep = (x0.geometry.angles >= theta1) & (x0.geometry.angles < theta2)
    if not keep.any():
        raise DegradationError(f"limited_angle window [{theta1}, {theta2}) contains no views")
    out = x0.values.copy()
    out[~keep] = 0.0
    return Sinogram(x0.geometry, out)


def truncate(x0: Sinogram, s1: int, s2: int) -> Sinogram:
    """Keep detector bins s1 <= b < s2, zero the rest."""
    n = x0.geometry.n_bins
    if not (0 <= s1 < s2 <= n):
        raise DegradationError(f"truncate range [{s1}, {s2}) invalid for {n} bins")
    out = np.zeros_like(x0.values)
    out[:, s1:s2] = x0.values[:, s1:s2]
    return Sinogram(x0.geometry, out)


def metal(x0: Sinogram, metal_mask: Image, c: float | None = None) -> Sinogram:
    """Blend the implant's projection trace into the sinogram: where the
    (max-normalized) trace is w, output is x0*(1-w) + C*w."""
    mask_vals = metal_mask.values
    if not np.all((mask_vals == 0) | (mask_vals == 1)):
        raise DegradationError("metal mask must be binary")
    trace = forward_project(metal_mask, x0.geometry).values.astype(np.float64)
    peak = trace.max()
    if peak <= 0:
        warnings.warn("metal mask projects to nothing; returning input unchanged")
        return x0.copy()
    if c is None:
        c = 1.2 * float(x0.values.max())
    w = trace / peak
    out = x0.values.astype(np.float64) * (1.0 - w) + c * w
    return Sinogram(x0.geometry, out.astype(np.float32))


def geometry_shift(x0: Sinogram, delta: Sequence[float]) -> Sinogram:
    """Resample each view at bin positions b + delta[view], zero fill outside."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (x0.geometry.n_views,):
        raise DegradationError(f"delta length {delta.shape} != n_views {x0.geometry.n_views}")
    if np.any(np.abs(delta) >= x0.geometry.n_bins):
        raise DegradationError("geometry shift exceeds the detector width")
    n = x0.geometry.n_bins
    grid = np.arange(n, dtype=np.float64)
    out = np.empty_like(x0.values)
    for v in range(x0.geometry.n_views):
        out[v] = np.interp(grid + delta[v], grid, x0.values[v].astype(np.float64),
                           left=0.0, right=0.0)
    return Sinogram(x0.geometry, out)


def ring(x0: Sinogram, channels: Sequence[int], offsets: Sequence[float]) -> Sinogram:
    """Add a view-independent offset to the given detector channels."""
    channels = np.asarray(channels, dtype=int)
    offsets = np.asarray(offsets, dtype=np.float64)
    if channels.shape != offsets.shape:
        raise DegradationError("ring needs one offset per channel")
    if channels.size and (channels.min() < 0 or channels.max() >= x0.geometry.n_bins):
        raise DegradationError("ring channel index out of range")
    out = x0.values.astype(np.float64).copy()
    out[:, channels] += offsets
    return Sinogram(x0.geometry, out.astype(np.float32))


def motion_shifts(model: MotionOp, angles: np.ndarray) -> np.ndarray:
    t = model.amplitude * np.sin(model.cycles * angles + model.phase)
    shifts = np.zeros((angles.size, 2), dtype=np.float64)
    shifts[:, 0 if model.axis == "x" else 1] = t
    return shifts


def motion(f: Image, geometry: Geometry, model: MotionOp | np.ndarray) -> Sinogram:
    """Project a per-view rigidly translated object."""
    if isinstance(model, MotionOp):
        shifts = motion_shifts(model, geometry.angles)
    else:
        shifts = np.asarray(model, dtype=np.float64)
    return forward_project(f, geometry, view_shifts=shifts)


def downsample(x0: Sinogram, factor: int) -> Sinogram:
    """Keep every factor-th detector column, zero the rest."""
    if factor < 1:
        raise DegradationError(f"downsample factor must be >= 1, got {factor}")
    if factor >= x0.geometry.n_bins:
        raise DegradationError(f"downsample factor {factor} >= n_bins {x0.geometry.n_bins}")
    out = np.zeros_like(x0.values)
    out[:, ::factor] = x0.values[:, ::factor]
    return Sinogram(x0.geometry, out)


# ---------------------------------------------------------------------------
# composition

def _metal_mask_image(op: MetalOp, side: int, pixel_size: float) -> Image:
    center = (side - 1) / 2.0
    radius_px = op.radius * side / 2.0
    idx = np.arange(side)
    x = (idx - center) * pixel_size
    y = (idx - center) * pixel_size
    cx = op.cx * side * pixel_size / 2.0
    cy = op.cy * side * pixel_size / 2.0
    mask = ((x[None, :] - cx) ** 2 + (y[:, None] - cy) ** 2) <= radius_px ** 2
    return Image(mask.astype(np.float32), pixel_size)


def mix(f: Image, geometry: Geometry, spec: DegradationSpec) -> DegradedPair:
    """Apply the spec's operators to the phantom's projection in canonical
    physical order; all randomness derives from spec.seed."""
    by_kind: dict[str, Operator] = {}
    for op in spec.ops:
        if op.kind in by_kind:
            raise DegradationError(f"duplicate degradation kind {op.kind!r}")
        by_kind[op.kind] = op

    clean = forward_project(f, geometry)
    if "motion" in by_kind:
        x = motion(f, geometry, by_kind["motion"])
    else:
        x = clean.copy()
    for kind in _CANONICAL_ORDER[1:]:
        op = by_kind.get(kind)
        if op is None:
            continue
        if kind == "metal":
            x = metal(x, _metal_mask_image(op, f.side, f.pixel_size), op.c)
        elif kind == "geometry_shift":
            delta = op.amplitude * np.sin(op.cycles * geometry.angles + op.phase)
            x = geometry_shift(x, delta)
        elif kind == "truncate":
            x = truncate(x, op.s1, op.s2)
        elif kind == "limited_angle":
            x = limited_angle(x, op.theta1, op.theta2)
        elif kind == "sparse_view":
            mask = (np.asarray(op.mask, dtype=bool) if op.mask is not None
                    else view_mask_from_keep_every(geometry.n_views, op.keep_every))
            x = sparse_view(x, mask)
        elif kind == "downsample":
            x = downsample(x, op.factor)
        elif kind == "ring":
            offsets = np.asarray(op.offsets, dtype=np.float64)
            if op.relative:
                offsets = offsets * float(np.abs(x.values).max())
            x = ring(x, op.channels, offsets)
        elif kind == "low_dose":
            # upstream ops may leave small negatives (ring); photon model clamps
            clamped = Sinogram(x.geometry, np.maximum(x.values, 0.0))
            x = low_dose(clamped, op.i0, spec.seed)
    return DegradedPair(clean=clean, degraded=x, spec=spec, source_image=f)


# ---------------------------------------------------------------------------
# random mixing strategy

# documented sampling ranges for random_spec
RANDOM_RANGES = {
    "low_dose_i0": (1e4, 1e6),          # log-uniform
    "sparse_keep_every": (2, 3, 4, 6),
    "limited_span_deg": (90.0, 150.0),
    "truncate_keep_frac": (0.5, 0.9),
    "ring_channels": (1, 4),
    "ring_rel_offset": 0.10,            # positive, relative to sinogram max
    "shift_amplitude_bins": (0.5, 3.0),
    "motion_amplitude_px": (0.5, 3.0),
    "metal_radius_unit": (0.03, 0.08),
    "downsample_factors": (2, 4),
}


def random_spec(seed: int, k_min: int = 1, k_max: int = 3,
                n_views_hint: int = 128, n_bins_hint: int = 128) -> DegradationSpec:
    """Uniformly sample k distinct operator kinds with plausible parameters."""
    if not 1 <= k_min <= k_max <= len(OPERATOR_KINDS):
        raise DegradationError(f"need 1 <= k_min <= k_max <= {len(OPERATOR_KINDS)}")
    rng = np.random.default_rng(np.random.SeedSequence([0x5BEC, int(seed) & 0xFFFFFFFFFFFFFFFF]))
    k = int(rng.integers(k_min, k_max + 1))
    kinds = [OPERATOR_KINDS[i] for i in rng.choice(len(OPERATOR_KINDS), size=k, replace=False)]
    ops: list[Operator] = []
    for kind in kinds:
        if kind == "low_dose":
            lo, hi = RANDOM_RANGES["low_dose_i0"]
            ops.append(LowDoseOp(i0=float(10 ** rng.uniform(math.log10(lo), math.log10(hi)))))
        elif kind == "sparse_view":
            ops.append(SparseViewOp(keep_every=int(rng.choice(RANDOM_RANGES["sparse_keep_every"]))))
        elif kind == "limited_angle":
            span = math.radians(rng.uniform(*RANDOM_RANGES["limited_span_deg"]))
            theta1 = rng.uniform(0.0, math.pi - span)
            ops.append(LimitedAngleOp(theta1=float(theta1), theta2=float(theta1 + span)))
        elif kind == "truncate":
            frac = rng.uniform(*RANDOM_RANGES["truncate_keep_frac"])
            width = max(1, int(round(frac * n_bins_hint)))
            s1 = int(rng.integers(0, n_bins_hint - width + 1))
            ops.append(TruncateOp(s1=s1, s2=s1 + width))
        elif kind == "metal":
            radius = rng.uniform(*RANDOM_RANGES["metal_radius_unit"])
            rho = rng.uniform(0.0, 0.5)
            phi = rng.uniform(0.0, 2 * math.pi)
            ops.append(MetalOp(cx=float(rho * math.cos(phi)), cy=float(rho * math.sin(phi)),
                               radius=float(radius)))
        elif kind == "geometry_shift":
            ops.append(GeometryShiftOp(amplitude=float(rng.uniform(*RANDOM_RANGES["shift_amplitude_bins"])),
                                       cycles=float(rng.integers(1, 4)),
                                       phase=float(rng.uniform(0.0, 2 * math.pi))))
        elif kind == "ring":
            lo, hi = RANDOM_RANGES["ring_channels"]
            n_ch = int(rng.integers(lo, hi + 1))
            channels = sorted(int(c) for c in rng.choice(n_bins_hint, size=n_ch, replace=False))
            offsets = [float(rng.uniform(0.02, RANDOM_RANGES["ring_rel_offset"]))
                       for _ in channels]
            ops.append(RingOp(channels=channels, offsets=offsets, relative=True))
        elif kind == "motion":
            ops.append(MotionOp(amplitude=float(rng.uniform(*RANDOM_RANGES["motion_amplitude_px"])),
                                cycles=float(rng.integers(1, 4)),
                                phase=float(rng.uniform(0.0, 2 * math.pi)),
                                axis="x"))
        elif kind == "downsample":
            ops.append(DownsampleOp(factor=int(rng.choice(RANDOM_RANGES["downsample_factors"]))))
    return DegradationSpec(ops=ops, seed=int(seed))
