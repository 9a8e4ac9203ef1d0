"""Physics-guided sinogram consistency losses and the Sobel edge extractor.

Two faces of each loss: a plain-numpy evaluator for analysis, and a tape
version (suffix _t) that participates in training graphs. Both share the same
arithmetic; tests cross-check them.

Convention note: the tensor engine's conv2d is cross-correlation, so the
Sobel kernels are flipped before being handed to it, making the applied
operation a true 2D convolution with the kernels as written below.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .grid import Tensor, conv2d, replicate_pad2d
from .projection import Sinogram, visibility_mask


class DegenerateInputWarning(UserWarning):
    pass


SOBEL_GX = np.array([[1.0, 0.0, -1.0],
                     [2.0, 0.0, -2.0],
                     [1.0, 0.0, -1.0]], dtype=np.float32)
SOBEL_GY = SOBEL_GX.T.copy()

# cross-correlation with the 180-degree rotation == convolution with the original
_SOBEL_KERNEL_CC = np.stack([SOBEL_GX[::-1, ::-1], SOBEL_GY[::-1, ::-1]])[:, None, :, :]


@dataclass
class SinoLossReport:
    mass_term: float
    visibility_term: float
    total: float
    weights: tuple[float, float]


# ---------------------------------------------------------------------------
# Sobel extraction

def sobel(grid) -> np.ndarray:
    """Gradient magnitude sqrt(Gx^2 + Gy^2) with edge-replicated borders."""
    values = grid.values if isinstance(grid, Sinogram) else np.asarray(grid)
    if values.ndim != 2 or min(values.shape) < 3:
        raise ValueError(f"sobel needs a grid of at least 3x3, got {values.shape}")
    values = values.astype(np.float64)
    gx = ndimage.convolve(values, SOBEL_GX.astype(np.float64), mode="nearest")
    gy = ndimage.convolve(values, SOBEL_GY.astype(np.float64), mode="nearest")
    return np.hypot(gx, gy).astype(np.float32)


def sobel_t(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Differentiable Sobel magnitude of a (B, 1, H, W) tensor.

    eps inside the square root keeps the gradient finite on flat regions.
    """
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"sobel_t expects (B, 1, H, W), got {x.shape}")
    kernel = Tensor(_SOBEL_KERNEL_CC.astype(x.data.dtype))
    g = conv2d(replicate_pad2d(x, 1), kernel, stride=1, pad=0)
    gx = g.narrow(1, 0, 1)
    gy = g.narrow(1, 1, 1)
    return (gx * gx + gy * gy + eps).sqrt()


# ---------------------------------------------------------------------------
# cross-view mass consistency

def cross_view_mass_loss(x) -> float:
    """Mean squared relative deviation of per-view sums from their mean."""
    values = (x.values if isinstance(x, Sinogram) else np.asarray(x)).astype(np.float64)
    m = values.sum(axis=-1)
    mbar = m.mean()
    if mbar == 0.0:
        warnings.warn("cross_view_mass_loss on a zero-mass sinogram", DegenerateInputWarning)
        return 0.0
    dev = (m - mbar) / mbar
    return float((dev * dev).mean())


def cross_view_mass_loss_t(x: Tensor, mass_floor: float = 0.0) -> Tensor:
    """Tape version over (..., n_views, n_bins); mean over leading axes.

    mass_floor > 0 replaces the denominator by sqrt(mbar^2 + floor^2), which
    keeps early-training gradients bounded when reconstructions carry almost
    no mass; the term converges to the exact relative form once |mbar| is
    well above the floor.
    """
    m = x.sum(axis=-1)
    mbar = m.mean(axis=-1, keepdims=True)
    if mass_floor > 0.0:
        denom = (mbar * mbar + mass_floor * mass_floor).sqrt()
    else:
        denom = mbar
    dev = (m - mbar) / denom
    return (dev * dev).mean()


# ---------------------------------------------------------------------------
# angular visibility constraint

def visibility_weight_grid(reference: Sinogram, known_view_indices: Sequence[int]):
    """Boolean penalty grid: True at bins of non-known views that the known
    views' support intersection says must be zero. Returns (grid, n_nonknown)."""
    known = sorted(set(int(v) for v in known_view_indices))
    if not known:
        raise ValueError("need at least one known view")
    n_views, n_bins = reference.values.shape
    grid = np.zeros((n_views, n_bins), dtype=bool)
    targets = [v for v in range(n_views) if v not in known]
    for v in targets:
        vm = visibility_mask(reference, known, reference.geometry.angles[v])
        if not vm.mask.any():
            warnings.warn(f"empty visibility mask for view {v}; penalizing the whole view",
                          DegenerateInputWarning)
        grid[v] = ~vm.mask
    return grid, len(targets)


def visibility_loss(x: Sinogram, known_view_indices: Sequence[int]) -> float:
    """Mean over non-known views of sum(x^2 over invisible bins)/n_bins."""
    grid, n_nonknown = visibility_weight_grid(x, known_view_indices)
    if n_nonknown == 0:
        return 0.0
    values = x.values.astype(np.float64)
    per_view = (values * values * grid).sum(axis=1) / x.geometry.n_bins
    return float(per_view.sum() / n_nonknown)


def visibility_loss_t(x: Tensor, penalty_grid: np.ndarray, n_nonknown: int) -> Tensor:
    """Tape version against a precomputed penalty grid; x is (..., V, B)."""
    if n_nonknown == 0:
        return Tensor(np.zeros((), dtype=x.data.dtype))
    n_bins = x.shape[-1]
    batch = int(np.prod(x.shape[:-2])) if x.ndim > 2 else 1
    w = Tensor(penalty_grid.astype(x.data.dtype))
    total = (x * x * w).sum()
    return total * (1.0 / (n_nonknown * n_bins * batch))


# ---------------------------------------------------------------------------
# combined report

def sino_loss(x: Sinogram, known_view_indices: Sequence[int],
              weights: tuple[float, float] = (1.0, 1.0)) -> SinoLossReport:
    w_mass, w_vis = weights
    mass = cross_view_mass_loss(x)
    vis = visibility_loss(x, known_view_indices)
    return SinoLossReport(mass_term=mass, visibility_term=vis,
                          total=w_mass * mass + w_vis * vis, weights=(w_mass, w_vis))


def sino_loss_t(x: Tensor, penalty_grid: np.ndarray, n_nonknown: int,
                weights: tuple[float, float] = (1.0, 1.0),
                mass_floor: float = 0.0) -> Tensor:
    w_mass, w_vis = weights
    return (cross_view_mass_loss_t(x, mass_floor=mass_floor) * w_mass
            + visibility_loss_t(x, penalty_grid, n_nonknown) * w_vis)


def stratified_known_views(n_views: int, fraction: float = 0.25) -> list[int]:
    """Evenly spread known-view subset used when no row mask picks one."""
    step = max(1, int(round(1.0 / fraction)))
    return list(range(0, n_views, step))
