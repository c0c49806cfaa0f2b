"""Volumetric marker heatmaps: synthesis with controlled corruption, soft-argmax decoding
and confidence read-out.

Voxel ``(d, h, w)`` covers the box starting at ``origin + (d, h, w) * voxel_size``; its
center is at ``origin + (idx + 0.5) * voxel_size``. Array axis 0 is depth and maps to
the first metric coordinate, axis 1 to the second, axis 2 to the third.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class VoxelGrid:
    dims: tuple
    origin: tuple
    voxel_size: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in np.broadcast_to(self.dims, (3,)))
        origin = tuple(float(o) for o in np.broadcast_to(self.origin, (3,)))
        size = tuple(float(s) for s in np.broadcast_to(self.voxel_size, (3,)))
        if min(dims) < 2:
            raise ValueError(f"every grid dimension must be >= 2, got {dims}")
        if not min(size) > 0:
            raise ValueError(f"voxel size must be positive, got {size}")
        if not np.all(np.isfinite(origin)):
            raise ValueError("grid origin must be finite")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", size)

    @classmethod
    def centered(cls, n, extent_mm):
        """Cubic ``n``-voxel grid spanning ``[-extent_mm, extent_mm]`` on every axis."""
        return cls((n, n, n), (-extent_mm,) * 3, (2.0 * extent_mm / n,) * 3)

    @property
    def n_voxels(self):
        return int(np.prod(self.dims))

    def axis_centers(self, axis):
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.voxel_size[axis]

    def voxel_center(self, idx):
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + (idx + 0.5) * np.asarray(self.voxel_size)

    def to_voxel_coords(self, P):
        """Continuous voxel coordinates; voxel centers sit at integer values."""
        P = np.asarray(P, dtype=np.float64)
        return (P - np.asarray(self.origin)) / np.asarray(self.voxel_size) - 0.5

    @property
    def bounds(self):
        lo = np.asarray(self.origin)
        return lo, lo + np.asarray(self.dims) * np.asarray(self.voxel_size)


@dataclass
class VoxelHeatmapSet:
    grid: VoxelGrid
    H: np.ndarray

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        if self.H.ndim != 4 or self.H.shape[1:] != self.grid.dims:
            raise ValueError(f"heatmaps must be (K, {self.grid.dims}), got {self.H.shape}")

    @property
    def K(self):
        return self.H.shape[0]


@dataclass
class MarkerEstimate:
    P: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64).reshape(-1, 3)
        self.C = np.asarray(self.C, dtype=np.float64).reshape(-1)
        if self.C.shape[0] != self.P.shape[0]:
            raise ValueError(f"{self.P.shape[0]} positions but {self.C.shape[0]} confidences")
        if not np.all(np.isfinite(self.P)):
            raise ValueError("marker positions must be finite")
        if np.any(~np.isfinite(self.C)) or np.any(self.C < 0) or np.any(self.C > 1):
            raise ValueError("confidences must lie in [0, 1]")

    def to_json(self):
        return {"P": self.P.tolist(), "C": self.C.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["P"], obj["C"])


@dataclass
class CorruptionSpec:
    """Which markers to corrupt and how.

    ``fraction`` of the K markers (rounded, at least one when positive) is drawn
    per call from the seed. Selected markers are moved by ``offset_mm`` in a
    random direction and their heatmap is blended toward uniform by ``flatten``.
    An explicit ``markers`` list overrides the random draw.
    """

    fraction: float = 0.0
    offset_mm: float = 0.0
    flatten: float = 0.0
    markers: list = field(default=None)

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"fraction must be in [0, 1], got {self.fraction}")
        if not 0.0 <= self.flatten <= 1.0:
            raise ValueError(f"flatten must be in [0, 1], got {self.flatten}")
        if not self.offset_mm >= 0.0:
            raise ValueError(f"offset_mm must be non-negative, got {self.offset_mm}")

    @property
    def active(self):
        return (self.offset_mm > 0 or self.flatten > 0) and (self.fraction > 0 or bool(self.markers))

    def select(self, K, rng):
        if self.markers is not None:
            return np.asarray(sorted(self.markers), dtype=np.int64)
        n = int(round(self.fraction * K))
        if self.fraction > 0:
            n = max(n, 1)
        return np.sort(rng.choice(K, size=n, replace=False))


NO_CORRUPTION = CorruptionSpec()


def _clamp_inside(grid, P):
    lo, hi = grid.bounds
    Pc = np.clip(P, lo, hi)
    if not np.array_equal(Pc, P):
        warnings.warn("marker positions outside the voxel grid were clamped to its bounds")
    return Pc


def corrupt_positions(P, corruption, seed):
    """Apply the offset part of ``corruption``; returns ``(P_corrupted, selected)``."""
    P = np.array(P, dtype=np.float64)
    K = P.shape[0]
    rng = np.random.default_rng(seed)
    sel = corruption.select(K, rng)
    if corruption.offset_mm > 0 and sel.size:
        d = rng.standard_normal((sel.size, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        P[sel] += corruption.offset_mm * d
    return P, sel


def synthesize_heatmap(gt_positions, grid, sigma, corruption=NO_CORRUPTION, seed=0):
    """Normalized isotropic Gaussian heatmaps (std ``sigma`` mm), one per marker."""
    if not (np.isfinite(sigma) and sigma > 0):
        raise ValueError(f"sigma must be positive, got {sigma}")
    P, sel = corrupt_positions(gt_positions, corruption, seed)
    P = _clamp_inside(grid, P)
    K = P.shape[0]
    H = np.empty((K,) + grid.dims)
    for k in range(K):
        # separable Gaussian; each factor is shifted by its max so it cannot underflow
        f = []
        for ax in range(3):
            e = -0.5 * ((grid.axis_centers(ax) - P[k, ax]) / sigma) ** 2
            f.append(np.exp(e - e.max()))
        h = np.einsum("i,j,k->ijk", *f)
        H[k] = h / h.sum()
    if corruption.flatten > 0 and sel.size:
        lam = corruption.flatten
        H[sel] = (1.0 - lam) * H[sel] + lam / grid.n_voxels
    return VoxelHeatmapSet(grid, H)


def soft_argmax(hm):
    """Center of mass of each heatmap in metric coordinates, ``(K, 3)``."""
    g = hm.grid
    H = hm.H
    total = H.sum(axis=(1, 2, 3))
    if np.any(total <= 0):
        raise ValueError("every heatmap needs positive mass")
    md = H.sum(axis=(2, 3)) @ g.axis_centers(0)
    mh = H.sum(axis=(1, 3)) @ g.axis_centers(1)
    mw = H.sum(axis=(1, 2)) @ g.axis_centers(2)
    return np.stack([md, mh, mw], axis=1) / total[:, None]


def trilinear_sample(volume, coords):
    """Trilinear interpolation of ``volume`` at continuous voxel coordinates (clamped)."""
    dims = np.asarray(volume.shape)
    c = np.clip(np.asarray(coords, dtype=np.float64), 0.0, dims - 1)
    i0 = np.minimum(np.floor(c).astype(int), dims - 2)
    t = c - i0
    out = 0.0
    for corner in range(8):
        o = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        w = np.prod(np.where(o, t, 1.0 - t))
        if w:
            out += w * volume[tuple(i0 + o)]
    return float(out)


def sample_confidence(hm, P, rescale=True):
    """Heatmap value at each position, divided by that heatmap's maximum when ``rescale``."""
    P = np.asarray(P, dtype=np.float64).reshape(hm.K, 3)
    coords = hm.grid.to_voxel_coords(P)
    raw = np.array([trilinear_sample(hm.H[k], coords[k]) for k in range(hm.K)])
    if not rescale:
        return raw
    peak = hm.H.reshape(hm.K, -1).max(axis=1)
    return np.clip(np.divide(raw, peak, out=np.zeros_like(raw), where=peak > 0), 0.0, 1.0)


def decode(hm):
    P = soft_argmax(hm)
    return MarkerEstimate(P, sample_confidence(hm, P))


def voxel_index(grid, P):
    """Integer index of the voxel containing each point (points on the far face go inward)."""
    idx = np.floor((np.asarray(P, dtype=np.float64) - np.asarray(grid.origin)) / np.asarray(grid.voxel_size))
    return np.clip(idx.astype(np.int64), 0, np.asarray(grid.dims) - 1)
