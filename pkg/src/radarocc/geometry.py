"""Spherical/Cartesian coordinates, voxel grids and index mappings.

Conventions: x forward, y left, z up. Azimuth is ``atan2(y, x)``; elevation is
``asin(z / |p|)``. Voxel grids are stored (H, W, L) = (z, y, x) and flattened
z-major, then y, then x.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def cart_to_sph(p) -> np.ndarray:
    """(…, 3) xyz → (…, 3) (range, azimuth, elevation)."""
    p = np.asarray(p, dtype=np.float64)
    r = np.linalg.norm(p, axis=-1)
    if np.any(r == 0):
        raise ValueError("spherical coordinates are undefined at the origin")
    az = np.arctan2(p[..., 1], p[..., 0])
    el = np.arcsin(np.clip(p[..., 2] / r, -1.0, 1.0))
    return np.stack([r, az, el], axis=-1)


def sph_to_cart(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    r, az, el = s[..., 0], s[..., 1], s[..., 2]
    ce = np.cos(el)
    return np.stack([r * ce * np.cos(az), r * ce * np.sin(az), r * np.sin(el)], axis=-1)


def _halve(n: int, times: int) -> int:
    for _ in range(times):
        n = (n + 1) // 2
    return n


@dataclass(frozen=True)
class SphericalSpec:
    """Bin layout of a spherical volume: bin ``i`` on an axis sits at ``origin + i * spacing``."""

    bins: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    stride: int = 1

    def __post_init__(self):
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacings must be positive: {self.spacing}")
        if any(b < 1 for b in self.bins):
            raise ValueError(f"bin counts must be positive: {self.bins}")

    @classmethod
    def for_radar(cls, n_range: int, n_az: int, n_el: int, range_res: float,
                  az_span: float, el_span: float) -> "SphericalSpec":
        """Uniform-in-angle bins covering symmetric angular spans (radians)."""
        da, de = az_span / n_az, el_span / n_el
        return cls((n_range, n_az, n_el), (range_res, da, de),
                   (0.0, -(n_az - 1) * da / 2, -(n_el - 1) * de / 2))

    def strided(self, s: int) -> "SphericalSpec":
        """Layout after stride-2 convolutions totalling stride ``s`` (output o sits on input s*o)."""
        k = int(round(math.log2(s)))
        if 2 ** k != s:
            raise ValueError(f"stride must be a power of two, got {s}")
        bins = tuple(_halve(n, k) for n in self.bins)
        return SphericalSpec(bins, tuple(d * s for d in self.spacing), self.origin, self.stride * s)

    def centers(self, idx) -> np.ndarray:
        """Spherical coordinates of (possibly fractional) indices."""
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def phi_map(self, p) -> tuple[np.ndarray, np.ndarray]:
        """Cartesian points → fractional (r, a, e) indices plus an in-volume flag."""
        sph = cart_to_sph(p)
        idx = (sph - np.asarray(self.origin)) / np.asarray(self.spacing)
        hi = np.asarray(self.bins, dtype=np.float64) - 0.5
        inside = np.all((idx >= -0.5) & (idx <= hi), axis=-1)
        return idx, inside


@dataclass(frozen=True)
class CartesianSpec:
    """Index mapping for a Cartesian volume laid out (x, y, z), used by the Cartesian-first path."""

    grid: "GridSpec"
    stride: int = 1

    @property
    def bins(self) -> tuple[int, int, int]:
        L, W, H = self.grid.shape_lwh
        k = int(round(math.log2(self.stride)))
        return (_halve(L, k), _halve(W, k), _halve(H, k))

    def strided(self, s: int) -> "CartesianSpec":
        return CartesianSpec(self.grid, self.stride * s)

    def phi_map(self, p) -> tuple[np.ndarray, np.ndarray]:
        p = np.asarray(p, dtype=np.float64)
        g = self.grid
        lo = np.array([g.x_range[0], g.y_range[0], g.z_range[0]])
        idx = ((p - lo) / g.voxel - 0.5) / self.stride
        hi = np.asarray(self.bins, dtype=np.float64) - 0.5
        inside = np.all((idx >= -0.5) & (idx <= hi), axis=-1)
        return idx, inside


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple[float, float] = (0.0, 51.2)
    y_range: tuple[float, float] = (-25.6, 25.6)
    z_range: tuple[float, float] = (-2.6, 3.0)
    voxel: float = 0.4

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            n = (hi - lo) / self.voxel
            if hi <= lo or abs(n - round(n)) > 1e-6:
                raise ValueError(f"extent [{lo}, {hi}] is not a whole number of {self.voxel} m voxels")

    @classmethod
    def desk(cls) -> "GridSpec":
        return cls((0.0, 12.8), (-6.4, 6.4), (-2.0, 1.2), 0.4)

    @property
    def shape_lwh(self) -> tuple[int, int, int]:
        return tuple(int(round((hi - lo) / self.voxel)) for lo, hi in (self.x_range, self.y_range, self.z_range))

    @property
    def shape(self) -> tuple[int, int, int]:
        """Storage shape (H, W, L)."""
        L, W, H = self.shape_lwh
        return (H, W, L)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.shape))

    def as_array(self) -> np.ndarray:
        return np.array([*self.x_range, *self.y_range, *self.z_range, self.voxel])

    @classmethod
    def from_array(cls, a) -> "GridSpec":
        a = [float(v) for v in a]
        return cls((a[0], a[1]), (a[2], a[3]), (a[4], a[5]), a[6])

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Voxel-center coordinates along x, y, z."""
        L, W, H = self.shape_lwh
        v = self.voxel
        return (self.x_range[0] + (np.arange(L) + 0.5) * v,
                self.y_range[0] + (np.arange(W) + 0.5) * v,
                self.z_range[0] + (np.arange(H) + 0.5) * v)

    def voxel_index(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """Integer (iz, iy, ix) of each point and an inside-RoI flag."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        lo = np.array([self.x_range[0], self.y_range[0], self.z_range[0]])
        ijk = np.floor((pts - lo) / self.voxel).astype(np.int64)
        L, W, H = self.shape_lwh
        inside = np.all((ijk >= 0) & (ijk < np.array([L, W, H])), axis=1)
        return ijk[:, ::-1], inside


def voxel_centers(g: GridSpec) -> np.ndarray:
    """(H·W·L, 3) xyz centers in canonical order (z-major, then y, then x)."""
    xs, ys, zs = g.axes()
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)


def hfov_mask(g: GridSpec, hfov_deg: float = 107.0) -> np.ndarray:
    """Boolean (H, W, L) grid: voxel center within ±hfov/2 of the forward axis."""
    if not 0 < hfov_deg <= 360:
        raise ValueError(f"hfov must be in (0, 360], got {hfov_deg}")
    xs, ys, _ = g.axes()
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    az = np.abs(np.arctan2(Y, X))
    m2 = az <= np.deg2rad(hfov_deg) / 2 + 1e-12
    return np.broadcast_to(m2, g.shape).copy()


def forward_distance_mask(g: GridSpec, max_range: float) -> np.ndarray:
    """Voxels whose center lies at most ``max_range`` ahead along x."""
    xs, _, _ = g.axes()
    return np.broadcast_to(xs <= max_range + 1e-9, g.shape).copy()
