"""UV-space grids: UV maps, panel masks, sparse assembly, normalization.

Conventions used everywhere in the package:
  - the UV domain is [-1, 1]^2; u indexes columns (j), v indexes rows (i)
  - UV-map grids are (R, R, 3); the sentinel (-1, -1, -1) marks pixels
    outside the panel
  - 3D positions stored in maps are normalized to [-0.9, 0.9]^3 so real
    points can never collide with the sentinel
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import checkpoint

SENTINEL = np.array([-1.0, -1.0, -1.0])


def pixel_to_uv(i, j, resolution):
    """Grid indices (row i, column j) to UV coordinates."""
    i = np.asarray(i)
    j = np.asarray(j)
    if np.any(i < 0) or np.any(i >= resolution) or np.any(j < 0) or np.any(j >= resolution):
        raise IndexError(f"pixel index out of range for R={resolution}")
    u = -1.0 + 2.0 * j / (resolution - 1)
    v = -1.0 + 2.0 * i / (resolution - 1)
    return u, v


def uv_to_pixel(u, v, resolution):
    """Nearest grid indices for UV coordinates; inverse of pixel_to_uv on bins."""
    j = np.rint((np.asarray(u) + 1.0) * (resolution - 1) / 2.0).astype(int)
    i = np.rint((np.asarray(v) + 1.0) * (resolution - 1) / 2.0).astype(int)
    return np.clip(i, 0, resolution - 1), np.clip(j, 0, resolution - 1)


def uv_grid(resolution):
    """(R, R, 2) array of (u, v) at every pixel."""
    idx = np.arange(resolution)
    jj, ii = np.meshgrid(idx, idx)
    u, v = pixel_to_uv(ii, jj, resolution)
    return np.stack([u, v], axis=-1)


@dataclass
class UVMap:
    """R x R grid of 3D positions with sentinel-marked empty pixels."""

    grid: np.ndarray  # (R, R, 3)

    @classmethod
    def empty(cls, resolution):
        g = np.empty((resolution, resolution, 3))
        g[:] = SENTINEL
        return cls(g)

    @property
    def resolution(self):
        return self.grid.shape[0]

    def is_empty_pixel(self):
        return np.all(self.grid == SENTINEL, axis=-1)


@dataclass
class PanelMask:
    """R x R binary grid marking in-panel pixels."""

    grid: np.ndarray  # (R, R) of {0, 1}

    @classmethod
    def zeros(cls, resolution):
        return cls(np.zeros((resolution, resolution)))

    @property
    def resolution(self):
        return self.grid.shape[0]


@dataclass
class PanelPair:
    """Front and back (UVMap, PanelMask), all at one resolution."""

    front_map: UVMap
    front_mask: PanelMask
    back_map: UVMap
    back_mask: PanelMask

    def __post_init__(self):
        rs = {self.front_map.resolution, self.front_mask.resolution,
              self.back_map.resolution, self.back_mask.resolution}
        if len(rs) != 1:
            raise ValueError(f"inconsistent resolutions {rs}")

    @property
    def resolution(self):
        return self.front_map.resolution


def mask_of(uv_map):
    """Binary mask: 1 where the map holds a position, 0 at sentinel pixels."""
    return PanelMask((~uv_map.is_empty_pixel()).astype(float))


def assemble_sparse(points, sigma, k_u, k_v, resolution):
    """Scatter mapped points into sparse front/back UV maps and masks.

    points are normalized 3D positions; sigma >= 0.5 routes to the front
    panel. Bin collisions store the coordinate-wise mean of all colliding
    points (order independent).
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    sigma = np.asarray(sigma, dtype=float).ravel()
    k_u = np.asarray(k_u, dtype=int).ravel()
    k_v = np.asarray(k_v, dtype=int).ravel()
    n = len(points)
    if not (len(sigma) == len(k_u) == len(k_v) == n):
        raise ValueError("assignment count does not match point count")
    if n and (k_u.min() < 0 or k_u.max() >= resolution or k_v.min() < 0 or k_v.max() >= resolution):
        raise ValueError("UV bin out of range")

    def build(sel):
        m = UVMap.empty(resolution)
        o = PanelMask.zeros(resolution)
        if np.any(sel):
            # rows are v bins, columns are u bins
            flat = k_v[sel] * resolution + k_u[sel]
            acc = np.zeros((resolution * resolution, 3))
            cnt = np.zeros(resolution * resolution)
            np.add.at(acc, flat, points[sel])
            np.add.at(cnt, flat, 1.0)
            hit = cnt > 0
            mean = np.empty_like(acc)
            mean[hit] = acc[hit] / cnt[hit, None]
            grid = m.grid.reshape(-1, 3)
            grid[hit] = mean[hit]
            o.grid.reshape(-1)[hit] = 1.0
        return m, o

    front = build(sigma >= 0.5)
    back = build(sigma < 0.5)
    return PanelPair(front[0], front[1], back[0], back[1])


def bounding_box(points):
    """(min, max) corners of a point set."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    return points.min(axis=0), points.max(axis=0)


def _box_transform(box):
    lo, hi = np.asarray(box[0], float), np.asarray(box[1], float)
    extent = hi - lo
    if np.any(extent <= 0):
        raise ValueError(f"degenerate bounding box extent {extent}")
    scale = 1.8 / extent
    return lo, scale


def normalize_positions(points, box):
    """Affine map of the box into [-0.9, 0.9]^3 (per-axis)."""
    lo, scale = _box_transform(box)
    return (np.asarray(points, float) - lo) * scale - 0.9


def denormalize_positions(cells, box):
    """Exact inverse of normalize_positions."""
    lo, scale = _box_transform(box)
    return (np.asarray(cells, float) + 0.9) / scale + lo


def save_panel_pair(path, pair, box):
    """Write a PanelPair plus its normalization box to a UV-map container."""
    lo, hi = box
    checkpoint.save_arrays(path, {
        "front_map": pair.front_map.grid,
        "front_mask": pair.front_mask.grid,
        "back_map": pair.back_map.grid,
        "back_mask": pair.back_mask.grid,
        "norm_box": np.concatenate([np.asarray(lo, float), np.asarray(hi, float)]),
    })


def load_panel_pair(path):
    """Read (PanelPair, box) from a UV-map container."""
    arrays = checkpoint.load_arrays(path)
    pair = PanelPair(
        UVMap(arrays["front_map"].astype(float)),
        PanelMask(arrays["front_mask"].astype(float)),
        UVMap(arrays["back_map"].astype(float)),
        PanelMask(arrays["back_mask"].astype(float)),
    )
    nb = arrays["norm_box"].astype(float)
    return pair, (nb[:3], nb[3:])
