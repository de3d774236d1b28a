"""Reconstruction quality metrics.

Chamfer distance D_cf measures raw surface proximity; correspondence
distance D_cr matches points through canonical (rest-state) coordinates
before measuring deformed-space error, so a surface that lands in the right
place with the wrong material correspondence scores well on D_cf but badly
on D_cr. A_d is the fraction of frames whose D_cr falls strictly below a
threshold. Distances are reported in centimeters via an explicit
units-per-cm scale.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .flatten import triangle_areas

DEFAULT_SAMPLES = 10_000
# default world scale: 1 world unit = 100 cm of garment height
DEFAULT_CM_PER_UNIT = 100.0


def sample_mesh_surface(vertices, triangles, n, rng):
    """Area-weighted surface samples; returns (points, face index, bary)."""
    vertices = np.asarray(vertices, float)
    triangles = np.asarray(triangles, int)
    if len(vertices) == 0 or len(triangles) == 0:
        raise ValueError("empty mesh")
    areas = triangle_areas(vertices, triangles)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    f = rng.choice(len(triangles), size=n, p=areas / total)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    pts = np.einsum("nk,nkd->nd", bary, vertices[triangles[f]])
    return pts, f, bary


def nearest_distances(queries, targets, brute_force=False):
    """Distance from each query to its nearest target point."""
    queries = np.asarray(queries, float).reshape(-1, 3)
    targets = np.asarray(targets, float).reshape(-1, 3)
    if len(queries) == 0 or len(targets) == 0:
        raise ValueError("empty point set")
    if brute_force:
        d2 = ((queries[:, None, :] - targets[None, :, :]) ** 2).sum(-1)
        return np.sqrt(d2.min(axis=1))
    return cKDTree(targets).query(queries)[0]


def _point_triangle_distances(points, tri_pts):
    """Exact distance from points[i] to triangle tri_pts[i] (N, 3, 3)."""
    a, b, c = tri_pts[:, 0], tri_pts[:, 1], tri_pts[:, 2]
    best = np.full(len(points), np.inf)
    # distance to each edge segment
    for p0, p1 in ((a, b), (b, c), (c, a)):
        e = p1 - p0
        t = np.clip(((points - p0) * e).sum(1)
                    / np.maximum((e * e).sum(1), 1e-300), 0.0, 1.0)
        best = np.minimum(best,
                          np.linalg.norm(points - (p0 + t[:, None] * e), axis=1))
    # distance to the face plane when the projection lands inside
    n = np.cross(b - a, c - a)
    nn_raw = np.linalg.norm(n, axis=1)
    degenerate = nn_raw < 1e-150  # zero-area triangles: edges already cover them
    nn = np.where(degenerate, 1.0, nn_raw)
    dist_plane = np.abs(((points - a) * n).sum(1)) / nn
    proj = points - (((points - a) * n).sum(1) / nn**2)[:, None] * n
    # inside test via consistent cross-product orientation
    inside = ~degenerate
    for p0, p1 in ((a, b), (b, c), (c, a)):
        inside &= (np.cross(p1 - p0, proj - p0) * n).sum(1) >= -1e-12 * nn**2
    return np.where(inside, np.minimum(best, dist_plane), best)


def point_to_mesh_distances(points, vertices, triangles, candidates=16):
    """Exact distance from each point to the mesh surface.

    Nearest candidate triangles (by centroid) give an upper bound; a ball
    query of radius bound + circumradius then guarantees that every triangle
    possibly holding a closer point is evaluated.
    """
    points = np.asarray(points, float).reshape(-1, 3)
    vertices = np.asarray(vertices, float)
    triangles = np.asarray(triangles, int)
    if len(triangles) == 0:
        raise ValueError("empty mesh")
    corners = vertices[triangles]
    centroids = corners.mean(axis=1)
    radii = np.linalg.norm(corners - centroids[:, None], axis=2).max(axis=1)
    tree = cKDTree(centroids)
    k = min(candidates, len(triangles))
    idx = tree.query(points, k=k)[1].reshape(len(points), k)
    best = np.full(len(points), np.inf)
    for j in range(k):
        tri_pts = corners[idx[:, j]]
        best = np.minimum(best, _point_triangle_distances(points, tri_pts))
    # a triangle containing a closer point must have its centroid within the
    # current bound plus its own circumradius
    extra = tree.query_ball_point(points, best + radii.max() + 1e-12)
    for i, cand in enumerate(extra):
        cand = np.setdiff1d(np.asarray(cand, int), idx[i])
        if len(cand):
            d = _point_triangle_distances(
                np.broadcast_to(points[i], (len(cand), 3)), corners[cand])
            best[i] = min(best[i], d.min())
    return best


def chamfer(recon, gt, samples=DEFAULT_SAMPLES, seed=0, symmetric=False,
            cm_per_unit=DEFAULT_CM_PER_UNIT):
    """Mean distance (cm) from reconstructed surface samples to the nearest
    point of the ground-truth surface; `symmetric` takes the max of both
    directions.

    Each mesh is (vertices, triangles); point arrays of shape (N, 3) are
    accepted directly. Distances to a mesh target are exact point-to-surface
    distances; distances to a point-set target are nearest-sample distances.
    """
    rng = np.random.default_rng(seed)

    def pts_of(mesh):
        if isinstance(mesh, np.ndarray):
            return np.asarray(mesh, float).reshape(-1, 3)
        v, t = mesh
        return sample_mesh_surface(v, t, samples, rng)[0]

    def direction(src, dst):
        q = pts_of(src)
        if isinstance(dst, np.ndarray):
            return nearest_distances(q, dst).mean() * cm_per_unit
        return point_to_mesh_distances(q, dst[0], dst[1]).mean() * cm_per_unit

    fwd = direction(recon, gt)
    if not symmetric:
        return fwd
    return max(fwd, direction(gt, recon))


def correspondence_distance(recon_pos, recon_canon, gt_pos, gt_canon,
                            cm_per_unit=DEFAULT_CM_PER_UNIT):
    """Match each reconstructed point to the ground-truth point nearest in
    canonical space, then average the deformed-space L2 error (cm)."""
    recon_pos = np.asarray(recon_pos, float).reshape(-1, 3)
    gt_pos = np.asarray(gt_pos, float).reshape(-1, 3)
    recon_canon = np.asarray(recon_canon, float)
    gt_canon = np.asarray(gt_canon, float)
    if recon_canon.shape[0] != recon_pos.shape[0] or gt_canon.shape[0] != gt_pos.shape[0]:
        raise ValueError("canonical coordinates missing for some points")
    idx = cKDTree(gt_canon).query(recon_canon)[1]
    return float(np.linalg.norm(recon_pos - gt_pos[idx], axis=1).mean()) * cm_per_unit


def a_d(dcr_values, d):
    """Fraction of frames with correspondence distance strictly below d cm."""
    dcr_values = np.asarray(dcr_values, float).ravel()
    if len(dcr_values) == 0:
        raise ValueError("no frames")
    if d <= 0:
        raise ValueError("threshold must be positive")
    return float((dcr_values < d).mean())


@dataclass
class MetricReport:
    """Per-frame distances plus per-sequence threshold ratios."""

    d_cf: np.ndarray
    d_cr: np.ndarray
    thresholds: tuple = (3.0, 5.0)
    a_d: dict = field(init=False)

    def __post_init__(self):
        self.d_cf = np.asarray(self.d_cf, float).ravel()
        self.d_cr = np.asarray(self.d_cr, float).ravel()
        if len(self.d_cf) != len(self.d_cr):
            raise ValueError("per-frame metric lengths differ")
        self.a_d = {d: a_d(self.d_cr, d) for d in self.thresholds}

    def summary(self):
        out = {"frames": int(len(self.d_cf)),
               "d_cf_mean": float(self.d_cf.mean()),
               "d_cf_median": float(np.median(self.d_cf)),
               "d_cr_mean": float(self.d_cr.mean()),
               "d_cr_median": float(np.median(self.d_cr))}
        for d, val in self.a_d.items():
            out[f"a_{d:g}"] = val
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["frame", "d_cf_cm", "d_cr_cm"])
            for i, (cf, cr) in enumerate(zip(self.d_cf, self.d_cr)):
                w.writerow([i, f"{cf:.6f}", f"{cr:.6f}"])

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)
            f.write("\n")
