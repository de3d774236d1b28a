"""Desk-scale synthetic garment data with exact ground truth.

Garments are procedural "flattened pillow" proxies: a front and a back sheet
over a category silhouette, welded along seam edges and gently inflated so
the layers never coincide. Deformation sequences are scripted spatial folds
(near-isometric rotations about lines in the support plane) plus a
low-frequency crumple field. Point clouds come from depth-buffer visibility
sampling, and every sampled point carries its exact panel/UV assignment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import cumulative_trapezoid

from . import meshio, uvspace
from .nn import checkpoint
from .flatten import (STITCH_OPENING, STITCH_SIDE, STITCH_TOP, MeshPiece,
                      arap_flatten, boundary_edges, normalize_panels,
                      triangle_areas)

CATEGORIES = ("pants", "shirt", "top", "skirt")


@dataclass
class GarmentSpec:
    category: str
    width: float = 1.0          # characteristic width (waist/chest)
    length: float = 1.2
    taper: float = 0.8          # hem-to-waist width ratio (skirt/pants legs)
    sleeve_length: float = 0.35  # shirt only
    sleeve_width: float = 0.3    # shirt only
    resolution: int = 16        # quads across the width
    inflate: float = 0.0012     # pillow half-thickness (cloth-scale: folds
                                # slide layers by angle*thickness at seams)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if min(self.width, self.length, self.taper) <= 0:
            raise ValueError("garment dimensions must be positive")
        if self.resolution < 8:
            raise ValueError("resolution must be at least 8 quads per side")


@dataclass
class Fold:
    point: tuple            # a point on the fold line, support-plane coords
    direction: tuple        # fold line direction (2D, normalized internally)
    angle: float            # dihedral angle, radians, in [0, pi]
    blend: float = 0.08     # crease blend width
    lift: float = 0.02      # layer separation added to the rotated side

    def __post_init__(self):
        if not 0.0 <= self.angle <= np.pi:
            raise ValueError("fold angle must be in [0, pi]")
        if self.blend <= 0:
            raise ValueError("blend width must be positive")


@dataclass
class FoldScript:
    folds: list
    crumple_amplitude: float = 0.0
    crumple_frequency: float = 1.0
    seed: int = 0


@dataclass
class Garment:
    """Canonical mesh plus the construction's front/back pieces."""

    spec: GarmentSpec
    vertices: np.ndarray
    triangles: np.ndarray
    front: MeshPiece
    back: MeshPiece
    front_vertex_ids: np.ndarray   # canonical index of each front-piece vertex
    back_vertex_ids: np.ndarray


# -- silhouettes -----------------------------------------------------------------


def _layout(spec, nx, ny):
    """Index-space cell inclusion, opening predicate, and a coordinate warp.

    Inclusion regions are axis-aligned in the index lattice (no staircases,
    which would pinch the front/back weld); tapering is applied by warping
    lattice coordinates afterwards, keeping every sheet planar.
    """
    w, length = spec.width, spec.length
    cells = np.zeros((nx, ny), bool)

    if spec.category in ("skirt", "top"):
        cells[:, :] = True
        neck = spec.category == "top"

        def opening(i, j, horizontal):
            if not horizontal:
                return False
            if j == 0:
                return True  # hem
            if j == ny:
                return (not neck) or abs(i + 0.5 - nx / 2) < nx / 6
            return False

        def warp(x, y):
            t = y / length
            hem_scale = 1.0 / spec.taper if spec.category == "skirt" else 1.0
            return x * (hem_scale + (1.0 - hem_scale) * t), y

    elif spec.category == "shirt":
        arm_row = int(round(0.68 * ny))
        span = w / 2 + spec.sleeve_length
        t0 = int(round(nx * spec.sleeve_length / (2 * span)))
        t1 = nx - t0
        cells[t0:t1, :] = True            # torso
        cells[:, arm_row:] = True         # sleeve band

        def opening(i, j, horizontal):
            if horizontal and j == 0 and t0 <= i < t1:
                return True  # hem
            if horizontal and j == ny and abs(i + 0.5 - nx / 2) < nx / 8:
                return True  # neck
            if not horizontal and i in (0, nx):
                return True  # sleeve cuffs
            return False

        def warp(x, y):
            return x, y

    else:  # pants
        hip_row = int(round(0.55 * ny))
        gap = max(2, int(round(0.18 * nx)))
        leg_w = (nx - gap) // 2
        gap = nx - 2 * leg_w
        cells[:, hip_row:] = True                 # waist band
        cells[:leg_w, :hip_row] = True            # left leg
        cells[nx - leg_w:, :hip_row] = True       # right leg

        def opening(i, j, horizontal):
            if not horizontal:
                return False
            if j == ny:
                return True  # waist
            if j == 0 and (i < leg_w or i >= nx - leg_w):
                return True  # cuffs
            return False

        hip_y = hip_row / ny * length

        def warp(x, y):
            if y >= hip_y:
                return x, y
            t = y / hip_y
            scale = spec.taper + (1.0 - spec.taper) * t
            return x * scale, y

    return cells, opening, warp


def gen_garment(spec):
    """Build the canonical welded mesh and its front/back pieces."""
    w, length = spec.width, spec.length
    span = w if spec.category != "shirt" else w + 2 * spec.sleeve_length
    nx = max(spec.resolution, int(round(spec.resolution * span / w)))
    ny = max(8, int(round(spec.resolution * length / w)))
    cells, opening_fn, warp = _layout(spec, nx, ny)
    if not cells.any():
        raise ValueError("silhouette produced no cells")
    xs = np.linspace(-span / 2, span / 2, nx + 1)
    ys = np.linspace(0.0, length, ny + 1)

    # lattice vertices used by at least one cell
    used = np.zeros((nx + 1, ny + 1), bool)
    for i, j in zip(*np.nonzero(cells)):
        used[i : i + 2, j : j + 2] = True
    vid = -np.ones((nx + 1, ny + 1), int)
    idx = np.nonzero(used.ravel())[0]
    vid.ravel()[idx] = np.arange(len(idx))
    n_sheet = len(idx)
    ii, jj = np.nonzero(used)
    sheet_xy = np.array([warp(xs[a], ys[b]) for a, b in zip(ii, jj)])

    def cell_inside(i, j):
        return 0 <= i < nx and 0 <= j < ny and cells[i, j]

    # classify lattice boundary edges before triangulating
    edge_label = {}
    welded_vertex = np.zeros(n_sheet, bool)
    y_top = length
    for i, j in zip(*np.nonzero(cells)):
        lattice_edges = (
            ((i, j), (i + 1, j), True, (i, j - 1)),      # bottom
            ((i, j + 1), (i + 1, j + 1), True, (i, j + 1)),  # top
            ((i, j), (i, j + 1), False, (i - 1, j)),     # left
            ((i + 1, j), (i + 1, j + 1), False, (i + 1, j)),  # right
        )
        for va, vb, horizontal, nbr in lattice_edges:
            if cell_inside(*nbr):
                continue
            a, b = vid[va], vid[vb]
            e = frozenset((int(a), int(b)))
            li = min(va[0], vb[0]) if horizontal else va[0]
            lj = va[1] if horizontal else min(va[1], vb[1])
            mid_y = (sheet_xy[a, 1] + sheet_xy[b, 1]) / 2
            if opening_fn(int(li), int(lj), horizontal):
                edge_label[e] = STITCH_OPENING
            else:
                edge_label[e] = STITCH_TOP if mid_y > 0.8 * y_top else STITCH_SIDE
                welded_vertex[a] = welded_vertex[b] = True

    # triangulate, picking each cell's diagonal away from fully welded pairs
    tris = []
    for i, j in zip(*np.nonzero(cells)):
        v00, v10 = vid[i, j], vid[i + 1, j]
        v01, v11 = vid[i, j + 1], vid[i + 1, j + 1]
        if welded_vertex[v00] and welded_vertex[v11] and not (
                welded_vertex[v10] and welded_vertex[v01]):
            tris.append([v00, v10, v01])
            tris.append([v10, v11, v01])
        else:
            tris.append([v00, v10, v11])
            tris.append([v00, v11, v01])
    tris = np.asarray(tris, int)
    b_edges = boundary_edges(tris)

    # pillow inflation: BFS depth from the welded seams over sheet edges
    # (opening boundaries also separate, keeping triangle centroids off z=0)
    boundary_vs = set(np.nonzero(welded_vertex)[0].tolist())
    adj = [[] for _ in range(n_sheet)]
    for tri in tris:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            adj[a].append(b)
            adj[b].append(a)
    depth = np.full(n_sheet, -1)
    frontier = sorted(boundary_vs)
    depth[frontier] = 0
    d = 0
    while frontier:
        nxt = []
        for v in frontier:
            for u in adj[v]:
                if depth[u] < 0:
                    depth[u] = d + 1
                    nxt.append(u)
        frontier = nxt
        d += 1
    bump = spec.inflate * np.tanh(depth / 2.0)

    # weld: welded boundary vertices shared, everything else duplicated
    front_canon = np.zeros(n_sheet, int)
    back_canon = np.zeros(n_sheet, int)
    verts = []
    for v in range(n_sheet):
        front_canon[v] = len(verts)
        verts.append([sheet_xy[v, 0], sheet_xy[v, 1], bump[v]])
    for v in range(n_sheet):
        if welded_vertex[v]:
            back_canon[v] = front_canon[v]
        else:
            back_canon[v] = len(verts)
            verts.append([sheet_xy[v, 0], sheet_xy[v, 1], -bump[v]])
    verts = np.asarray(verts, float)

    front_tris = front_canon[tris]
    back_tris = back_canon[tris][:, ::-1]  # flip for outward orientation
    all_tris = np.concatenate([front_tris, back_tris], axis=0)

    for tri in all_tris:
        if len({int(x) for x in tri}) < 3:
            raise ValueError("degenerate welded triangle; increase resolution")

    front_piece = MeshPiece(np.column_stack([sheet_xy, bump]), tris.copy(),
                            {e: lab for e, lab in edge_label.items()})
    back_piece = MeshPiece(np.column_stack([sheet_xy, -bump]), tris.copy(),
                           {e: lab for e, lab in edge_label.items()})
    return Garment(spec, verts, all_tris, front_piece, back_piece,
                   front_canon, back_canon)


# -- deformation -----------------------------------------------------------------


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


# fraction of the blend width that carries the actual turn; the remainder is
# a straight run-out that keeps the folded flap close to its mirror image
_TURN_FRACTION = 0.72


def _fold_profile(theta, turn, n_samples=512):
    """Crease cross-section: a plane curve turning by theta over arc length.

    Returns sampled arc-length positions, tangent angles, their derivative,
    and the integrated curve (n, z) — all at unit speed, so the base layer
    bends without any stretch.
    """
    sig = np.linspace(0.0, turn, n_samples)
    x = sig / turn
    alpha = theta * _smoothstep(x)
    dalpha = theta * 6.0 * x * (1.0 - x) / turn
    cn = cumulative_trapezoid(np.cos(alpha), sig, initial=0.0)
    cz = cumulative_trapezoid(np.sin(alpha), sig, initial=0.0)
    return sig, alpha, dalpha, cn, cz


def apply_fold(vertices, fold, phase):
    """Fold everything on the positive side of the fold line up and over.

    The fold line lives in the support plane (x, y). The crease is a
    developable cylindrical bend: material is carried along an arc-length
    parameterized profile curve, and each cloth layer is reparameterized by
    its own arc length, so the map is an exact isometry of every layer in
    the continuum (mesh edges only see chord-vs-arc shortening inside the
    blend). The bend pivots just above the current stack, so folding
    doubled-over cloth moves all layers together and the flap lands on top
    with `lift` clearance. phase in [0, 1] scales the dihedral angle.
    """
    if not 0.0 <= phase <= 1.0:
        raise ValueError("phase must be in [0, 1]")
    v = np.asarray(vertices, float).copy()
    if phase == 0.0:
        return v
    p = np.asarray(fold.point, float)
    d = np.asarray(fold.direction, float)
    d = d / np.linalg.norm(d)
    normal = np.array([-d[1], d[0]])
    sd = (v[:, :2] - p) @ normal
    moving = sd > 0
    if not moving.any():
        return v

    near = np.abs(sd) < fold.blend
    top = float(v[near, 2].max()) if near.any() else float(v[moving, 2].max())
    height = top + fold.lift * phase
    theta = phase * fold.angle
    turn = _TURN_FRACTION * fold.blend
    sig, alpha, dalpha, cn, cz = _fold_profile(theta, turn)

    # center the crease on the fold line and pre-compensate the arc length
    # spent climbing over the stack, so the flap lands near the mirror image
    # of the flat material
    crease_start = 0.5 * turn + theta * fold.lift * phase
    moving = sd > -crease_start
    s = sd[moving] + crease_start
    a = (v[moving, :2] - p) @ d
    z = v[moving, 2] - height

    # each layer's own arc length along the profile is s; invert
    # l(sigma) = sigma - z * alpha(sigma) for sigma (exact and affine once
    # the turn is complete, Newton inside the bend)
    bend = s < turn - z * theta
    sigma = np.where(bend, np.clip(s, 0.0, turn), s + z * theta)
    for _ in range(12):
        al = np.interp(sigma[bend], sig, alpha)
        dal = np.interp(sigma[bend], sig, dalpha)
        step = (sigma[bend] - z[bend] * al - s[bend]) / np.maximum(1.0 - z[bend] * dal, 0.1)
        sigma[bend] = np.clip(sigma[bend] - step, 0.0, turn)

    al = np.where(bend, np.interp(sigma, sig, alpha), theta)
    base_n = np.where(bend, np.interp(sigma, sig, cn), cn[-1] + (sigma - turn) * np.cos(theta))
    base_z = np.where(bend, np.interp(sigma, sig, cz), cz[-1] + (sigma - turn) * np.sin(theta))
    n_out = base_n - z * np.sin(al)
    z_out = base_z + z * np.cos(al)

    v[moving, :2] = p + np.outer(n_out - crease_start, normal) + np.outer(a, d)
    v[moving, 2] = height + z_out
    return v


def _crumple_field(xy, script, bbox_diag):
    rng = np.random.default_rng(script.seed)
    dz = np.zeros(len(xy))
    if script.crumple_amplitude <= 0:
        return dz
    amp = script.crumple_amplitude * bbox_diag / 3.0
    for _ in range(3):
        k = script.crumple_frequency * 2 * np.pi / bbox_diag
        direction = rng.normal(size=2)
        direction /= np.linalg.norm(direction)
        phase = rng.uniform(0, 2 * np.pi)
        freq = k * rng.uniform(0.5, 1.5)
        dz += amp * np.sin(xy @ direction * freq + phase)
    return dz


def deform_frame(garment, script, tau):
    """Deformed canonical vertices at normalized sequence time tau in [0, 1]."""
    v = garment.vertices.copy()
    diag = np.linalg.norm(v.max(axis=0) - v.min(axis=0))
    n = max(len(script.folds), 1)
    for i, fold in enumerate(script.folds):
        phase = float(np.clip(n * tau - i, 0.0, 1.0))
        v = apply_fold(v, fold, phase)
    # crumple last: a shared low-frequency height field on the folded state
    # shifts stacked layers together, so per-edge strain stays second order
    # in the slope instead of coupling with the fold's layer slide
    v[:, 2] += _crumple_field(v[:, :2], script, diag)
    return v


# -- point sampling ----------------------------------------------------------------


def sample_surface(vertices, triangles, n, rng):
    """Area-weighted surface samples; returns (points, tri index, barycentric)."""
    areas = triangle_areas(vertices, triangles)
    probs = areas / areas.sum()
    tri_idx = rng.choice(len(triangles), size=n, p=probs)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    tris = triangles[tri_idx]
    pts = np.einsum("nk,nkd->nd", bary, vertices[tris])
    return pts, tri_idx, bary


def _view_frame(direction):
    # frame z points along the viewing ray, so depth grows away from the camera
    z = np.asarray(direction, float)
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def _depth_buffer(vertices, triangles, frame, lo, hi, res):
    """Orthographic min-depth buffer of the mesh in a view frame."""
    cam = vertices @ frame.T
    buf = np.full((res, res), np.inf)
    span = np.maximum(hi - lo, 1e-12)
    px = (cam[:, :2] - lo) / span * (res - 1)
    depth = cam[:, 2]
    for tri in triangles:
        p = px[tri]
        z = depth[tri]
        j0, i0 = np.floor(p.min(axis=0)).astype(int)
        j1, i1 = np.ceil(p.max(axis=0)).astype(int) + 1
        j0, i0 = max(j0, 0), max(i0, 0)
        j1, i1 = min(j1, res), min(i1, res)
        if j0 >= j1 or i0 >= i1:
            continue
        jj, ii = np.meshgrid(np.arange(j0, j1), np.arange(i0, i1))
        det = ((p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
               - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1]))
        if abs(det) < 1e-12:
            continue
        w1 = ((jj - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (ii - p[0, 1])) / det
        w2 = ((p[1, 0] - p[0, 0]) * (ii - p[0, 1]) - (jj - p[0, 0]) * (p[1, 1] - p[0, 1])) / det
        w0 = 1 - w1 - w2
        hit = (w0 >= -1e-6) & (w1 >= -1e-6) & (w2 >= -1e-6)
        if not hit.any():
            continue
        zval = w0 * z[0] + w1 * z[1] + w2 * z[2]
        sub = buf[i0:i1, j0:j1]
        np.minimum(sub, np.where(hit, zval, np.inf), out=sub)
    return buf, lo, span


def sample_pointcloud(vertices, triangles, viewpoints, n_samples, rng,
                      buffer_res=256, jitter=0.002):
    """Visibility-filtered surface samples with Gaussian jitter.

    A sample is kept if it is unoccluded from at least one viewpoint
    (orthographic depth buffer at buffer_res^2). Returns jittered points and
    the (tri, barycentric) ground truth of the kept samples.
    """
    if len(viewpoints) < 1:
        raise ValueError("need at least one viewpoint")
    pts, tri_idx, bary = sample_surface(vertices, triangles, n_samples, rng)
    diag = np.linalg.norm(vertices.max(axis=0) - vertices.min(axis=0))
    # occlusion epsilon: well under the sheet separation (2x inflate) so the
    # hidden sheet of a flat garment does not leak through
    tol = 1.0e-3 * diag
    visible = np.zeros(len(pts), bool)
    for direction in viewpoints:
        frame = _view_frame(direction)
        cam_all = vertices @ frame.T
        lo = cam_all[:, :2].min(axis=0)
        hi = cam_all[:, :2].max(axis=0)
        buf, lo2, span = _depth_buffer(vertices, triangles, frame, lo, hi, buffer_res)
        cam = pts @ frame.T
        px = (cam[:, :2] - lo2) / span * (buffer_res - 1)
        j = np.clip(np.round(px[:, 0]).astype(int), 0, buffer_res - 1)
        i = np.clip(np.round(px[:, 1]).astype(int), 0, buffer_res - 1)
        visible |= cam[:, 2] <= buf[i, j] + tol
    keep = np.nonzero(visible)[0]
    noisy = pts[keep] + rng.normal(scale=jitter * diag, size=(len(keep), 3))
    return noisy, tri_idx[keep], bary[keep]


# -- scripts and dataset ------------------------------------------------------------


def make_fold_script(spec, rng, n_folds=2):
    """Random but gentle folding script for a garment of the given size.

    Folds are parallel (letter-fold style) with disjoint crease strips: a
    fold crossing an earlier crease arch would have to bend material that is
    no longer in flat layers, which no near-isometric kinematic fold can do.
    The blend is sized to span several mesh edges so chord shortening across
    the crease stays within the strain budget.
    """
    w, length = spec.width, spec.length
    edge = max(w, length) / spec.resolution
    centers = (rng.uniform(0.56, 0.60), rng.uniform(0.20, 0.24))
    folds = []
    for k in range(n_folds):
        cy = length * centers[k % len(centers)]
        angle = rng.uniform(0.75, 1.0) * np.pi
        blend = float(np.clip(2.4 * angle * edge, 0.1 * min(w, length),
                              0.28 * length))
        folds.append(Fold(point=(0.0, cy), direction=(1.0, 0.0), angle=angle,
                          blend=blend, lift=0.008 * min(w, length)))
    return FoldScript(folds=folds,
                      crumple_amplitude=rng.uniform(0.0, 0.02),
                      crumple_frequency=rng.uniform(0.8, 1.5),
                      seed=int(rng.integers(0, 2**31 - 1)))


DEFAULT_VIEWPOINTS = ((0.0, 0.0, -1.0), (0.3, 0.2, -1.0), (-0.3, -0.2, -1.0))


@dataclass
class FrameRecord:
    deformed: np.ndarray
    points: np.ndarray
    gt_pair: uvspace.PanelPair
    sigma: np.ndarray
    k_u: np.ndarray
    k_v: np.ndarray
    uv: np.ndarray


def garment_panels(garment, arap_iters=60):
    """ARAP-flatten both pieces and normalize them into [-0.8, 0.8]^2."""
    front = arap_flatten(garment.front, iters=arap_iters)
    back = arap_flatten(garment.back, iters=arap_iters)
    normalize_panels([front, back])
    return front, back


def build_sequence(garment, panels, script, n_frames, resolution, rng,
                   points_per_frame=1200, viewpoints=DEFAULT_VIEWPOINTS):
    """Deform, sample, and annotate one manipulation sequence.

    Returns (frames, norm_box); the normalization box is shared by the whole
    sequence so UV-map values are comparable across frames.
    """
    front_panel, back_panel = panels
    taus = np.linspace(0.0, 1.0, n_frames) if n_frames > 1 else np.array([0.0])
    deformed = [deform_frame(garment, script, t) for t in taus]
    allv = np.concatenate(deformed, axis=0)
    box = uvspace.bounding_box(allv)
    # pad the box a little so jittered points stay in range
    pad = 0.05 * (box[1] - box[0])
    box = (box[0] - pad, box[1] + pad)

    frames = []
    for verts in deformed:
        record = _build_frame(garment, front_panel, back_panel, verts, box,
                              resolution, rng, points_per_frame, viewpoints)
        frames.append(record)
    return frames, box


def _build_frame(garment, front_panel, back_panel, verts, box, resolution,
                 rng, points_per_frame, viewpoints):
    from .flatten import rasterize_panel

    nf = len(garment.triangles) // 2
    pts, tri_idx, bary = sample_pointcloud(verts, garment.triangles,
                                           viewpoints, points_per_frame, rng)
    is_front = tri_idx < nf
    sheet_tri = np.where(is_front, tri_idx, tri_idx - nf)
    uv = np.zeros((len(pts), 2))
    for sel, panel in ((is_front, front_panel), (~is_front, back_panel)):
        if sel.any():
            tris = panel.triangles[sheet_tri[sel]]
            uv[sel] = np.einsum("nk,nkd->nd", bary[sel], panel.vertices2d[tris])
    k_v, k_u = uvspace.uv_to_pixel(uv[:, 0], uv[:, 1], resolution)
    sigma = is_front.astype(float)

    # ground-truth UV maps from barycentric rasterization
    front_pos = uvspace.normalize_positions(verts[garment.front_vertex_ids], box)
    back_pos = uvspace.normalize_positions(verts[garment.back_vertex_ids], box)
    fgrid, _ = rasterize_panel(front_panel.vertices2d, front_panel.triangles,
                               front_pos, resolution)
    bgrid, _ = rasterize_panel(back_panel.vertices2d, back_panel.triangles,
                               back_pos, resolution)
    fmap, bmap = uvspace.UVMap(fgrid), uvspace.UVMap(bgrid)
    pair = uvspace.PanelPair(fmap, uvspace.mask_of(fmap), bmap, uvspace.mask_of(bmap))
    return FrameRecord(verts, pts, pair, sigma, k_u, k_v, uv)


def default_specs(per_category=8, rng=None, categories=CATEGORIES):
    rng = rng or np.random.default_rng(0)
    specs = []
    for cat in categories:
        for _ in range(per_category):
            specs.append(GarmentSpec(
                category=cat,
                width=rng.uniform(0.8, 1.2),
                length=rng.uniform(1.0, 1.5),
                taper=rng.uniform(0.65, 0.95),
                sleeve_length=rng.uniform(0.25, 0.45),
                resolution=25,
            ))
    return specs


def build_dataset(out_dir, specs, scripts_per_garment=5, frames_per_script=12,
                  resolution=64, seed=0, points_per_frame=1200, test_fraction=0.25,
                  arap_iters=60):
    """Generate and serialize the full dataset; reproducible from `seed`."""
    out = Path(out_dir)
    (out / "garments").mkdir(parents=True, exist_ok=True)
    (out / "frames").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest = {
        "seed": seed,
        "resolution": resolution,
        "cm_per_unit": 100.0,
        "garments": {},
        "splits": {"train": [], "test": []},
    }
    n_test = max(1, int(round(test_fraction * len(specs)))) if len(specs) > 1 else 0
    for gi, spec in enumerate(specs):
        gid = f"g{gi:03d}"
        garment = gen_garment(spec)
        panels = garment_panels(garment, arap_iters=arap_iters)
        (out / "garments" / gid).mkdir(exist_ok=True)
        meshio.write_obj(out / "garments" / gid / "canonical.obj",
                         garment.vertices, garment.triangles)
        gdir = out / "frames" / gid
        gdir.mkdir(exist_ok=True)
        split = "test" if gi >= len(specs) - n_test else "train"
        manifest["splits"][split].append(gid)
        manifest["garments"][gid] = {
            "category": spec.category, "width": spec.width, "length": spec.length,
            "taper": spec.taper, "sleeve_length": spec.sleeve_length,
            "sleeve_width": spec.sleeve_width, "resolution": spec.resolution,
            "scripts": [],
        }
        for si in range(scripts_per_garment):
            script = make_fold_script(spec, rng)
            sdir = gdir / f"s{si:02d}"
            sdir.mkdir(exist_ok=True)
            frames, box = build_sequence(garment, panels, script, frames_per_script,
                                         resolution, rng, points_per_frame)
            for t, fr in enumerate(frames):
                meshio.write_ply_points(sdir / f"{t}.ply", fr.points)
                uvspace.save_panel_pair(sdir / f"{t}_gt.uvz", fr.gt_pair, box)
                checkpoint.save_arrays(sdir / f"{t}_assign.bin", {
                    "sigma": fr.sigma, "ku": fr.k_u.astype(np.float32),
                    "kv": fr.k_v.astype(np.float32),
                })
            manifest["garments"][gid]["scripts"].append({
                "id": f"s{si:02d}", "seed": script.seed, "n_frames": frames_per_script,
                "crumple_amplitude": script.crumple_amplitude,
                "box_lo": list(map(float, box[0])), "box_hi": list(map(float, box[1])),
            })
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest
