"""Sewing-pattern generation: cut garments into front/back pieces and
unfold them with a local-global as-rigid-as-possible (ARAP) solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

# stitch classes attached to boundary edges / boundary samples
STITCH_SIDE = 0       # vertical seams joining front and back
STITCH_TOP = 1        # shoulder / waist seam
STITCH_OPENING = 2    # hem, cuffs, neckline: unstitched boundary
STITCH_INTERIOR = 3   # non-boundary samples
STITCH_CLASSES = 4


@dataclass
class MeshPiece:
    """A manifold-with-boundary triangle mesh plus boundary stitch labels."""

    vertices: np.ndarray            # (V, 3)
    triangles: np.ndarray           # (F, 3)
    boundary_labels: dict = field(default_factory=dict)  # frozenset{i,j} -> class

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=int)
        if triangle_areas(self.vertices, self.triangles).min() <= 1e-12:
            raise ValueError("degenerate triangle in mesh piece")


@dataclass
class FlatPanel:
    """2D unfolding of a MeshPiece, normalized into [-0.8, 0.8]^2.

    `center` and `scale` record the affine used: raw2d = uv / scale + center.
    """

    vertices2d: np.ndarray          # (V, 2)
    triangles: np.ndarray           # (F, 3)
    source_map: np.ndarray          # (V,) indices into the source MeshPiece
    center: np.ndarray = None
    scale: float = 1.0


def triangle_areas(vertices, triangles):
    e1 = vertices[triangles[:, 1]] - vertices[triangles[:, 0]]
    e2 = vertices[triangles[:, 2]] - vertices[triangles[:, 0]]
    if vertices.shape[1] == 2:
        return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


def signed_areas_2d(vertices2d, triangles):
    e1 = vertices2d[triangles[:, 1]] - vertices2d[triangles[:, 0]]
    e2 = vertices2d[triangles[:, 2]] - vertices2d[triangles[:, 0]]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def edge_face_incidence(triangles):
    """Map undirected edge -> list of incident triangle indices."""
    inc = {}
    for t, tri in enumerate(triangles):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            inc.setdefault(frozenset((int(a), int(b))), []).append(t)
    return inc


def boundary_edges(triangles):
    return [e for e, ts in edge_face_incidence(triangles).items() if len(ts) == 1]


def check_manifold(triangles):
    for e, ts in edge_face_incidence(triangles).items():
        if len(ts) > 2:
            raise ValueError(f"non-manifold edge {tuple(e)} shared by {len(ts)} triangles")


def _connected(triangles, n_vertices):
    adj = [[] for _ in range(n_vertices)]
    for tri in triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            adj[a].append(b)
            adj[b].append(a)
    seen = np.zeros(n_vertices, bool)
    stack = [int(triangles[0, 0])]
    seen[stack[0]] = True
    while stack:
        v = stack.pop()
        for w in adj[v]:
            if not seen[w]:
                seen[w] = True
                stack.append(w)
    return seen.all()


# -- cutting -------------------------------------------------------------------


def cut_mesh(vertices, triangles, boundary_label_fn=None):
    """Split a garment mesh into front/back pieces by the frontal plane z=0.

    Triangles are classified by centroid depth. Cut edges are labeled
    side-seam or shoulder/waist (by height); pre-existing boundary edges are
    labeled as openings. A custom `boundary_label_fn(midpoint) -> class`
    overrides labeling of cut edges.
    """
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=int)
    check_manifold(triangles)
    centroid_z = vertices[triangles].mean(axis=1)[:, 2]
    front_sel = centroid_z >= 0
    pieces = []
    input_boundary = set(boundary_edges(triangles))
    inc = edge_face_incidence(triangles)
    y_lo, y_hi = vertices[:, 1].min(), vertices[:, 1].max()

    def label_cut_edge(mid):
        if boundary_label_fn is not None:
            return boundary_label_fn(mid)
        # high horizontal seams are shoulder/waist, the rest are side seams
        return STITCH_TOP if mid[1] > y_lo + 0.8 * (y_hi - y_lo) else STITCH_SIDE

    for sel in (front_sel, ~front_sel):
        tri_sel = triangles[sel]
        if len(tri_sel) < 1:
            raise ValueError("cut produced a piece with no triangles")
        used = np.unique(tri_sel)
        remap = -np.ones(len(vertices), dtype=int)
        remap[used] = np.arange(len(used))
        piece_tris = remap[tri_sel]
        labels = {}
        for e in boundary_edges(piece_tris):
            a, b = tuple(e)
            orig = frozenset((int(used[a]), int(used[b])))
            if orig in input_boundary:
                labels[e] = STITCH_OPENING
            else:
                # an edge that became boundary by the cut: it is a seam
                mid = vertices[list(orig)].mean(axis=0)
                labels[e] = label_cut_edge(mid)
        pieces.append(MeshPiece(vertices[used], piece_tris, labels))
    # sanity: the two pieces partition the triangles
    assert len(pieces[0].triangles) + len(pieces[1].triangles) == len(triangles)
    return pieces[0], pieces[1]


# -- ARAP flattening -------------------------------------------------------------


def _triangle_frames(vertices, triangles):
    """Isometric per-triangle 2D frames of the 3D metric.

    Returns rest-frame edge vectors e_k = x_i - x_j for the three half-edges
    (1-0, 2-1, 0-2) of every triangle, as an (F, 3, 2) array.
    """
    p0 = vertices[triangles[:, 0]]
    p1 = vertices[triangles[:, 1]]
    p2 = vertices[triangles[:, 2]]
    e1 = p1 - p0
    e2 = p2 - p0
    l1 = np.linalg.norm(e1, axis=1)
    x1 = np.stack([l1, np.zeros_like(l1)], axis=1)
    proj = np.einsum("ij,ij->i", e2, e1) / l1
    height = np.linalg.norm(np.cross(e2, e1), axis=1) / l1
    x2 = np.stack([proj, height], axis=1)
    x0 = np.zeros_like(x1)
    return np.stack([x1 - x0, x2 - x1, x0 - x2], axis=1)


def _cot_weights(frames):
    """Cotangent of the angle opposite each half-edge, clamped positive."""
    f = len(frames)
    cots = np.zeros((f, 3))
    x = [np.zeros((f, 2)), frames[:, 0], frames[:, 0] + frames[:, 1]]
    for k in range(3):
        # edge k connects corners k and k+1; opposite corner is k+2
        opp = x[(k + 2) % 3]
        a = x[k] - opp
        b = x[(k + 1) % 3] - opp
        cross = np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
        cots[:, k] = np.einsum("ij,ij->i", a, b) / np.maximum(cross, 1e-12)
    return np.clip(cots, 1e-6, 1e6)


def arap_energy(uv, triangles, frames, weights, rotations=None):
    """ARAP energy; with rotations=None the optimal per-triangle rotation is used."""
    if rotations is None:
        rotations = _best_rotations(uv, triangles, frames, weights)
    idx_i = triangles[:, [1, 2, 0]]
    idx_j = triangles[:, [0, 1, 2]]
    f = uv[idx_i] - uv[idx_j]                      # (F, 3, 2)
    target = np.einsum("fab,fkb->fka", rotations, frames)
    return float(np.sum(weights * np.sum((f - target) ** 2, axis=-1)))


def _best_rotations(uv, triangles, frames, weights):
    idx_i = triangles[:, [1, 2, 0]]
    idx_j = triangles[:, [0, 1, 2]]
    f = uv[idx_i] - uv[idx_j]
    cov = np.einsum("fk,fka,fkb->fab", weights, f, frames)  # (F, 2, 2)
    u, _, vt = np.linalg.svd(cov)
    rot = u @ vt
    flip = np.linalg.det(rot) < 0
    if np.any(flip):
        u2 = u.copy()
        u2[flip, :, 1] *= -1
        rot = u2 @ vt
    return rot


def arap_flatten(piece, iters=100, _retry=True):
    """Unfold a disk-topology MeshPiece into 2D via local-global ARAP.

    The returned panel is scaled so its 2D area equals the 3D surface area
    (done after optimization; the tracked energy is non-increasing).
    """
    v, t = piece.vertices, piece.triangles
    check_manifold(t)
    n = len(v)
    n_edges = len(edge_face_incidence(t))
    euler = n - n_edges + len(t)
    if euler != 1 or not _connected(t, n):
        raise ValueError(
            "ARAP flattening needs a connected topological disk "
            f"(Euler characteristic {euler}); cut the piece further")

    frames = _triangle_frames(v, t)
    weights = _cot_weights(frames)

    # initial guess: projection onto the best-fit plane
    centered = v - v.mean(axis=0)
    _, _, vt_axes = np.linalg.svd(centered, full_matrices=False)
    uv = centered @ vt_axes[:2].T

    # global-step system (fixed across iterations): pin vertex 0
    idx_i = t[:, [1, 2, 0]].ravel()
    idx_j = t[:, [0, 1, 2]].ravel()
    w = weights.ravel()
    rows = np.concatenate([idx_i, idx_j, idx_i, idx_j])
    cols = np.concatenate([idx_i, idx_j, idx_j, idx_i])
    vals = np.concatenate([w, w, -w, -w])
    lap = sp.csr_matrix((vals, (rows, cols)), shape=(n, n)).tolil()
    lap[0, :] = 0.0
    lap[0, 0] = 1.0
    solver = spla.splu(lap.tocsc())

    energies = [arap_energy(uv, t, frames, weights)]
    for _ in range(iters):
        rot = _best_rotations(uv, t, frames, weights)
        target = np.einsum("fab,fkb->fka", rot, frames)  # (F, 3, 2)
        rhs = np.zeros((n, 2))
        contrib = (weights[..., None] * target).reshape(-1, 2)
        np.add.at(rhs, idx_i, contrib)
        np.add.at(rhs, idx_j, -contrib)
        rhs[0] = uv[0]
        uv = np.column_stack([solver.solve(rhs[:, 0]), solver.solve(rhs[:, 1])])
        energies.append(arap_energy(uv, t, frames, weights, rot))
        if energies[-1] > energies[-2] + 1e-9:
            raise AssertionError("ARAP energy increased")
        if energies[-2] - energies[-1] < 1e-14:
            break

    # uniform orientation, then area-preserving rescale
    s = signed_areas_2d(uv, t)
    if s.sum() < 0:
        uv[:, 0] *= -1
        s = -s
    if np.any(s <= 0):
        if _retry:
            return arap_flatten(piece, iters=4 * iters, _retry=False)
        raise ValueError("flattening produced folded-over triangles")
    area3d = triangle_areas(v, t).sum()
    uv *= np.sqrt(area3d / s.sum())
    uv -= uv.mean(axis=0)
    panel = FlatPanel(uv, t.copy(), np.arange(n))
    panel.energy_trace = energies
    return panel


def normalize_panels(panels, margin=0.8):
    """Center each panel and apply one shared isotropic scale into
    [-margin, margin]^2. Records (center, scale) on each panel."""
    centers = []
    half_extents = []
    for p in panels:
        lo, hi = p.vertices2d.min(axis=0), p.vertices2d.max(axis=0)
        centers.append((lo + hi) / 2)
        half_extents.append(np.max(hi - lo) / 2)
    scale = margin / max(half_extents)
    for p, c in zip(panels, centers):
        p.vertices2d = (p.vertices2d - c) * scale
        p.center = c
        p.scale = scale
    return panels


# -- rasterization ----------------------------------------------------------------


def rasterize_panel(vertices2d, triangles, vertex_attrs, resolution, fill=None):
    """Barycentric rasterization of per-vertex attributes onto the R-grid.

    Pixel (i, j) evaluates the attribute at uv = pixel_to_uv(i, j); pixels
    outside all triangles get `fill` (default: (-1, ..., -1) sentinel).
    Returns (grid (R, R, C), inside mask (R, R)).
    """
    from .uvspace import uv_grid

    vertex_attrs = np.asarray(vertex_attrs, dtype=float)
    if vertex_attrs.ndim == 1:
        vertex_attrs = vertex_attrs[:, None]
    c = vertex_attrs.shape[1]
    if fill is None:
        fill = -np.ones(c)
    grid = np.tile(np.asarray(fill, float), (resolution, resolution, 1))
    inside = np.zeros((resolution, resolution), bool)
    uvs = uv_grid(resolution)  # (R, R, 2) of (u, v)
    px = np.stack([uvs[..., 0], uvs[..., 1]], axis=-1)
    step = 2.0 / (resolution - 1)
    for tri in triangles:
        a, b, cc = vertices2d[tri[0]], vertices2d[tri[1]], vertices2d[tri[2]]
        lo = np.minimum(np.minimum(a, b), cc)
        hi = np.maximum(np.maximum(a, b), cc)
        j0 = max(int(np.floor((lo[0] + 1) / step)), 0)
        j1 = min(int(np.ceil((hi[0] + 1) / step)) + 1, resolution)
        i0 = max(int(np.floor((lo[1] + 1) / step)), 0)
        i1 = min(int(np.ceil((hi[1] + 1) / step)) + 1, resolution)
        if j0 >= j1 or i0 >= i1:
            continue
        p = px[i0:i1, j0:j1]
        det = (b[0] - a[0]) * (cc[1] - a[1]) - (cc[0] - a[0]) * (b[1] - a[1])
        if abs(det) < 1e-15:
            continue
        w1 = ((p[..., 0] - a[0]) * (cc[1] - a[1]) - (cc[0] - a[0]) * (p[..., 1] - a[1])) / det
        w2 = ((b[0] - a[0]) * (p[..., 1] - a[1]) - (p[..., 0] - a[0]) * (b[1] - a[1])) / det
        w0 = 1.0 - w1 - w2
        eps = -1e-9
        hit = (w0 >= eps) & (w1 >= eps) & (w2 >= eps)
        if not hit.any():
            continue
        attr = (w0[..., None] * vertex_attrs[tri[0]]
                + w1[..., None] * vertex_attrs[tri[1]]
                + w2[..., None] * vertex_attrs[tri[2]])
        sub = grid[i0:i1, j0:j1]
        sub[hit] = attr[hit]
        inside[i0:i1, j0:j1] |= hit
    return grid, inside


def build_correspondences(panel, piece, deformed_frames, resolution, norm_box):
    """Rasterize deformed vertex positions into ground-truth UV maps.

    Each frame shares connectivity with `piece`; positions are normalized
    into [-0.9, 0.9]^3 by `norm_box` before storage. Returns a list of
    UVMap plus the rasterized panel mask.
    """
    from .uvspace import UVMap, normalize_positions

    maps = []
    inside_ref = None
    for frame in deformed_frames:
        frame = np.asarray(frame, dtype=float)
        if frame.shape[0] != len(piece.vertices):
            raise ValueError("deformed frame does not share connectivity with the piece")
        attrs = normalize_positions(frame[panel.source_map], norm_box)
        grid, inside = rasterize_panel(panel.vertices2d, panel.triangles, attrs, resolution)
        maps.append(UVMap(grid))
        inside_ref = inside
    return maps, inside_ref
