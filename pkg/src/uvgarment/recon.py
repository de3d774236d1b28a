"""End-to-end garment reconstruction from partial point-cloud sequences.

The sequence's most-unfolded frame (largest axis-aligned bounding-box
volume) anchors the garment: its points are mapped to panels, a latent code
is fitted once, and the recovered panel masks stay fixed for the whole
sequence. Every frame then runs one observation-guided reverse diffusion
chain to complete its sparse UV maps, and a mesh is extracted from the
completed maps with front/back panels stitched along matching seam labels.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import diffusion, isp, mapper, meshio, uvspace
from .flatten import STITCH_OPENING, boundary_edges, check_manifold


@dataclass
class ReconModels:
    """Trained-model bundle plus the sampling hyperparameters."""

    mapper_model: object
    isp_model: object
    denoiser: object
    schedule: object
    resolution: int = 64
    rho: float = 2.0
    lam: float = 0.5
    clip: float = 1.0


@dataclass
class FrameResult:
    pair: uvspace.PanelPair
    mesh_vertices: np.ndarray
    mesh_triangles: np.ndarray
    guidance_distance: float
    chamfer_to_input_cm: float
    seconds: float


@dataclass
class ReconResult:
    z: np.ndarray
    keyframe: int
    front_mask: uvspace.PanelMask
    back_mask: uvspace.PanelMask
    frames: list = field(default_factory=list)


def select_keyframe(clouds):
    """Index of the cloud with the largest bounding-box volume (first wins)."""
    if len(clouds) == 0:
        raise ValueError("empty sequence")
    vols = []
    for c in clouds:
        pts = c.points if isinstance(c, mapper.PointCloudFrame) else np.asarray(c, float)
        lo, hi = uvspace.bounding_box(pts)
        vols.append(float(np.prod(hi - lo)))
    return int(np.argmax(vols))


def sequence_box(clouds, pad=0.05):
    """Shared normalization box over all clouds of a sequence."""
    pts = [c.points if isinstance(c, mapper.PointCloudFrame) else np.asarray(c, float)
           for c in clouds]
    lo, hi = uvspace.bounding_box(np.concatenate(pts, axis=0))
    margin = pad * (hi - lo)
    return (lo - margin, hi + margin)


def observed_pair(points, models, box):
    """Map a cloud to panels and scatter it into sparse UV maps."""
    sigma, k_u, k_v, _, _ = mapper.predict_arrays(models.mapper_model, points)
    normed = uvspace.normalize_positions(points, box)
    return uvspace.assemble_sparse(normed, sigma, k_u, k_v, models.resolution)


def recover_panels(points, models, box, fit_steps=500):
    """Fit the garment's latent code to the keyframe observation.

    Returns (z, front PanelMask, back PanelMask); the recovered panels cover
    the observed pixels by construction of the fitting objective.
    """
    pair = observed_pair(points, models, box)
    z = isp.fit_latent(models.isp_model, pair, steps=fit_steps)
    front = models.isp_model.extract_panel_mask(z, isp.SIDE_FRONT, models.resolution)
    back = models.isp_model.extract_panel_mask(z, isp.SIDE_BACK, models.resolution)
    return z, front, back


def _guidance_arrays(pair):
    """Sparse map (R, R, 6) and mask (R, R, 2) from an observed PanelPair,
    zero-filled outside observations."""
    R = pair.resolution
    sparse_map = np.zeros((R, R, 6))
    sparse_mask = np.zeros((R, R, 2))
    for i, (m, o) in enumerate(((pair.front_map, pair.front_mask),
                                (pair.back_map, pair.back_mask))):
        on = o.grid.astype(bool)
        sparse_map[:, :, 3 * i:3 * i + 3][on] = m.grid[on]
        sparse_mask[:, :, i] = on
    return sparse_map, sparse_mask


def _completed_pair(x, front_mask, back_mask):
    """Clamp a sampled 8-channel image onto the recovered panel masks."""
    def side(sl, mask):
        on = mask.grid.astype(bool)
        grid = np.where(on[:, :, None], np.clip(x[:, :, sl], -1.0, 1.0),
                        uvspace.SENTINEL)
        return uvspace.UVMap(grid)

    fmap = side(diffusion.MAP_FRONT, front_mask)
    bmap = side(diffusion.MAP_BACK, back_mask)
    return uvspace.PanelPair(fmap, front_mask, bmap, back_mask)


def stitch_label_grids(models, z):
    """Per-pixel stitch class of both panels from the pattern network."""
    R = models.resolution
    uv = uvspace.uv_grid(R).reshape(-1, 2)
    out = []
    for side in (isp.SIDE_FRONT, isp.SIDE_BACK):
        _, logits = models.isp_model.eval_pattern(uv, side, z)
        out.append(logits.argmax(axis=1).reshape(R, R))
    return out[0], out[1]


def _boundary_pixels(mask):
    """In-mask pixels with at least one 4-neighbor outside."""
    m = mask.astype(bool)
    inner = np.zeros_like(m)
    inner[1:-1, 1:-1] = (m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1]
                         & m[1:-1, :-2] & m[1:-1, 2:])
    return m & ~inner


def _label_runs(on, labels, min_run=3):
    """Boundary pixels grouped by stitch class, dropping classes with fewer
    than `min_run` pixels (label noise)."""
    runs = {}
    ii, jj = np.nonzero(on)
    for cls in np.unique(labels[on]):
        if cls == STITCH_OPENING:
            continue
        sel = labels[ii, jj] == cls
        if sel.sum() >= min_run:
            runs[int(cls)] = (ii[sel], jj[sel])
    return runs


def mesh_from_uvmaps(pair, front_labels, back_labels, box):
    """Triangulate completed UV maps into one garment mesh.

    Each in-mask pixel becomes a vertex at its denormalized map position;
    2x2 pixel blocks fully inside the mask become two triangles. Front and
    back boundary pixels that carry the same (non-opening) stitch class are
    welded where the pairing is mutually nearest, closing the seams.
    """
    verts, tris, offsets = [], [], []
    pix_index = []
    for m, o in ((pair.front_map, pair.front_mask), (pair.back_map, pair.back_mask)):
        on = o.grid.astype(bool)
        if on.sum() < 4:
            raise ValueError("panel mask too small to triangulate")
        idx = -np.ones(on.shape, int)
        idx[on] = np.arange(on.sum()) + sum(len(v) for v in verts)
        pos = uvspace.denormalize_positions(m.grid[on], box)
        blk = on[:-1, :-1] & on[:-1, 1:] & on[1:, :-1] & on[1:, 1:]
        bi, bj = np.nonzero(blk)
        a, b = idx[bi, bj], idx[bi, bj + 1]
        c, d = idx[bi + 1, bj], idx[bi + 1, bj + 1]
        tris.append(np.stack([np.stack([a, b, d], 1), np.stack([a, d, c], 1)],
                             1).reshape(-1, 3))
        if len(tris[-1]) == 0:
            raise ValueError("panel mask has no 2x2 block to triangulate")
        verts.append(pos)
        pix_index.append(idx)
    vertices = np.concatenate(verts)
    triangles = np.concatenate(tris)

    # weld seam vertices: mutually nearest boundary pixels of equal class
    f_on = _boundary_pixels(pair.front_mask.grid)
    b_on = _boundary_pixels(pair.back_mask.grid)
    remap = np.arange(len(vertices))
    for cls, (fi, fj) in _label_runs(f_on, front_labels).items():
        runs_b = _label_runs(b_on, back_labels)
        if cls not in runs_b:
            continue
        bi, bj = runs_b[cls]
        fpix = np.stack([fi, fj], 1)
        bpix = np.stack([bi, bj], 1)
        fwd = cKDTree(bpix).query(fpix)[1]
        rev = cKDTree(fpix).query(bpix)[1]
        mutual = rev[fwd] == np.arange(len(fpix))
        partner = fwd[mutual]
        vf = pix_index[0][fi[mutual], fj[mutual]]
        vb = pix_index[1][bi[partner], bj[partner]]
        remap[vb] = vf
        vertices[vf] = 0.5 * (vertices[vf] + vertices[vb])
    triangles = remap[triangles]
    # drop degenerate faces created by welding, then compact vertices
    good = ((triangles[:, 0] != triangles[:, 1])
            & (triangles[:, 1] != triangles[:, 2])
            & (triangles[:, 0] != triangles[:, 2]))
    triangles = triangles[good]
    used = np.unique(triangles)
    lookup = -np.ones(len(vertices), int)
    lookup[used] = np.arange(len(used))
    return vertices[used], lookup[triangles]


def reconstruct_frame(points, models, box, z, front_mask, back_mask,
                      front_labels, back_labels, seed=0, prev_map=None,
                      trace=None):
    """Complete one frame's sparse observation and extract its mesh."""
    t0 = time.perf_counter()
    pair_obs = observed_pair(points, models, box)
    sparse_map, sparse_mask = _guidance_arrays(pair_obs)
    panel = np.stack([2.0 * front_mask.grid - 1.0, 2.0 * back_mask.grid - 1.0],
                     axis=-1)
    g = diffusion.Guidance(sparse_map=sparse_map, sparse_mask=sparse_mask,
                           panel_mask=panel, prev_map=prev_map,
                           rho=models.rho, lam=models.lam)
    local_trace = [] if trace is None else trace
    x = diffusion.sample_chain(models.denoiser, models.schedule,
                               models.resolution, np.random.default_rng(seed),
                               guidance=g, trace=local_trace, clip=models.clip)
    pair = _completed_pair(x, front_mask, back_mask)
    v, t = mesh_from_uvmaps(pair, front_labels, back_labels, box)
    if not np.all(np.isfinite(v)):
        raise RuntimeError("reconstructed mesh has non-finite vertices")
    d_final = local_trace[-1]["distance"] if local_trace else np.nan

    from .metrics import point_to_mesh_distances
    cm = 100.0 * float(np.mean(point_to_mesh_distances(
        np.asarray(points, float), v, t)))
    return FrameResult(pair, v, t, d_final, cm, time.perf_counter() - t0)


def reconstruct_sequence(clouds, models, seed=0, fit_steps=500, out_dir=None,
                         use_prev=True):
    """Reconstruct every frame of an ordered cloud sequence.

    The latent code is fitted once at the keyframe; frames are processed in
    order, threading each frame's completed map into the next frame's
    temporal regularizer (disabled with use_prev=False).
    """
    if len(clouds) == 0:
        raise ValueError("empty sequence")
    pts = [c.points if isinstance(c, mapper.PointCloudFrame) else np.asarray(c, float)
           for c in clouds]
    box = sequence_box(pts)
    key = select_keyframe(pts)
    z, front_mask, back_mask = recover_panels(pts[key], models, box, fit_steps)
    front_labels, back_labels = stitch_label_grids(models, z)
    result = ReconResult(z=z, keyframe=key, front_mask=front_mask,
                         back_mask=back_mask)
    prev = None
    for i, p in enumerate(pts):
        fr = reconstruct_frame(p, models, box, z, front_mask, back_mask,
                               front_labels, back_labels, seed=seed + i,
                               prev_map=prev)
        result.frames.append(fr)
        if use_prev:
            prev, _ = _guidance_arrays(fr.pair)
        if out_dir is not None:
            meshio.write_obj(f"{out_dir}/frame_{i:04d}.obj",
                             fr.mesh_vertices, fr.mesh_triangles)
            uvspace.save_panel_pair(f"{out_dir}/frame_{i:04d}.uvz", fr.pair, box)
    if out_dir is not None:
        write_diagnostics(f"{out_dir}/diagnostics.csv", result)
    return result


def write_diagnostics(path, result):
    """Per-frame guidance distance, input-fit chamfer, and wall time."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "d_final", "chamfer_to_input_cm", "seconds"])
        for i, fr in enumerate(result.frames):
            w.writerow([i, f"{fr.guidance_distance:.6f}",
                        f"{fr.chamfer_to_input_cm:.6f}", f"{fr.seconds:.3f}"])


def mesh_is_manifold(triangles):
    """True when every edge borders at most two faces."""
    try:
        check_manifold(np.asarray(triangles, int))
        return True
    except ValueError:
        return False


def boundary_loop_count(triangles):
    """Number of connected boundary loops of a triangulated surface."""
    edges = boundary_edges(np.asarray(triangles, int))
    adj = {}
    for e in edges:
        a, b = tuple(e)
        adj.setdefault(a, set()).add(b)
        adj.setdefault(b, set()).add(a)
    seen, loops = set(), 0
    for start in adj:
        if start in seen:
            continue
        loops += 1
        stack = [start]
        while stack:
            v = stack.pop()
            if v in seen:
                continue
            seen.add(v)
            stack.extend(adj[v] - seen)
    return loops
