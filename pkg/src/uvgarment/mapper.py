"""Per-point panel assignment for partial garment point clouds.

Each 3D point of an observed cloud is classified to a panel side (front or
back) and a discrete UV bin on that panel: a shared per-point MLP encodes
normalized positions, a max-pooled global feature plus one self-attention
layer mixes in cloud context, and three heads emit the side probability and
the two K-way bin distributions. The assignments feed the sparse UV-map
assembly in uvspace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import uvspace
from .nn import Adam, Linear, Mlp, SelfAttention, Value, checkpoint, no_grad
from .nn import autodiff as ad

K_BINS = 64


@dataclass
class PointCloudFrame:
    """One observed cloud in scene units."""

    points: np.ndarray
    frame_index: int = 0
    source: str = None

    def __post_init__(self):
        self.points = np.asarray(self.points, float).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("empty point cloud")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud has non-finite coordinates")


@dataclass
class PointAssignment:
    """Panel-side probability and discrete UV bin distributions for a point."""

    sigma: float
    phi_u: np.ndarray
    phi_v: np.ndarray
    k_u: int = field(init=False)
    k_v: int = field(init=False)

    def __post_init__(self):
        self.phi_u = np.asarray(self.phi_u, float)
        self.phi_v = np.asarray(self.phi_v, float)
        for phi in (self.phi_u, self.phi_v):
            if np.any(phi < 0) or abs(phi.sum() - 1.0) > 1e-6:
                raise ValueError("bin distribution must be a probability vector")
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError("side probability must lie in [0, 1]")
        self.k_u = int(np.argmax(self.phi_u))
        self.k_v = int(np.argmax(self.phi_v))

    @property
    def is_front(self):
        # the boundary is closed on the front side
        return self.sigma >= 0.5


def quantize_uv(k_u, k_v, K):
    """Bin indices -> UV coordinates: u = -1 + 2k/(K-1)."""
    k_u, k_v = np.asarray(k_u, int), np.asarray(k_v, int)
    if np.any(k_u < 0) or np.any(k_u >= K) or np.any(k_v < 0) or np.any(k_v >= K):
        raise ValueError(f"bin outside [0, {K})")
    return -1.0 + 2.0 * k_u / (K - 1), -1.0 + 2.0 * k_v / (K - 1)


def nearest_bin(u, K):
    """Inverse of quantize_uv on bin centers: nearest bin of a UV value."""
    return np.clip(np.rint((np.asarray(u, float) + 1.0) * (K - 1) / 2.0), 0,
                   K - 1).astype(int)


FEATURE_DIM = 7


def _normals(pts, k=12):
    """Per-point unit normals from neighborhood PCA, oriented upward (+z).

    The clouds come from top-down visibility, so the upward hemisphere is the
    consistent outward orientation for visible surface points.
    """
    k = min(k, len(pts))
    idx = cKDTree(pts).query(pts, k=k)[1].reshape(len(pts), k)
    nb = pts[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    normals = np.linalg.eigh(cov)[1][:, :, 0]  # smallest-variance direction
    flip = normals[:, 2] < 0
    normals[flip] *= -1.0
    return normals


def _features(points):
    """Per-frame normalized inputs: box-normalized xyz, relative height, and
    an upward-oriented neighborhood normal (the front/back decision mostly
    hinges on which way the local sheet faces)."""
    pts = np.asarray(points, float).reshape(-1, 3)
    box = uvspace.bounding_box(pts)
    xyz = uvspace.normalize_positions(pts, box)
    span = max(box[1][2] - box[0][2], 1e-12)
    height = ((pts[:, 2] - box[0][2]) / span)[:, None]
    return np.concatenate([xyz, height, _normals(pts)], axis=1)


def _maxpool_rows(h):
    """Column-wise max over the rows of a (N, D) Value; gradient flows to the
    argmax entries only."""
    am = h.data.argmax(axis=0)
    return h[am, np.arange(h.shape[1])]


class MapperModel:
    """Point encoder + pooled context + classification heads."""

    def __init__(self, k=K_BINS, widths=(64, 128, 256), heads=4, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k = k
        self.widths = tuple(widths)
        self.n_heads = heads
        dim = widths[-1]
        self.point_encoder = Mlp(FEATURE_DIM, list(widths[:-1]), dim, rng,
                                 activation="gelu")
        self.context_block = SelfAttention(dim, heads, rng)
        self.head_u = Mlp(dim, [dim // 2], k, rng, activation="gelu")
        self.head_v = Mlp(dim, [dim // 2], k, rng, activation="gelu")
        self.head_sigma = Mlp(dim, [dim // 2], 1, rng, activation="gelu")

    def parameters(self):
        return (self.point_encoder.parameters() + self.context_block.parameters()
                + self.head_u.parameters() + self.head_v.parameters()
                + self.head_sigma.parameters())

    def logits(self, feats):
        """(N, FEATURE_DIM) features -> (logits_u, logits_v, sigma_logit)."""
        h = self.point_encoder(Value.as_value(feats))
        g = _maxpool_rows(h)
        fused = h + ad.reshape(g, (1, -1))
        fused = fused + ad.reshape(self.context_block(
            ad.reshape(fused, (1,) + tuple(fused.shape))), tuple(fused.shape))
        return (self.head_u(fused), self.head_v(fused),
                self.head_sigma(fused)[:, 0])


def predict_arrays(model, frame):
    """Vectorized prediction: (sigma, k_u, k_v, phi_u, phi_v) arrays."""
    if isinstance(frame, PointCloudFrame):
        pts = frame.points
    else:
        pts = PointCloudFrame(frame).points
    with no_grad():
        lu, lv, ls = model.logits(_features(pts))
        phi_u = ad.softmax(lu, axis=-1).data
        phi_v = ad.softmax(lv, axis=-1).data
        sigma = ad.sigmoid(ls).data
    return sigma, phi_u.argmax(axis=1), phi_v.argmax(axis=1), phi_u, phi_v


def predict(model, frame):
    """One PointAssignment per input point; deterministic and
    permutation-equivariant."""
    sigma, _, _, phi_u, phi_v = predict_arrays(model, frame)
    return [PointAssignment(float(s), pu, pv)
            for s, pu, pv in zip(sigma, phi_u, phi_v)]


def mapper_loss(pred, gt):
    """Average cross entropy of both bin heads plus binary cross entropy of
    the side head, measured against the ground-truth assignments."""
    if len(pred) != len(gt):
        raise ValueError("assignment counts differ")
    eps = 1e-12
    total = 0.0
    for p, g in zip(pred, gt):
        total -= np.log(max(p.phi_u[g.k_u], eps))
        total -= np.log(max(p.phi_v[g.k_v], eps))
        s = min(max(p.sigma, eps), 1.0 - eps)
        y = 1.0 if g.is_front else 0.0
        total -= y * np.log(s) + (1.0 - y) * np.log(1.0 - s)
    return total / len(pred)


@dataclass
class PointTargets:
    """Ground-truth per-point labels for one frame."""

    sigma: np.ndarray
    k_u: np.ndarray
    k_v: np.ndarray

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, float).ravel()
        self.k_u = np.asarray(self.k_u, int).ravel()
        self.k_v = np.asarray(self.k_v, int).ravel()
        if not len(self.sigma) == len(self.k_u) == len(self.k_v):
            raise ValueError("target lengths differ")


def _ce(logits, bins):
    logp = ad.log_softmax(logits, axis=-1)
    return -logp[np.arange(len(bins)), bins].mean()


def train_mapper(dataset, k=K_BINS, steps=3000, lr=1e-3, points_per_step=256,
                 seed=0, widths=(64, 128, 256), heads=4, eval_every=0, log=None):
    """Fit a MapperModel on (PointCloudFrame, PointTargets) pairs.

    Each step draws one frame and a random subset of its points (attention
    cost grows quadratically with the subset size). Returns (model, history)
    with the per-step loss history.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    model = MapperModel(k=k, widths=widths, heads=heads, rng=rng)
    feats = []
    for frame, tgt in dataset:
        pts = frame.points if isinstance(frame, PointCloudFrame) else frame
        if len(pts) != len(tgt.sigma):
            raise ValueError("targets do not match the frame's point count")
        if np.any(tgt.k_u >= k) or np.any(tgt.k_v >= k):
            raise ValueError("target bin outside the model's range")
        feats.append((_features(pts), tgt))

    opt = Adam(model.parameters(), lr=lr)
    history = []
    for step in range(steps):
        if step in (int(steps * 0.6), int(steps * 0.85)):
            opt.lr *= 0.3
        f, tgt = feats[rng.integers(0, len(feats))]
        idx = rng.choice(len(f), size=min(points_per_step, len(f)), replace=False)
        lu, lv, ls = model.logits(f[idx])
        front = tgt.sigma[idx] >= 0.5
        loss = _ce(lu, tgt.k_u[idx]) + _ce(lv, tgt.k_v[idx])
        # stable binary cross entropy on the raw logit
        loss = loss + (ad.softplus(ls) - ls * front.astype(float)).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.data))
        if log is not None and (step + 1) % max(eval_every, 100) == 0:
            log(step + 1, history[-1])
    return model, history


def evaluate_mapper(model, dataset):
    """Panel-side accuracy and median UV bin error over a dataset."""
    side_hits, bin_errs = [], []
    for frame, tgt in dataset:
        sigma, k_u, k_v, _, _ = predict_arrays(model, frame)
        side_hits.append((sigma >= 0.5) == (tgt.sigma >= 0.5))
        bin_errs.append(np.maximum(np.abs(k_u - tgt.k_u), np.abs(k_v - tgt.k_v)))
    side_hits = np.concatenate(side_hits)
    bin_errs = np.concatenate(bin_errs)
    return {"side_accuracy": float(side_hits.mean()),
            "median_bin_error": float(np.median(bin_errs))}


def save_mapper(model, path):
    arrays = {"meta": np.array([model.k, model.n_heads, *model.widths], float)}
    nets = {"enc": model.point_encoder, "u": model.head_u, "v": model.head_v,
            "s": model.head_sigma}
    for name, net in nets.items():
        for i, layer in enumerate(net.layers):
            arrays[f"{name}.{i}.w"] = layer.w.data
            arrays[f"{name}.{i}.b"] = layer.b.data
    for name, lin in (("wq", model.context_block.wq), ("wk", model.context_block.wk),
                      ("wv", model.context_block.wv), ("wo", model.context_block.wo)):
        arrays[f"att.{name}.w"] = lin.w.data
        arrays[f"att.{name}.b"] = lin.b.data
    checkpoint.save_arrays(path, arrays)


def load_mapper(path):
    arrays = checkpoint.load_arrays(path)
    meta = arrays["meta"]
    model = MapperModel(k=int(meta[0]), widths=tuple(int(w) for w in meta[2:]),
                        heads=int(meta[1]))
    nets = {"enc": model.point_encoder, "u": model.head_u, "v": model.head_v,
            "s": model.head_sigma}
    for name, net in nets.items():
        for i, layer in enumerate(net.layers):
            layer.w.data = arrays[f"{name}.{i}.w"].astype(float)
            layer.b.data = arrays[f"{name}.{i}.b"].astype(float)
    for name, lin in (("wq", model.context_block.wq), ("wk", model.context_block.wk),
                      ("wv", model.context_block.wv), ("wo", model.context_block.wo)):
        lin.w.data = arrays[f"att.{name}.w"].astype(float)
        lin.b.data = arrays[f"att.{name}.b"].astype(float)
    return model
