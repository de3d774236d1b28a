"""Denoising diffusion prior over paired UV-map/mask images.

A clean sample is an R x R x 8 image holding both panels of a garment:
channels [front map (3), front mask (1), back map (3), back mask (1)], all
in [-1, 1] (masks remapped {0,1} -> {-1,+1}, map sentinel at -1). A small
convolutional denoiser is trained to predict the noise injected by the
forward process; sparse observations steer the reverse process by adding
the gradient of an observation-consistency distance to the predicted noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import uvspace
from .nn import Conv2d, GroupNorm, Linear, Parameter, Value, checkpoint, no_grad
from .nn import autodiff as ad

CHANNELS = 8
MAP_FRONT = slice(0, 3)
MASK_FRONT = 3
MAP_BACK = slice(4, 7)
MASK_BACK = 7


# -- variance schedule ----------------------------------------------------------------


@dataclass
class Schedule:
    """Forward-process variances and the derived reverse-step quantities.

    Arrays are length T and 1-indexed through `t` in [1, T]: beta[t-1] is the
    variance added at step t. The final reverse step is deterministic
    (sigma at t=1 is zero, taking the zeroth cumulative product as 1).
    """

    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    sigma: np.ndarray = field(init=False)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, float)
        if self.beta.ndim != 1 or len(self.beta) == 0:
            raise ValueError("schedule needs a 1-D array of variances")
        if np.any(self.beta <= 0.0) or np.any(self.beta >= 1.0):
            raise ValueError("variances must lie strictly inside (0, 1)")
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ValueError("cumulative signal fraction must strictly decrease")
        prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        self.sigma = np.sqrt((1.0 - prev) / (1.0 - self.alpha_bar) * self.beta)

    @property
    def T(self):
        return len(self.beta)

    @classmethod
    def linear(cls, T=200, beta_start=1e-4, beta_end=0.02):
        return cls(np.linspace(beta_start, beta_end, T))

    def check_t(self, t):
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")
        return t


# -- sample packing -------------------------------------------------------------------


def pack_sample(pair):
    """PanelPair -> (R, R, 8) image in [-1, 1]; sentinel map pixels stay -1."""
    R = pair.resolution
    x = np.empty((R, R, CHANNELS))
    x[:, :, MAP_FRONT] = np.clip(pair.front_map.grid, -1.0, 1.0)
    x[:, :, MASK_FRONT] = 2.0 * pair.front_mask.grid - 1.0
    x[:, :, MAP_BACK] = np.clip(pair.back_map.grid, -1.0, 1.0)
    x[:, :, MASK_BACK] = 2.0 * pair.back_mask.grid - 1.0
    return x


def unpack_sample(x):
    """(R, R, 8) image -> PanelPair; mask thresholded at 0, maps sentinel-
    filled wherever the mask is off."""
    x = np.asarray(x, float)

    def side(map_sl, mask_ch):
        on = x[:, :, mask_ch] > 0.0
        grid = np.where(on[:, :, None], np.clip(x[:, :, map_sl], -1.0, 1.0),
                        uvspace.SENTINEL)
        return uvspace.UVMap(grid), uvspace.PanelMask(on.astype(np.uint8))

    fm, fo = side(MAP_FRONT, MASK_FRONT)
    bm, bo = side(MAP_BACK, MASK_BACK)
    return uvspace.PanelPair(front_map=fm, front_mask=fo, back_map=bm, back_mask=bo)


# -- denoiser network -----------------------------------------------------------------


def sinusoidal_embedding(t, dim):
    """Fixed sin/cos features of the (integer) step index; shape (N, dim)."""
    t = np.atleast_1d(np.asarray(t, float))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class _ResBlock:
    def __init__(self, c_in, c_out, emb_dim, rng):
        self.gn1 = GroupNorm(c_in)
        self.conv1 = Conv2d(c_in, c_out, rng)
        self.emb = Linear(emb_dim, c_out, rng)
        self.gn2 = GroupNorm(c_out)
        self.conv2 = Conv2d(c_out, c_out, rng)
        self.skip = Conv2d(c_in, c_out, rng, kernel=1) if c_in != c_out else None

    def __call__(self, x, emb):
        h = self.conv1(ad.gelu(self.gn1(x)))
        e = self.emb(emb)
        h = h + ad.reshape(e, (e.shape[0], e.shape[1], 1, 1))
        h = self.conv2(ad.gelu(self.gn2(h)))
        s = self.skip(x) if self.skip is not None else x
        return s + h

    def parameters(self):
        ps = (self.gn1.parameters() + self.conv1.parameters() + self.emb.parameters()
              + self.gn2.parameters() + self.conv2.parameters())
        if self.skip is not None:
            ps += self.skip.parameters()
        return ps


class Denoiser:
    """U-shaped convolutional noise predictor epsilon(x_t, t).

    Downsampling levels given by `mults` over a `base` width, `blocks`
    residual blocks per level, additive per-channel time embedding. Output
    shape equals input shape; spatial size must be divisible by
    2**(len(mults)-1).
    """

    def __init__(self, channels=CHANNELS, base=32, mults=(1, 2, 4), blocks=2,
                 emb_dim=64, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.emb_dim = emb_dim
        self.config = dict(channels=channels, base=base, mults=tuple(mults),
                           blocks=blocks, emb_dim=emb_dim)
        self.emb_mlp = [Linear(emb_dim, emb_dim, rng), Linear(emb_dim, emb_dim, rng)]
        widths = [base * m for m in mults]

        self.conv_in = Conv2d(channels, widths[0], rng)
        self.down_blocks, self.down_samplers = [], []
        c = widths[0]
        for lvl, w in enumerate(widths):
            blocks_here = []
            for _ in range(blocks):
                blocks_here.append(_ResBlock(c, w, emb_dim, rng))
                c = w
            self.down_blocks.append(blocks_here)
            self.down_samplers.append(
                Conv2d(c, c, rng, stride=2) if lvl < len(widths) - 1 else None)
        self.mid = [_ResBlock(c, c, emb_dim, rng), _ResBlock(c, c, emb_dim, rng)]
        self.up_blocks, self.up_convs = [], []
        for lvl in reversed(range(len(widths))):
            w = widths[lvl]
            blocks_here = []
            for _ in range(blocks):
                blocks_here.append(_ResBlock(c + w, w, emb_dim, rng))
                c = w
            self.up_blocks.append(blocks_here)
            self.up_convs.append(Conv2d(c, c, rng) if lvl > 0 else None)
        self.gn_out = GroupNorm(c)
        self.conv_out = Conv2d(c, channels, rng)
        # start as the zero map so early training is stable
        self.conv_out.w.data[:] = 0.0

    def parameters(self):
        ps = [p for lin in self.emb_mlp for p in lin.parameters()]
        ps += self.conv_in.parameters()
        for blocks_here, samp in zip(self.down_blocks, self.down_samplers):
            for b in blocks_here:
                ps += b.parameters()
            if samp is not None:
                ps += samp.parameters()
        for b in self.mid:
            ps += b.parameters()
        for blocks_here, up in zip(self.up_blocks, self.up_convs):
            for b in blocks_here:
                ps += b.parameters()
            if up is not None:
                ps += up.parameters()
        return ps + self.gn_out.parameters() + self.conv_out.parameters()

    def __call__(self, x, t):
        """x: (N, C, H, W) Value or array; t: scalar or (N,) step indices."""
        x = Value.as_value(x)
        n = x.shape[0]
        t = np.broadcast_to(np.atleast_1d(np.asarray(t, float)), (n,))
        emb = Value.as_value(sinusoidal_embedding(t, self.emb_dim))
        emb = self.emb_mlp[1](ad.gelu(self.emb_mlp[0](emb)))

        h = self.conv_in(x)
        skips = []
        for blocks_here, samp in zip(self.down_blocks, self.down_samplers):
            for b in blocks_here:
                h = b(h, emb)
            skips.append(h)
            if samp is not None:
                h = samp(h)
        for b in self.mid:
            h = b(h, emb)
        for blocks_here, up in zip(self.up_blocks, self.up_convs):
            skip = skips.pop()
            if h.shape[2] != skip.shape[2]:
                h = ad.upsample_nearest2d(h, 2)
            h = ad.concat([h, skip], axis=1)
            for b in blocks_here:
                h = b(h, emb)
            if up is not None:
                h = up(h)
        return self.conv_out(ad.gelu(self.gn_out(h)))


def _to_nchw(x):
    return np.transpose(np.asarray(x, float), (2, 0, 1))[None]


def _from_nchw(x):
    return np.transpose(x[0], (1, 2, 0))


def _eval_eps(model, x_hwc, t):
    with no_grad():
        return _from_nchw(model(_to_nchw(x_hwc), t).data)


# -- forward / reverse process --------------------------------------------------------


def forward_marginal(schedule, x0, t, noise):
    """Closed-form corruption: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    t = schedule.check_t(t)
    x0, noise = np.asarray(x0, float), np.asarray(noise, float)
    if noise.shape != x0.shape:
        raise ValueError("noise shape must match the sample")
    ab = schedule.alpha_bar[t - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def reverse_step(model, schedule, x_t, t, z_noise=None, clip=None):
    """One ancestral denoising step x_t -> x_{t-1}.

    With `clip` set, the implied clean estimate is clamped to [-clip, clip]
    before the posterior mean is formed (identical to the plain update when
    the estimate is already in range); this keeps long sampling chains from
    amplifying prediction error outside the data range.
    """
    t = schedule.check_t(t)
    x_t = np.asarray(x_t, float)
    eps = _eval_eps(model, x_t, t)
    return _reverse_update(schedule, x_t, t, eps, z_noise, clip)


def _reverse_update(schedule, x_t, t, eps, z_noise, clip=None):
    a = schedule.alpha[t - 1]
    ab = schedule.alpha_bar[t - 1]
    b = schedule.beta[t - 1]
    if clip is None:
        mean = (x_t - (b / np.sqrt(1.0 - ab)) * eps) / np.sqrt(a)
    else:
        ab_prev = 1.0 if t == 1 else schedule.alpha_bar[t - 2]
        x0_hat = x_t / np.sqrt(ab) - np.sqrt((1.0 - ab) / ab) * eps
        x0_hat = np.clip(x0_hat, -clip, clip)
        mean = (np.sqrt(ab_prev) * b / (1.0 - ab) * x0_hat
                + np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab) * x_t)
    if t == 1 or z_noise is None:
        return mean
    return mean + schedule.sigma[t - 1] * np.asarray(z_noise, float)


def estimate_x0(model, schedule, x_t, t):
    """Denoised estimate of the clean sample from x_t in a single jump."""
    t = schedule.check_t(t)
    x_t = np.asarray(x_t, float)
    ab = schedule.alpha_bar[t - 1]
    eps = _eval_eps(model, x_t, t)
    return x_t / np.sqrt(ab) - np.sqrt((1.0 - ab) / ab) * eps


def training_loss(model, schedule, x0, t, noise):
    """Euclidean norm of the noise-prediction residual (a Value; call
    .backward() to train). Accepts one sample (H, W, C) or a batch
    (N, H, W, C) with per-sample t; batches average the per-sample norms."""
    x0 = np.asarray(x0, float)
    batched = x0.ndim == 4
    xs = x0 if batched else x0[None]
    ns = np.asarray(noise, float)
    ns = ns if batched else ns[None]
    ts = np.atleast_1d(np.asarray(t))
    if ns.shape != xs.shape or len(ts) != len(xs):
        raise ValueError("batch shapes disagree")
    ab = schedule.alpha_bar[[schedule.check_t(tt) - 1 for tt in ts]]
    coef_s = np.sqrt(ab)[:, None, None, None]
    coef_n = np.sqrt(1.0 - ab)[:, None, None, None]
    x_t = np.transpose(coef_s * xs + coef_n * ns, (0, 3, 1, 2))
    eps = model(x_t, np.asarray(ts, float))
    diff = eps - np.transpose(ns, (0, 3, 1, 2))
    sq = (diff * diff).sum(axis=3).sum(axis=2).sum(axis=1)
    return ad.sqrt(sq + 1e-30).mean()


# -- manifold guidance ----------------------------------------------------------------


@dataclass
class Guidance:
    """Observation terms steering the reverse process.

    sparse_map: (R, R, 6) observed positions, front then back channels.
    sparse_mask: (R, R, 2) binary, 1 where sparse_map holds an observation.
    panel_mask: (R, R, 2) recovered panel masks in the remapped {-1, +1} domain.
    prev_map: optional (R, R, 6) previous-frame map for temporal smoothing.
    rho: guidance step size; lam: temporal weight.
    """

    sparse_map: np.ndarray
    sparse_mask: np.ndarray
    panel_mask: np.ndarray
    prev_map: np.ndarray = None
    rho: float = 2.0
    lam: float = 0.5

    def __post_init__(self):
        self.sparse_map = np.asarray(self.sparse_map, float)
        self.sparse_mask = np.asarray(self.sparse_mask, float)
        self.panel_mask = np.asarray(self.panel_mask, float)
        R = self.sparse_map.shape[0]
        if (self.sparse_map.shape != (R, R, 6) or self.sparse_mask.shape != (R, R, 2)
                or self.panel_mask.shape != (R, R, 2)):
            raise ValueError("guidance grids must share one resolution")
        if self.prev_map is not None:
            self.prev_map = np.asarray(self.prev_map, float)
            if self.prev_map.shape != (R, R, 6):
                raise ValueError("previous map must match the sparse map shape")
        if self.rho < 0.0 or self.lam < 0.0:
            raise ValueError("guidance weights must be non-negative")


def _split_maps(x):
    """(R, R, 8) sample -> map channels (R, R, 6) and mask channels (R, R, 2)."""
    idx_map = (slice(None), slice(None), [0, 1, 2, 4, 5, 6])
    idx_mask = (slice(None), slice(None), [MASK_FRONT, MASK_BACK])
    if isinstance(x, Value):
        return x[idx_map], x[idx_mask]
    return x[idx_map], x[idx_mask]


def guidance_distance(x0_hat, guidance):
    """Distance from a denoised estimate to the observations: L2 on observed
    map pixels, L1 on the mask channels, plus an optional L2 pull of the
    unobserved map pixels toward the previous frame."""
    is_value = isinstance(x0_hat, Value)
    xv = x0_hat if is_value else Value.as_value(np.asarray(x0_hat, float))
    maps, masks = _split_maps(xv)
    w = np.repeat(guidance.sparse_mask, 3, axis=2)  # per-panel mask over xyz
    d = ad.sqrt(((maps * w - guidance.sparse_map * w) ** 2).sum() + 1e-30)
    d = d + ad.absolute(masks - guidance.panel_mask).sum()
    if guidance.prev_map is not None and guidance.lam > 0.0:
        free = 1.0 - w
        pull = ((maps * free - guidance.prev_map * free) ** 2).sum()
        d = d + guidance.lam * ad.sqrt(pull + 1e-30)
    return d if is_value else float(d.data)


def guidance_gradient(model, schedule, x_t, t, guidance):
    """Distance at the one-jump clean estimate and its gradient w.r.t. x_t
    (flowing through both the estimate and the noise prediction).
    Returns (distance, gradient, predicted noise)."""
    t = schedule.check_t(t)
    ab = schedule.alpha_bar[t - 1]
    xv = Value(_to_nchw(np.asarray(x_t, float)), requires_grad=True)
    eps = model(xv, t)
    x0_hat = xv * (1.0 / np.sqrt(ab)) - eps * np.sqrt((1.0 - ab) / ab)
    d = guidance_distance(ad.transpose(x0_hat[0], (1, 2, 0)), guidance)
    d.backward()
    grad = _from_nchw(xv.grad)
    if not np.all(np.isfinite(grad)):
        raise RuntimeError(
            f"guidance gradient diverged at step {t}: "
            f"distance={float(d.data):.4g}, |x_t|={np.abs(np.asarray(x_t)).max():.4g}")
    return float(d.data), grad, _from_nchw(eps.data)


def guided_reverse_step(model, schedule, x_t, t, guidance, z_noise=None,
                        trace=None, clip=None):
    """reverse_step with the predicted noise shifted along the gradient of
    guidance_distance through the one-jump clean estimate."""
    t = schedule.check_t(t)
    x_t = np.asarray(x_t, float)
    if guidance.rho == 0.0:
        out = reverse_step(model, schedule, x_t, t, z_noise, clip)
        if trace is not None:
            trace.append({"t": t, "distance": np.nan, "eps_norm": np.nan})
        return out

    d, grad, eps = guidance_gradient(model, schedule, x_t, t, guidance)
    ab = schedule.alpha_bar[t - 1]
    rho_t = guidance.rho / np.sqrt(1.0 - ab)
    eps_eff = eps + rho_t * schedule.sigma[t - 1] * grad
    if trace is not None:
        trace.append({"t": t, "distance": d,
                      "eps_norm": float(np.linalg.norm(eps))})
    return _reverse_update(schedule, x_t, t, eps_eff, z_noise, clip)


def sample_chain(model, schedule, resolution, rng, guidance=None, trace=None,
                 clip=1.0):
    """Full reverse chain from Gaussian noise; returns the final sample."""
    x = rng.standard_normal((resolution, resolution, CHANNELS))
    for t in range(schedule.T, 0, -1):
        z = rng.standard_normal(x.shape) if t > 1 else None
        if guidance is not None:
            x = guided_reverse_step(model, schedule, x, t, guidance, z, trace, clip)
        else:
            x = reverse_step(model, schedule, x, t, z, clip)
    return x


def write_trace(path, trace):
    """Guided-run diagnostics as CSV with columns t, distance, eps_norm."""
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["t", "distance", "eps_norm"])
        w.writeheader()
        w.writerows(trace)


# -- training -------------------------------------------------------------------------


def train_diffusion(model, schedule, samples, steps=2000, batch=8, lr=2e-4,
                    seed=0, log=None):
    """Noise-prediction training over packed (R, R, 8) samples; returns the
    per-step loss history."""
    from .nn import Adam

    samples = np.asarray(samples, float)
    if samples.ndim != 4 or samples.shape[-1] != CHANNELS:
        raise ValueError("expected (N, R, R, 8) training samples")
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=lr)
    history = []
    for step in range(steps):
        i = rng.integers(0, len(samples), size=batch)
        ts = rng.integers(1, schedule.T + 1, size=batch)
        noise = rng.standard_normal((batch,) + samples.shape[1:])
        loss = training_loss(model, schedule, samples[i], ts, noise)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.data))
        if log is not None and (step + 1) % 100 == 0:
            log(step + 1, history[-1])
    return history


# -- persistence -----------------------------------------------------------------------


def save_diffusion(model, schedule, path):
    """Write denoiser weights plus the variance schedule to one container."""
    cfg = model.config
    arrays = {
        "meta": np.array([cfg["channels"], cfg["base"], cfg["blocks"],
                          cfg["emb_dim"]], float),
        "mults": np.array(cfg["mults"], float),
        "beta": schedule.beta,
    }
    for i, p in enumerate(model.parameters()):
        arrays[f"p{i:04d}"] = p.data
    checkpoint.save_arrays(path, arrays)


def load_diffusion(path):
    """Read (Denoiser, Schedule) back from a container written by
    save_diffusion. Weights are stored in float32, so the roundtrip is exact
    only to single precision."""
    arrays = checkpoint.load_arrays(path)
    ch, base, blocks, emb = (int(v) for v in arrays["meta"])
    model = Denoiser(channels=ch, base=base,
                     mults=tuple(int(m) for m in arrays["mults"]),
                     blocks=blocks, emb_dim=emb, rng=np.random.default_rng(0))
    for i, p in enumerate(model.parameters()):
        p.data = arrays[f"p{i:04d}"].astype(float)
    return model, Schedule(arrays["beta"].astype(float))
