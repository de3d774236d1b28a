import csv

import numpy as np
import pytest

from uvgarment import diffusion as df
from uvgarment import uvspace
from uvgarment.nn import Value


def tiny_model(seed=0, zero_out=True):
    m = df.Denoiser(base=8, mults=(1, 2), blocks=1, emb_dim=16,
                    rng=np.random.default_rng(seed))
    if not zero_out:
        m.conv_out.w.data = np.random.default_rng(seed + 1).normal(
            scale=0.05, size=m.conv_out.w.data.shape)
    return m


class OracleModel:
    """Stub denoiser that returns a fixed noise image regardless of input."""

    def __init__(self, noise_hwc):
        self.noise = np.transpose(noise_hwc, (2, 0, 1))[None]

    def __call__(self, x, t):
        n = x.shape[0] if hasattr(x, "shape") else 1
        return Value.as_value(np.repeat(self.noise, n, axis=0))


class TestSchedule:
    def test_linear_shapes_and_monotonicity(self):
        s = df.Schedule.linear(T=200)
        assert s.T == 200
        assert len(s.beta) == len(s.alpha) == len(s.alpha_bar) == len(s.sigma) == 200
        assert np.all((s.beta > 0) & (s.beta < 1))
        assert np.all(np.diff(s.alpha_bar) < 0)

    def test_final_step_is_deterministic(self):
        assert df.Schedule.linear(T=50).sigma[0] == 0.0

    def test_constant_beta_products(self):
        s = df.Schedule(np.full(5, 0.1))
        assert np.isclose(s.alpha_bar[1], 0.81)

    def test_invalid_beta_rejected(self):
        with pytest.raises(ValueError):
            df.Schedule(np.array([0.1, 1.5]))
        with pytest.raises(ValueError):
            df.Schedule(np.array([-0.1]))


class TestForwardMarginal:
    def test_tiny_first_step_is_near_identity(self):
        s = df.Schedule(np.array([1e-8, 0.1]))
        x0 = np.random.default_rng(0).uniform(-1, 1, (8, 8, 8))
        xt = df.forward_marginal(s, x0, 1, np.ones_like(x0))
        assert np.allclose(xt, x0, atol=1e-3)

    def test_constant_beta_coefficients(self):
        s = df.Schedule(np.full(5, 0.1))
        x0 = np.ones((4, 4, 8))
        noise = np.full_like(x0, 2.0)
        xt = df.forward_marginal(s, x0, 2, noise)
        assert np.allclose(xt, 0.9 + 2.0 * np.sqrt(0.19))

    def test_monte_carlo_moments(self):
        s = df.Schedule.linear(T=20)
        rng = np.random.default_rng(3)
        x0 = rng.uniform(-1, 1, (4, 4, 8))
        t = 12
        draws = np.stack([df.forward_marginal(s, x0, t, rng.standard_normal(x0.shape))
                          for _ in range(10_000)])
        ab = s.alpha_bar[t - 1]
        se = np.sqrt(1 - ab) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - np.sqrt(ab) * x0) < 3 * se + 3e-3)
        assert np.allclose(draws.var(axis=0), 1 - ab, rtol=0.08)

    def test_step_out_of_range(self):
        s = df.Schedule.linear(T=5)
        x0 = np.zeros((4, 4, 8))
        with pytest.raises(ValueError):
            df.forward_marginal(s, x0, 0, x0)
        with pytest.raises(ValueError):
            df.forward_marginal(s, x0, 6, x0)


class TestReverseStep:
    def test_zero_network_rescales(self):
        s = df.Schedule.linear(T=10)
        m = tiny_model()  # zero-initialized output: predicts no noise
        xt = np.random.default_rng(0).normal(size=(8, 8, 8))
        out = df.reverse_step(m, s, xt, 4, np.zeros_like(xt))
        assert np.allclose(out, xt / np.sqrt(s.alpha[3]))

    def test_clipped_update_matches_plain_when_in_range(self):
        # the clipped posterior mean is the same algebra when the clean
        # estimate is already inside the clip range
        s = df.Schedule.linear(T=10)
        m = tiny_model(zero_out=False)
        x0 = np.random.default_rng(5).uniform(-0.5, 0.5, (8, 8, 8))
        xt = df.forward_marginal(s, x0, 2, np.zeros_like(x0) + 0.01)
        plain = df.reverse_step(m, s, xt, 2, None)
        clipped = df.reverse_step(m, s, xt, 2, None, clip=100.0)
        assert np.allclose(plain, clipped, atol=1e-12)

    def test_final_step_ignores_noise(self):
        s = df.Schedule.linear(T=10)
        m = tiny_model(zero_out=False)
        xt = np.random.default_rng(1).normal(size=(8, 8, 8))
        a = df.reverse_step(m, s, xt, 1, np.ones_like(xt) * 100.0)
        b = df.reverse_step(m, s, xt, 1, None)
        assert np.array_equal(a, b)


class TestTrainingLoss:
    def test_oracle_network_zero_loss(self):
        s = df.Schedule.linear(T=10)
        rng = np.random.default_rng(0)
        x0 = rng.uniform(-1, 1, (8, 8, 8))
        noise = rng.standard_normal(x0.shape)
        loss = df.training_loss(OracleModel(noise), s, x0, 5, noise)
        assert float(loss.data) < 1e-12

    def test_zero_network_loss_is_noise_norm(self):
        s = df.Schedule.linear(T=10)
        rng = np.random.default_rng(1)
        x0 = rng.uniform(-1, 1, (8, 8, 8))
        noise = rng.standard_normal(x0.shape)
        loss = df.training_loss(tiny_model(), s, x0, 5, noise)
        assert np.isclose(float(loss.data), np.linalg.norm(noise))


class TestEstimateX0:
    def test_oracle_inverse_identity(self):
        s = df.Schedule.linear(T=20)
        rng = np.random.default_rng(2)
        for _ in range(10):
            x0 = rng.uniform(-1, 1, (8, 8, 8))
            noise = rng.standard_normal(x0.shape)
            t = int(rng.integers(1, 21))
            xt = df.forward_marginal(s, x0, t, noise)
            rec = df.estimate_x0(OracleModel(noise), s, xt, t)
            assert np.max(np.abs(rec - x0)) <= 1e-10

    def test_zero_network_rescales(self):
        s = df.Schedule.linear(T=10)
        xt = np.random.default_rng(3).normal(size=(8, 8, 8))
        rec = df.estimate_x0(tiny_model(), s, xt, 7)
        assert np.allclose(rec, xt / np.sqrt(s.alpha_bar[6]))


class TestGuidanceDistance:
    def test_exact_match_is_zero(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, (8, 8, 8))
        g = df.Guidance(sparse_map=x[:, :, [0, 1, 2, 4, 5, 6]],
                        sparse_mask=np.ones((8, 8, 2)),
                        panel_mask=x[:, :, [3, 7]])
        assert df.guidance_distance(x, g) < 1e-12

    def test_unobserved_maps_ignored(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(-1, 1, (8, 8, 8))
        b = a.copy()
        b[:, :, [0, 1, 2, 4, 5, 6]] = rng.uniform(-1, 1, (8, 8, 6))
        g = df.Guidance(sparse_map=np.zeros((8, 8, 6)),
                        sparse_mask=np.zeros((8, 8, 2)),
                        panel_mask=a[:, :, [3, 7]])
        assert np.isclose(df.guidance_distance(a, g), df.guidance_distance(b, g))

    def test_single_pixel_arithmetic(self):
        x = np.zeros((1, 1, 8))
        x[0, 0, 3] = x[0, 0, 7] = 1.0
        sparse_map = np.zeros((1, 1, 6))
        sparse_map[0, 0, 0] = 0.5
        sparse_mask = np.zeros((1, 1, 2))
        sparse_mask[0, 0, 0] = 1.0
        g = df.Guidance(sparse_map=sparse_map, sparse_mask=sparse_mask,
                        panel_mask=np.ones((1, 1, 2)))
        assert np.isclose(df.guidance_distance(x, g), 0.5)

    def test_temporal_term_pulls_unobserved(self):
        x = np.zeros((4, 4, 8))
        prev = np.full((4, 4, 6), 0.25)
        g = df.Guidance(sparse_map=np.zeros((4, 4, 6)),
                        sparse_mask=np.zeros((4, 4, 2)),
                        panel_mask=x[:, :, [3, 7]], prev_map=prev, lam=0.5)
        assert np.isclose(df.guidance_distance(x, g),
                          0.5 * np.sqrt((prev ** 2).sum()))

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            df.Guidance(sparse_map=np.zeros((4, 4, 6)),
                        sparse_mask=np.zeros((3, 3, 2)),
                        panel_mask=np.zeros((4, 4, 2)))
        with pytest.raises(ValueError):
            df.Guidance(sparse_map=np.zeros((4, 4, 6)),
                        sparse_mask=np.zeros((4, 4, 2)),
                        panel_mask=np.zeros((4, 4, 2)), rho=-1.0)


class TestGuidedStep:
    def test_gradient_matches_finite_differences(self):
        s = df.Schedule.linear(T=10)
        m = tiny_model(zero_out=False)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(8, 8, 8))
        g = df.Guidance(sparse_map=rng.uniform(-1, 1, (8, 8, 6)),
                        sparse_mask=(rng.uniform(size=(8, 8, 2)) < 0.5).astype(float),
                        panel_mask=rng.choice([-1.0, 1.0], (8, 8, 2)),
                        prev_map=rng.uniform(-1, 1, (8, 8, 6)))
        t = 5
        _, grad, _ = df.guidance_gradient(m, s, x, t, g)
        eps = 1e-5
        idx = [tuple(rng.integers(0, 8, 3)) for _ in range(12)]
        for ij in idx:
            xp, xm = x.copy(), x.copy()
            xp[ij] += eps
            xm[ij] -= eps
            dp, _, _ = df.guidance_gradient(m, s, xp, t, g)
            dm, _, _ = df.guidance_gradient(m, s, xm, t, g)
            fd = (dp - dm) / (2 * eps)
            assert abs(grad[ij] - fd) <= 1e-3 * max(abs(fd), 1.0)

    def test_rho_zero_matches_unguided_chain(self):
        s = df.Schedule.linear(T=10)
        m = tiny_model(zero_out=False)
        g = df.Guidance(sparse_map=np.zeros((8, 8, 6)),
                        sparse_mask=np.ones((8, 8, 2)),
                        panel_mask=np.ones((8, 8, 2)), rho=0.0, lam=0.0)
        a = df.sample_chain(m, s, 8, np.random.default_rng(7))
        b = df.sample_chain(m, s, 8, np.random.default_rng(7), guidance=g)
        assert np.array_equal(a, b)


def toy_samples(n, rng):
    """Two-mode toy distribution: every pixel of a sample equals -0.6 or +0.6."""
    modes = rng.choice([-0.6, 0.6], size=n)
    return modes[:, None, None, None] * np.ones((n, 8, 8, df.CHANNELS))


@pytest.fixture(scope="module")
def toy_prior():
    rng = np.random.default_rng(0)
    samples = toy_samples(64, rng)
    # variances chosen so the forward process actually reaches noise at T=50
    schedule = df.Schedule.linear(T=50, beta_start=1e-3, beta_end=0.25)
    model = df.Denoiser(base=16, mults=(1, 2), blocks=1, emb_dim=32,
                        rng=np.random.default_rng(1))
    history = df.train_diffusion(model, schedule, samples, steps=3000, batch=8,
                                 lr=2e-3, seed=2)
    return model, schedule, samples, history


class TestTrainedPrior:
    def test_loss_decreases(self, toy_prior):
        _, _, _, history = toy_prior
        first = np.mean(history[:50])
        last = np.mean(history[-50:])
        assert last < 0.25 * first

    def test_samples_match_two_mode_histogram(self, toy_prior):
        model, schedule, samples, _ = toy_prior
        rng = np.random.default_rng(3)
        means = [df.sample_chain(model, schedule, 8, rng).mean()
                 for _ in range(40)]
        frac_pos = np.mean(np.array(means) > 0)
        true_frac = np.mean(samples.mean(axis=(1, 2, 3)) > 0)
        # total variation between the two binary mode histograms
        assert abs(frac_pos - true_frac) < 0.25
        # samples commit to a mode: clearly away from the collapsed mean 0
        assert np.median(np.abs(means)) > 0.15

    def test_guided_completion_beats_unguided(self, toy_prior):
        model, schedule, samples, _ = toy_prior
        rng = np.random.default_rng(4)
        x0 = samples[0]
        obs = (rng.uniform(size=(8, 8, 2)) < 0.5).astype(float)
        g = df.Guidance(sparse_map=x0[:, :, [0, 1, 2, 4, 5, 6]],
                        sparse_mask=obs, panel_mask=x0[:, :, [3, 7]], rho=2.0)
        w = np.repeat(obs, 3, axis=2).astype(bool)
        errs_g, errs_u = [], []
        for seed in range(5):
            xg = df.sample_chain(model, schedule, 8, np.random.default_rng(seed),
                                 guidance=g)
            xu = df.sample_chain(model, schedule, 8, np.random.default_rng(seed))
            errs_g.append(np.abs((xg[:, :, [0, 1, 2, 4, 5, 6]] - x0[:, :, [0, 1, 2, 4, 5, 6]])[w]).mean())
            errs_u.append(np.abs((xu[:, :, [0, 1, 2, 4, 5, 6]] - x0[:, :, [0, 1, 2, 4, 5, 6]])[w]).mean())
        assert np.median(errs_g) <= 0.25 * np.median(errs_u)

    def test_guidance_distance_decreases_over_chain(self, toy_prior):
        model, schedule, samples, _ = toy_prior
        x0 = samples[1]
        obs = np.ones((8, 8, 2))
        g = df.Guidance(sparse_map=x0[:, :, [0, 1, 2, 4, 5, 6]],
                        sparse_mask=obs, panel_mask=x0[:, :, [3, 7]], rho=2.0)
        wins = 0
        for seed in range(5):
            trace = []
            df.sample_chain(model, schedule, 8, np.random.default_rng(100 + seed),
                            guidance=g, trace=trace)
            first = np.median([r["distance"] for r in trace[:5]])
            last = np.median([r["distance"] for r in trace[-5:]])
            wins += last < first
        assert wins >= 4


class TestPacking:
    def make_pair(self, seed=0, R=8):
        rng = np.random.default_rng(seed)
        fmask = (rng.uniform(size=(R, R)) < 0.6).astype(np.uint8)
        bmask = (rng.uniform(size=(R, R)) < 0.6).astype(np.uint8)

        def mk(mask):
            grid = np.where(mask[:, :, None].astype(bool),
                            rng.uniform(-0.9, 0.9, (R, R, 3)), uvspace.SENTINEL)
            return uvspace.UVMap(grid)

        return uvspace.PanelPair(front_map=mk(fmask), front_mask=uvspace.PanelMask(fmask),
                                 back_map=mk(bmask), back_mask=uvspace.PanelMask(bmask))

    def test_roundtrip(self):
        pair = self.make_pair()
        back = df.unpack_sample(df.pack_sample(pair))
        assert np.array_equal(back.front_mask.grid, pair.front_mask.grid)
        assert np.array_equal(back.back_mask.grid, pair.back_mask.grid)
        assert np.allclose(back.front_map.grid, pair.front_map.grid)
        assert np.allclose(back.back_map.grid, pair.back_map.grid)

    def test_mask_channels_remapped(self):
        x = df.pack_sample(self.make_pair(1))
        assert set(np.unique(x[:, :, df.MASK_FRONT])) <= {-1.0, 1.0}
        assert set(np.unique(x[:, :, df.MASK_BACK])) <= {-1.0, 1.0}


class TestTrace:
    def test_csv_written(self, tmp_path):
        rows = [{"t": 3, "distance": 1.5, "eps_norm": 2.0},
                {"t": 2, "distance": 1.0, "eps_norm": 1.9}]
        path = tmp_path / "trace.csv"
        df.write_trace(path, rows)
        with open(path) as f:
            got = list(csv.DictReader(f))
        assert got[0]["t"] == "3" and float(got[1]["distance"]) == 1.0
