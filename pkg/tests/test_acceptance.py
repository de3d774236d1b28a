"""Acceptance gate: one test class per release criterion.

Heavy artifacts (trained models, synthetic datasets) are built once in
module-scoped fixtures and shared; wall-clock budgets are asserted next to
the quality thresholds they were specified with.
"""

import time

import numpy as np
import pytest

import uvgarment.diffusion as df
import uvgarment.flatten as fl
import uvgarment.isp as isp
import uvgarment.mapper as mp
import uvgarment.metrics as mt
import uvgarment.recon as rc
import uvgarment.synth as sy
import uvgarment.uvspace as uv
from uvgarment.nn import Conv2d, GroupNorm, Linear, Mlp, SelfAttention, Value
from uvgarment.nn import autodiff as ad


# -- shared synthetic garments ----------------------------------------------------------


ACCEPT_SPECS = [
    sy.GarmentSpec("top", width=0.9, length=1.1, resolution=17),
    sy.GarmentSpec("skirt", width=1.0, length=1.2, taper=0.85, resolution=17),
    sy.GarmentSpec("pants", width=0.9, length=1.4, taper=0.75, resolution=17),
    sy.GarmentSpec("top", width=1.1, length=0.9, resolution=17),
    sy.GarmentSpec("skirt", width=0.8, length=1.0, taper=0.9, resolution=17),
]


@pytest.fixture(scope="module")
def garment_bank():
    bank = []
    for spec in ACCEPT_SPECS:
        garment = sy.gen_garment(spec)
        panels = sy.garment_panels(garment, arap_iters=40)
        lo, hi = uv.bounding_box(garment.vertices)
        box = (lo - 0.05 * (hi - lo), hi + 0.05 * (hi - lo))
        truths = (isp.panel_truth(panels[0], garment.front, box),
                  isp.panel_truth(panels[1], garment.back, box))
        bank.append((spec, garment, panels, truths))
    return bank


@pytest.fixture(scope="module")
def trained_isp(garment_bank):
    truths = [entry[3] for entry in garment_bank]
    t0 = time.perf_counter()
    model = isp.train_isp(truths, steps=4000, lr=2e-3, batch_per_panel=64,
                          sdf_weight=3.0, eval_every=500, seed=0)
    return model, truths, time.perf_counter() - t0


# -- 1: autodiff gradients match finite differences --------------------------------------


def finite_diff_check(params, loss_fn, rng, rel_tol=1e-4, n_checks=3):
    loss = loss_fn()
    for p in params:
        p.grad = None
    loss.backward()
    ok = True
    for p in params:
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for idx in rng.choice(flat.size, size=min(n_checks, flat.size),
                              replace=False):
            h = 1e-5 * max(1.0, abs(flat[idx]))
            orig = flat[idx]
            flat[idx] = orig + h
            up = float(loss_fn().data)
            flat[idx] = orig - h
            dn = float(loss_fn().data)
            flat[idx] = orig
            fd = (up - dn) / (2 * h)
            scale = max(abs(fd), abs(gflat[idx]), 1e-4)
            if abs(fd - gflat[idx]) / scale > rel_tol:
                ok = False
    return ok


class TestCriterion01Autodiff:
    def test_layer_gradients_match_finite_differences(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        failures = 0
        cases = 0
        while cases < 100:
            kind = cases % 5
            if kind == 0:
                layer = Linear(4, 3, rng)
                x = rng.standard_normal((5, 4))
                fn = lambda: (layer(Value(x)) ** 2).sum()
            elif kind == 1:
                layer = Conv2d(2, 3, rng)
                x = rng.standard_normal((1, 2, 6, 6))
                fn = lambda: (layer(Value(x)) ** 2).sum()
            elif kind == 2:
                layer = GroupNorm(4)
                layer.gamma.data[:] = 1.0 + 0.1 * rng.standard_normal(4)
                x = rng.standard_normal((1, 4, 5, 5))
                fn = lambda: (ad.tanh(layer(Value(x))) ** 2).sum()
            elif kind == 3:
                layer = SelfAttention(8, 2, rng)
                x = rng.standard_normal((1, 6, 8))
                fn = lambda: (layer(Value(x)) ** 2).sum()
            else:
                layer = Mlp(3, [8], 2, rng, activation="gelu",
                            fourier_frequencies=3)
                x = rng.standard_normal((7, 3))
                fn = lambda: (layer(Value(x)) ** 2).sum()
            if not finite_diff_check(layer.parameters(), fn, rng):
                failures += 1
            cases += 1
        assert failures == 0
        assert time.perf_counter() - t0 < 60


# -- 2: forward-process marginal moments -------------------------------------------------


class TestCriterion02MarginalMoments:
    def test_monte_carlo_moments_match_closed_form(self):
        t0 = time.perf_counter()
        schedule = df.Schedule.linear(T=200)
        rng = np.random.default_rng(1)
        x0 = rng.uniform(-1, 1, size=(4, 4, df.CHANNELS))
        n = 10_000
        for t in (1, 50, 200):
            ab = schedule.alpha_bar[t - 1]
            noise = rng.standard_normal((n,) + x0.shape)
            draws = np.stack([df.forward_marginal(schedule, x0, t, noise[i])
                              for i in range(n)])
            mean = draws.mean(axis=0)
            se = np.sqrt(1.0 - ab) / np.sqrt(n)
            assert np.all(np.abs(mean - np.sqrt(ab) * x0) < 3 * se + 1e-12)
            var = draws.var(axis=0).mean()
            assert abs(var - (1.0 - ab)) < 0.05 * max(1.0 - ab, 1e-3)
        assert time.perf_counter() - t0 < 60


# -- 3: one-jump clean estimate inverts the forward map ----------------------------------


class TestCriterion03CleanEstimate:
    def test_oracle_noise_recovers_clean_sample(self):
        schedule = df.Schedule.linear(T=200)
        rng = np.random.default_rng(2)

        class Oracle:
            def __init__(self, eps):
                self.eps = eps

            def __call__(self, x, t):
                return Value(np.transpose(self.eps, (2, 0, 1))[None])

        worst = 0.0
        for _ in range(100):
            x0 = rng.uniform(-1, 1, size=(4, 4, df.CHANNELS))
            eps = rng.standard_normal(x0.shape)
            t = int(rng.integers(1, 201))
            x_t = df.forward_marginal(schedule, x0, t, eps)
            x0_hat = df.estimate_x0(Oracle(eps), schedule, x_t, t)
            worst = max(worst, np.abs(x0_hat - x0).max())
        assert worst <= 1e-10


# -- 4: zero guidance strength is a strict no-op ------------------------------------------


class TestCriterion04GuidanceOffSwitch:
    def test_rho_zero_chain_is_bit_identical(self):
        schedule = df.Schedule.linear(T=200)
        model = df.Denoiser(base=8, mults=(1, 2), blocks=1, emb_dim=16,
                            rng=np.random.default_rng(3))
        g = df.Guidance(sparse_map=np.zeros((8, 8, 6)),
                        sparse_mask=np.ones((8, 8, 2)),
                        panel_mask=np.ones((8, 8, 2)), rho=0.0, lam=0.0)
        a = df.sample_chain(model, schedule, 8, np.random.default_rng(4),
                            guidance=g)
        b = df.sample_chain(model, schedule, 8, np.random.default_rng(4))
        assert np.array_equal(a, b)


# -- 5: guidance gradient matches finite differences --------------------------------------


class TestCriterion05GuidanceGradient:
    def test_gradient_matches_finite_differences(self):
        schedule = df.Schedule.linear(T=50, beta_start=1e-3, beta_end=0.25)
        model = df.Denoiser(base=8, mults=(1, 2), blocks=1, emb_dim=16,
                            rng=np.random.default_rng(5))
        for p in model.parameters():
            p.data = 0.05 * np.random.default_rng(6).standard_normal(p.data.shape)
        rng = np.random.default_rng(7)
        for case in range(20):
            g = df.Guidance(sparse_map=rng.uniform(-1, 1, (8, 8, 6)),
                            sparse_mask=(rng.uniform(size=(8, 8, 2)) < 0.5).astype(float),
                            panel_mask=np.sign(rng.standard_normal((8, 8, 2))),
                            prev_map=rng.uniform(-1, 1, (8, 8, 6)),
                            rho=2.0, lam=0.5)
            x_t = rng.standard_normal((8, 8, df.CHANNELS))
            t = int(rng.integers(1, 51))
            _, grad, _ = df.guidance_gradient(model, schedule, x_t, t, g)

            def dist(x):
                ab = schedule.alpha_bar[t - 1]
                eps = model(np.transpose(x, (2, 0, 1))[None], t).data
                x0_hat = (np.transpose(x, (2, 0, 1))[None] / np.sqrt(ab)
                          - np.sqrt((1 - ab) / ab) * eps)
                return float(df.guidance_distance(
                    np.transpose(x0_hat[0], (1, 2, 0)), g))

            for _ in range(3):
                i, j, c = (int(rng.integers(0, 8)), int(rng.integers(0, 8)),
                           int(rng.integers(0, df.CHANNELS)))
                h = 1e-4
                xp, xm = x_t.copy(), x_t.copy()
                xp[i, j, c] += h
                xm[i, j, c] -= h
                fd = (dist(xp) - dist(xm)) / (2 * h)
                scale = max(abs(fd), abs(grad[i, j, c]), 1e-3)
                assert abs(fd - grad[i, j, c]) / scale <= 1e-3


# -- 6: pattern model fidelity on five garments --------------------------------------------


class TestCriterion06PatternFidelity:
    def test_iou_mapping_and_budget(self, trained_isp):
        model, truths, seconds = trained_isp
        report = isp.evaluate_isp(model, truths, resolution=64)
        assert np.all(report["iou"] >= 0.98), report["iou"]
        assert np.all(report["map_err"] < 1e-2), report["map_err"]
        assert seconds <= 20 * 60


# -- 7: latent recovery from rendered ground-truth masks -----------------------------------


class TestCriterion07LatentRecovery:
    def test_five_of_five_garments_recovered(self, trained_isp):
        model, truths, _ = trained_isp
        R = 64
        for g, (front, back) in enumerate(truths):
            def render(truth):
                grid, _ = fl.rasterize_panel(truth.vertices2d, truth.triangles,
                                             truth.positions3d, R)
                m = uv.UVMap(grid)
                return m, uv.mask_of(m)

            fm, fo = render(front)
            bm, bo = render(back)
            pair = uv.PanelPair(fm, fo, bm, bo)
            t0 = time.perf_counter()
            z = isp.fit_latent(model, pair, steps=300)
            assert time.perf_counter() - t0 <= 120
            for side in (isp.SIDE_FRONT, isp.SIDE_BACK):
                got = model.extract_panel_mask(z, side, R).grid.astype(bool)
                want = model.extract_panel_mask(model.codes.data[g], side,
                                                R).grid.astype(bool)
                iou = (got & want).sum() / max((got | want).sum(), 1)
                assert iou >= 0.95, (g, side, iou)


# -- 8: flattening energy behavior ----------------------------------------------------------


class TestCriterion08Flattening:
    def grid_piece(self, n=9, bend=0.0):
        xs, ys = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
        if bend:
            v = np.stack([np.sin(bend * xs.ravel()) / bend, ys.ravel(),
                          (1 - np.cos(bend * xs.ravel())) / bend], axis=1)
        else:
            v = np.stack([xs.ravel(), ys.ravel(), np.zeros(n * n)], axis=1)
        idx = np.arange(n * n).reshape(n, n)
        a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
        c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
        t = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
        return fl.MeshPiece(v, t)

    def test_planar_energy_vanishes(self):
        panel = fl.arap_flatten(self.grid_piece(), iters=30)
        assert panel.energy_trace[-1] < 1e-10

    def test_cylinder_strip_area_distortion_below_one_percent(self):
        piece = self.grid_piece(bend=1.5)
        panel = fl.arap_flatten(piece, iters=80)
        a3d = fl.triangle_areas(piece.vertices, piece.triangles)
        a2d = fl.signed_areas_2d(panel.vertices2d, panel.triangles)
        assert np.abs(a2d / a3d - 1.0).max() < 0.01

    def test_energy_non_increasing_on_every_mesh(self):
        for bend in (0.0, 0.8, 1.5, 2.2):
            panel = fl.arap_flatten(self.grid_piece(bend=bend), iters=40)
            trace = np.asarray(panel.energy_trace)
            assert np.all(np.diff(trace) <= 1e-9)


# -- 9: point-to-pattern mapper on held-out frames ------------------------------------------


@pytest.fixture(scope="module")
def mapper_stack(garment_bank):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    train, held_out = [], []
    for spec, garment, panels, _ in garment_bank[:3]:
        for si in range(5):
            script = sy.make_fold_script(spec, rng)
            frames, _ = sy.build_sequence(garment, panels, script, n_frames=6,
                                          resolution=64, rng=rng,
                                          points_per_frame=400)
            pairs = [(mp.PointCloudFrame(f.points),
                      mp.PointTargets(f.sigma, f.k_u, f.k_v)) for f in frames]
            (train if si < 4 else held_out).extend(pairs)
    model, _ = mp.train_mapper(train, k=64, steps=20000, seed=0)
    return model, held_out, time.perf_counter() - t0


class TestCriterion09Mapper:
    def test_held_out_accuracy_and_budget(self, mapper_stack):
        model, held_out, seconds = mapper_stack
        report = mp.evaluate_mapper(model, held_out)
        assert report["side_accuracy"] >= 0.95, report
        assert report["median_bin_error"] <= 2, report
        assert seconds <= 30 * 60


# -- 10: guided completion beats unguided on masked samples ---------------------------------


@pytest.fixture(scope="module")
def two_mode_prior():
    rng = np.random.default_rng(11)
    modes = np.where(rng.uniform(size=64) < 0.5, 0.6, -0.6)
    samples = modes[:, None, None, None] * np.ones((64, 8, 8, df.CHANNELS))
    schedule = df.Schedule.linear(T=50, beta_start=1e-3, beta_end=0.25)
    model = df.Denoiser(base=16, mults=(1, 2), blocks=1, emb_dim=32,
                        rng=np.random.default_rng(12))
    df.train_diffusion(model, schedule, samples, steps=3000, batch=8,
                       lr=2e-3, seed=13)
    return model, schedule, samples


class TestCriterion10GuidedCompletion:
    def test_error_reduction_over_twenty_paired_runs(self, two_mode_prior):
        model, schedule, samples = two_mode_prior
        rng = np.random.default_rng(14)
        errs_g, errs_u = [], []
        for seed in range(20):
            x0 = samples[seed % len(samples)]
            obs = (rng.uniform(size=(8, 8, 2)) < 0.5).astype(float)
            g = df.Guidance(sparse_map=x0[:, :, [0, 1, 2, 4, 5, 6]],
                            sparse_mask=obs, panel_mask=x0[:, :, [3, 7]],
                            rho=2.0)
            w = np.repeat(obs, 3, axis=2).astype(bool)
            xg = df.sample_chain(model, schedule, 8,
                                 np.random.default_rng(seed), guidance=g)
            xu = df.sample_chain(model, schedule, 8,
                                 np.random.default_rng(seed))
            ref = x0[:, :, [0, 1, 2, 4, 5, 6]]
            errs_g.append(np.abs((xg[:, :, [0, 1, 2, 4, 5, 6]] - ref)[w]).mean())
            errs_u.append(np.abs((xu[:, :, [0, 1, 2, 4, 5, 6]] - ref)[w]).mean())
        assert np.median(errs_g) <= 0.25 * np.median(errs_u), \
            (np.median(errs_g), np.median(errs_u))


# -- 11: end-to-end reconstruction beats both baselines --------------------------------------


E2E_R = 16


@pytest.fixture(scope="module")
def e2e_models(garment_bank, trained_isp):
    isp_model, _, _ = trained_isp
    rng = np.random.default_rng(20)
    samples, map_pairs = [], []
    for spec, garment, panels, _ in garment_bank[:2]:
        for _si in range(3):
            script = sy.make_fold_script(spec, rng)
            frames, _ = sy.build_sequence(garment, panels, script, n_frames=6,
                                          resolution=E2E_R, rng=rng,
                                          points_per_frame=400)
            for f in frames:
                samples.append(df.pack_sample(f.gt_pair))
                map_pairs.append((mp.PointCloudFrame(f.points),
                                  mp.PointTargets(f.sigma, f.k_u, f.k_v)))
    schedule = df.Schedule.linear(T=50, beta_start=1e-3, beta_end=0.25)
    denoiser = df.Denoiser(base=16, mults=(1, 2), blocks=1, emb_dim=32,
                           rng=np.random.default_rng(21))
    df.train_diffusion(denoiser, schedule, np.stack(samples), steps=2500,
                       batch=8, lr=2e-3, seed=22)
    mapper_model, _ = mp.train_mapper(map_pairs, k=E2E_R, steps=6000, seed=23)
    return rc.ReconModels(mapper_model=mapper_model, isp_model=isp_model,
                          denoiser=denoiser, schedule=schedule,
                          resolution=E2E_R)


@pytest.fixture(scope="module")
def e2e_results(garment_bank, e2e_models):
    """Reconstruct 10 held-out folding sequences and score all methods."""
    rng = np.random.default_rng(30)
    t0 = time.perf_counter()
    rows = []  # (d_pipeline, d_keyframe_baseline, d_previous_baseline, d_cr)
    for seq_i in range(10):
        spec, garment, panels, _ = garment_bank[seq_i % 2]
        script = sy.make_fold_script(spec, rng)
        frames, _ = sy.build_sequence(garment, panels, script, n_frames=3,
                                      resolution=E2E_R, rng=rng,
                                      points_per_frame=400)
        clouds = [f.points for f in frames]
        result = rc.reconstruct_sequence(clouds, e2e_models, seed=100 + seq_i,
                                         fit_steps=200)
        key = result.keyframe
        key_mesh = (result.frames[key].mesh_vertices,
                    result.frames[key].mesh_triangles)
        # baselines are full-mesh predictions: re-using the keyframe
        # reconstruction unchanged, and copying the previous frame's
        # reconstruction; frame 0 has no previous prediction, so only
        # later frames are scored
        for t in range(1, len(frames)):
            gt_mesh = (frames[t].deformed, garment.triangles)
            fr = result.frames[t]
            prev = result.frames[t - 1]
            d_pipe = mt.chamfer((fr.mesh_vertices, fr.mesh_triangles), gt_mesh,
                                samples=2000, seed=t)
            d_key = mt.chamfer(key_mesh, gt_mesh, samples=2000, seed=t)
            d_prev = mt.chamfer((prev.mesh_vertices, prev.mesh_triangles),
                                gt_mesh, samples=2000, seed=t)
            rows.append((d_pipe, d_key, d_prev))
    return np.array(rows), time.perf_counter() - t0


class TestCriterion11EndToEnd:
    def test_pipeline_beats_baselines_within_budget(self, e2e_results):
        rows, seconds = e2e_results
        med = np.median(rows, axis=0)
        assert med[0] < med[1], f"pipeline {med[0]:.3f} vs keyframe {med[1]:.3f}"
        assert med[0] < med[2], f"pipeline {med[0]:.3f} vs previous {med[2]:.3f}"
        assert seconds <= 30 * 60

    def test_threshold_ratio_monotone(self, e2e_results):
        rows, _ = e2e_results
        ratios = [mt.a_d(rows[:, 0], d) for d in (1.0, 3.0, 5.0, 10.0, 30.0)]
        assert all(b >= a for a, b in zip(ratios, ratios[1:]))


# -- 12: symmetric rotation yields high correspondence error, near-zero chamfer -------------


class TestCriterion12SymmetryArtifact:
    def test_quarter_turned_ring(self):
        n = 400
        theta = np.linspace(0, 2 * np.pi, n, endpoint=False)
        ring = np.stack([np.cos(theta), np.sin(theta), np.zeros(n)], axis=1)
        quarter = np.roll(ring, n // 4, axis=0)
        canon = ring.copy()
        d_cf = mt.chamfer(quarter, ring)
        d_cr = mt.correspondence_distance(quarter, canon, ring, canon)
        assert d_cf < 1e-9
        assert d_cr > 50.0  # a quarter turn of a 1-unit ring, in cm


# -- 13: chamfer oracle ----------------------------------------------------------------------


class TestCriterion13MetricsOracle:
    def test_accelerated_equals_brute_force(self):
        rng = np.random.default_rng(40)
        for n, m in ((10, 20), (100, 250), (500, 500)):
            q = rng.standard_normal((n, 3))
            p = rng.standard_normal((m, 3))
            fast = mt.nearest_distances(q, p)
            brute = mt.nearest_distances(q, p, brute_force=True)
            assert np.abs(fast - brute).max() <= 1e-9

    def test_self_distance_zero(self):
        pts = np.random.default_rng(41).standard_normal((300, 3))
        assert mt.chamfer(pts, pts) == 0.0

    def test_plane_offset_analytic(self):
        n = 25
        xs, ys = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
        v0 = np.stack([xs.ravel(), ys.ravel(), np.zeros(n * n)], axis=1)
        idx = np.arange(n * n).reshape(n, n)
        a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
        c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
        t = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
        v1 = v0.copy()
        v1[:, 2] = 0.015
        d_cf = mt.chamfer((v0, t), (v1, t), samples=5000)
        assert abs(d_cf - 1.5) < 0.02  # 0.015 units = 1.5 cm
