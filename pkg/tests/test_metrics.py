import json

import numpy as np
import pytest

from uvgarment import metrics


def grid_mesh(n=10, w=1.0, h=1.0, z=0.0):
    xs, ys = np.linspace(0, w, n), np.linspace(0, h, n)
    gx, gy = np.meshgrid(xs, ys)
    v = np.stack([gx.ravel(), gy.ravel(), np.full(n * n, z)], axis=1)
    tris = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = i * n + j, i * n + j + 1, (i + 1) * n + j, (i + 1) * n + j + 1
            tris += [(a, b, d), (a, d, c)]
    return v, np.array(tris)


class TestChamfer:
    def test_identical_mesh_is_zero(self):
        mesh = grid_mesh()
        assert metrics.chamfer(mesh, mesh, samples=2000) < 1e-6

    def test_identical_points_zero(self):
        pts = np.random.default_rng(0).normal(size=(300, 3))
        assert metrics.chamfer(pts, pts) == 0.0

    def test_plane_offset_is_analytic(self):
        # planes 0.01 world units apart = 1 cm at the default scale
        a = grid_mesh(z=0.0)
        b = grid_mesh(z=0.01)
        d = metrics.chamfer(a, b, samples=5000)
        assert abs(d - 1.0) < 0.02

    def test_one_directional_by_default(self):
        # small patch vs large plane: patch-to-plane is ~0 but not vice versa
        patch = grid_mesh(n=5, w=0.2, h=0.2)
        plane = grid_mesh(n=20, w=1.0, h=1.0)
        one = metrics.chamfer(patch, plane, samples=3000)
        sym = metrics.chamfer(patch, plane, samples=3000, symmetric=True)
        assert one < 0.2
        assert sym > 5 * one

    def test_accelerated_matches_brute_force(self):
        rng = np.random.default_rng(1)
        q = rng.normal(size=(400, 3))
        t = rng.normal(size=(500, 3))
        fast = metrics.nearest_distances(q, t)
        slow = metrics.nearest_distances(q, t, brute_force=True)
        assert np.max(np.abs(fast - slow)) < 1e-9

    def test_empty_mesh_rejected(self):
        with pytest.raises(ValueError):
            metrics.chamfer(np.zeros((0, 3)), np.zeros((5, 3)))
        with pytest.raises(ValueError):
            metrics.chamfer((np.zeros((0, 3)), np.zeros((0, 3), int)),
                            grid_mesh())


class TestCorrespondenceDistance:
    def test_identity_is_zero(self):
        rng = np.random.default_rng(2)
        pos = rng.normal(size=(200, 3))
        canon = rng.normal(size=(200, 3))
        assert metrics.correspondence_distance(pos, canon, pos, canon) == 0.0

    def test_rigid_translation(self):
        rng = np.random.default_rng(3)
        pos = rng.normal(size=(200, 3))
        canon = rng.normal(size=(200, 3))
        moved = pos + np.array([0.03, 0.0, 0.0])  # 3 cm at default scale
        d = metrics.correspondence_distance(moved, canon, pos, canon)
        assert np.isclose(d, 3.0)

    def test_symmetry_artifact_high_dcr_low_dcf(self):
        # ring of points: rotating by one symmetry step leaves the surface in
        # place but moves every material point
        n = 120
        th = np.linspace(0, 2 * np.pi, n, endpoint=False)
        gt = np.stack([np.cos(th), np.sin(th), np.zeros(n)], axis=1)
        canon = np.stack([th, np.zeros(n), np.zeros(n)], axis=1)
        shift = np.roll(np.arange(n), n // 4)
        recon = gt[shift]
        d_cf = metrics.chamfer(recon, gt)
        d_cr = metrics.correspondence_distance(recon, canon, gt, canon)
        assert d_cf < 1e-9
        assert d_cr > 50.0  # quarter-turn of a unit ring, in cm

    def test_missing_canonical_rejected(self):
        pos = np.zeros((5, 3))
        with pytest.raises(ValueError):
            metrics.correspondence_distance(pos, np.zeros((4, 3)), pos, pos)


class TestThresholdRatio:
    def test_all_below(self):
        assert metrics.a_d([1.0, 2.0], 5.0) == 1.0

    def test_direct_count(self):
        assert np.isclose(metrics.a_d([2.0, 4.0, 6.0], 5.0), 2 / 3)

    def test_strictly_below(self):
        assert metrics.a_d([5.0], 5.0) == 0.0

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(4)
        vals = rng.uniform(0, 10, 50)
        assert metrics.a_d(vals, 3.0) <= metrics.a_d(vals, 5.0)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            metrics.a_d([], 3.0)
        with pytest.raises(ValueError):
            metrics.a_d([1.0], 0.0)


class TestReport:
    def test_summary_and_files(self, tmp_path):
        rep = metrics.MetricReport(d_cf=[0.5, 1.5], d_cr=[2.0, 4.0],
                                   thresholds=(3.0, 5.0))
        s = rep.summary()
        assert s["frames"] == 2 and s["a_3"] == 0.5 and s["a_5"] == 1.0
        rep.write_csv(tmp_path / "frames.csv")
        rep.write_json(tmp_path / "summary.json")
        got = json.loads((tmp_path / "summary.json").read_text())
        assert got["d_cf_median"] == 1.0
        lines = (tmp_path / "frames.csv").read_text().strip().splitlines()
        assert len(lines) == 3 and lines[0].startswith("frame,")

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            metrics.MetricReport(d_cf=[1.0], d_cr=[1.0, 2.0])
