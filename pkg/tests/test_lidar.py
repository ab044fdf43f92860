import numpy as np
import pytest

from ctlio.bspline import KnotGrid
from ctlio.geometry import RigidTransform, exp_so3, rot_z
from ctlio.lidar import (Correspondences, Features, Scan, Submap, associate, extract_features,
                         lidar_residual, read_scan_index, ring_curvature, undistort_points,
                         undistort_scan, write_ply, write_scan_index)
from ctlio.sim import Patch, SimConfig, World, ground_truth_trajectory, raycast, ray_directions, \
    simulate, synthesize_scan
from ctlio.trajectory import Trajectory


def still(pose=None, n=8, dt=0.05):
    return Trajectory.constant(KnotGrid(0.0, dt), pose or RigidTransform.identity(), n)


def world_scan(patches, traj=None, **kw):
    cfg = SimConfig(sigma_range=0.0, **kw)
    traj = traj or still()
    return synthesize_scan(cfg, World(patches), traj, 0.0)


WALL = Patch((5.0, -50.0, -50.0), (0.0, 100.0, 0.0), (0.0, 0.0, 100.0), 0)
CORNER = [Patch((4.0, -20.0, -5.0), (0.0, 24.0, 0.0), (0.0, 0.0, 10.0), 0),
          Patch((-20.0, 4.0, -5.0), (0.0, 0.0, 10.0), (24.0, 0.0, 0.0), 1)]


def plane_corr(points, normal, d):
    n = len(points)
    return Correspondences(np.zeros(n), np.asarray(points, float), np.ones(n, bool),
                           np.tile(normal, (n, 1)), np.full(n, d), np.zeros((n, 3)))


def line_corr(points, anchor, direction):
    n = len(points)
    return Correspondences(np.zeros(n), np.asarray(points, float), np.zeros(n, bool),
                           np.tile(direction, (n, 1)), np.zeros(n), np.tile(anchor, (n, 1)))


class TestCurvature:
    def test_collinear_ring_is_flat(self):
        xyz = np.c_[np.full(40, 5.0), np.linspace(-2, 2, 40), np.zeros(40)]
        c = ring_curvature(xyz)
        assert np.all(np.isnan(c[:5])) and np.all(np.isnan(c[-5:]))
        np.testing.assert_allclose(c[5:-5], 0, atol=1e-15)

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(0)
        xyz = rng.normal(size=(30, 3)) + [5, 0, 0]
        c = ring_curvature(xyz)
        j = 12
        nb = np.r_[xyz[j - 5:j], xyz[j + 1:j + 6]]
        want = np.linalg.norm((nb - xyz[j]).sum(axis=0)) / (10 * np.linalg.norm(xyz[j]))
        assert c[j] == pytest.approx(want, rel=1e-12)

    def test_short_ring_is_all_nan(self):
        assert np.all(np.isnan(ring_curvature(np.ones((10, 3)))))


class TestFeatures:
    def test_single_plane_has_no_edges(self):
        f = extract_features(world_scan([WALL]).scan)
        assert len(f.planars) > 50
        assert len(f.edges) == 0

    def test_collinear_single_ring_is_planar(self):
        n = 60
        xyz = np.c_[np.full(n, 5.0), np.linspace(-3, 3, n), np.zeros(n)]
        f = extract_features(Scan(0.0, 0.1, np.arange(n) * 1e-4, xyz, np.zeros(n, int)))
        assert len(f) > 0 and not f.is_edge.any()

    def test_corner_edges_lie_on_corner_line(self):
        f = extract_features(world_scan(CORNER).scan)
        edges = f.edges
        assert len(edges) > 0
        # distance to the vertical line x=y=4, allowing a few beam spacings
        dist = np.hypot(edges.xyz[:, 0] - 4.0, edges.xyz[:, 1] - 4.0)
        assert np.all(dist < 0.4)

    def test_short_rings_are_reported(self):
        xyz = np.c_[np.full(5, 5.0), np.arange(5.0), np.zeros(5)]
        f = extract_features(Scan(0.0, 0.1, np.arange(5) * 1e-3, xyz, np.full(5, 3)))
        assert len(f) == 0 and f.skipped_rings == [3]


class TestUndistort:
    def test_constant_trajectory_is_identity(self):
        pose = RigidTransform(exp_so3([0.1, -0.2, 0.3]), [1.0, 2.0, 3.0])
        ext = RigidTransform(rot_z(0.05), [0.05, 0.0, 0.1])
        xyz = np.random.default_rng(0).normal(size=(20, 3))
        out = undistort_points(still(pose), ext, 0.1, np.linspace(0, 0.09, 20), xyz)
        np.testing.assert_allclose(out, xyz, atol=1e-13)

    def test_zero_tau_is_unchanged(self):
        traj = ground_truth_trajectory(SimConfig(motion="spin"))
        ext = SimConfig().extrinsics()
        xyz = np.array([[3.0, 1.0, -0.5], [-2.0, 4.0, 0.2]])
        out = undistort_points(traj, ext, 1.3, np.zeros(2), xyz)
        np.testing.assert_allclose(out, xyz, atol=1e-13)

    @pytest.mark.parametrize("sigma", [0.0, 0.02])
    def test_spin_points_land_on_their_planes(self, sigma):
        cfg = SimConfig(motion="spin", n_scans=6, sigma_range=sigma)
        run = simulate(cfg)
        normals, offsets = run.world.planes()
        ext = cfg.extrinsics()
        for s in run.scans[3:5]:
            pts = undistort_scan(s.scan, run.trajectory, ext)
            xg = run.trajectory.lidar_pose_at(ext, s.scan.t_start).apply(pts)
            dist = np.abs(np.einsum("ni,ni->n", normals[s.plane_ids], xg) + offsets[s.plane_ids])
            # a range error moves the point along its ray, at most |noise| off the plane
            assert np.all(dist <= 1e-9 + np.abs(s.range_noise))

    def test_spin_distortion_is_significant_without_correction(self):
        cfg = SimConfig(motion="spin", n_scans=6, sigma_range=0.0)
        run = simulate(cfg)
        normals, offsets = run.world.planes()
        s = run.scans[4]
        xg = run.trajectory.lidar_pose_at(cfg.extrinsics(), s.scan.t_start).apply(s.scan.xyz)
        dist = np.abs(np.einsum("ni,ni->n", normals[s.plane_ids], xg) + offsets[s.plane_ids])
        assert dist.max() > 0.1


class TestResidual:
    def test_plane_example(self):
        r = lidar_residual(plane_corr([[1, 2, 3]], [0, 0, 1], 0.0), still(), RigidTransform.identity(), 0.0)
        np.testing.assert_allclose(r, [3.0])

    def test_line_example(self):
        r = lidar_residual(line_corr([[5, 0, 2]], [0, 0, 0], [1, 0, 0]), still(), RigidTransform.identity(), 0.0)
        np.testing.assert_allclose(r, [2.0])

    def test_point_placed_on_plane_by_pose(self):
        pose = RigidTransform(exp_so3([0.3, 0.2, -0.1]), [1.0, -1.0, 0.5])
        target = np.array([[2.0, 0.7, 1.5]])  # on plane x = 2
        local = pose.inverse().apply(target)
        r = lidar_residual(plane_corr(local, [1, 0, 0], -2.0), still(pose), RigidTransform.identity(), 0.0)
        np.testing.assert_allclose(r, 0, atol=1e-14)

    def test_plane_sign_invariance(self):
        pts = np.random.default_rng(2).normal(size=(10, 3))
        n = np.array([1.0, 2.0, 2.0]) / 3.0
        a = lidar_residual(plane_corr(pts, n, 0.4), still(), RigidTransform.identity(), 0.0)
        b = lidar_residual(plane_corr(pts, -n, -0.4), still(), RigidTransform.identity(), 0.0)
        np.testing.assert_allclose(np.abs(a), np.abs(b), atol=1e-15)

    def test_uses_each_point_timestamp(self):
        traj = ground_truth_trajectory(SimConfig(motion="spin"))
        c = plane_corr([[3.0, 0.0, 0.0]] * 2, [0, 1, 0], 0.0)
        c.tau = np.array([0.0, 0.05])
        r = lidar_residual(c, traj, RigidTransform.identity(), 1.5)
        assert abs(r[0] - r[1]) > 0.05


def grid_plane(normal, d, n=7, spacing=0.2, center=None):
    normal = np.asarray(normal, float)
    u = np.cross(normal, [0, 0, 1] if abs(normal[2]) < 0.9 else [1, 0, 0])
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    c = -d * normal if center is None else np.asarray(center, float)
    a, b = np.meshgrid(np.arange(n) - n // 2, np.arange(n) - n // 2)
    return c + spacing * (a.reshape(-1, 1) * u + b.reshape(-1, 1) * v)


def features(xyz, edge=False):
    xyz = np.asarray(xyz, float).reshape(-1, 3)
    n = len(xyz)
    return Features(np.zeros(n), xyz, np.zeros(n), np.full(n, edge), np.arange(n))


class TestAssociate:
    def test_point_on_plane_has_zero_residual(self):
        submap = Submap(np.zeros((0, 3)), grid_plane([0, 0, 1], 1.0))
        c = associate(features([[0.1, 0.05, -1.0]]), submap, still(), RigidTransform.identity(), 0.0)
        assert len(c) == 1
        np.testing.assert_allclose(abs(c.direction[0] @ [0, 0, 1]), 1.0, atol=1e-12)
        np.testing.assert_allclose(lidar_residual(c, still(), RigidTransform.identity(), 0.0), 0,
                                   atol=1e-12)

    def test_far_point_is_rejected(self):
        submap = Submap(np.zeros((0, 3)), grid_plane([0, 0, 1], 0.0, n=3, spacing=0.1))
        c = associate(features([[0.0, 0.0, 1.5]]), submap, still(), RigidTransform.identity(), 0.0)
        assert len(c) == 0

    def test_edge_to_line(self):
        line = np.c_[np.zeros(9), np.zeros(9), np.linspace(-0.4, 0.4, 9)]
        submap = Submap(line, np.zeros((0, 3)))
        c = associate(features([[0.05, 0.0, 0.1]], edge=True), submap, still(),
                      RigidTransform.identity(), 0.0)
        assert len(c) == 1
        np.testing.assert_allclose(abs(c.direction[0][2]), 1.0, atol=1e-12)
        np.testing.assert_allclose(lidar_residual(c, still(), RigidTransform.identity(), 0.0),
                                   [0.05], atol=1e-12)

    def test_bent_neighbourhood_is_rejected(self):
        # three neighbours on x=0 and two on y=0, well away from the fold line
        pts = 2 * np.array([[0, 0.3, -0.1], [0, 0.3, 0.1], [0, 0.45, 0], [0.3, 0, -0.1],
                            [0.3, 0, 0.1]])
        submap = Submap(np.zeros((0, 3)), pts)
        c = associate(features([[0.3, 0.3, 0.0]]), submap, still(), RigidTransform.identity(), 0.0)
        assert len(c) == 0

    def test_empty_submap(self):
        c = associate(features([[0, 0, 0]]), Submap(np.zeros((0, 3)), np.zeros((0, 3))), still(),
                      RigidTransform.identity(), 0.0)
        assert len(c) == 0

    def test_corner_scene_planes_are_correct(self):
        # floor plus two walls meeting at a corner, noise free
        world = World([Patch((3.0, -6.0, -0.8), (0.0, 9.0, 0.0), (0.0, 0.0, 3.0), 0),
                       Patch((-6.0, 3.0, -0.8), (0.0, 0.0, 3.0), (9.0, 0.0, 0.0), 1),
                       Patch((-6.0, -6.0, -0.8), (9.0, 0.0, 0.0), (0.0, 9.0, 0.0), 2)])
        cfg = SimConfig(motion="loop", n_scans=4).noise_free()
        run = simulate(cfg, world)
        ext = cfg.extrinsics()
        normals, _ = world.planes()
        maps = []
        for s in run.scans[:2]:
            f = extract_features(s.scan).planars
            maps.append(run.trajectory.lidar_pose_at(ext, s.scan.t_start).apply(
                undistort_points(run.trajectory, ext, s.scan.t_start, f.tau, f.xyz)))
        submap = Submap(np.zeros((0, 3)), np.vstack(maps))
        s = run.scans[3]
        f = extract_features(s.scan).planars
        c = associate(f, submap, run.trajectory, ext, s.scan.t_start)
        key = {(t, *x): n for n, (t, x) in enumerate(zip(f.tau, map(tuple, f.xyz)))}
        which = np.array([key[(t, *x)] for t, x in zip(c.tau, map(tuple, c.xyz))])
        true_n = normals[s.plane_ids[f.index[which]]]
        cosang = np.abs(np.einsum("ni,ni->n", c.direction, true_n))
        assert np.mean(cosang >= np.cos(np.radians(5))) >= 0.9
        # neighbourhoods lying along a single ring are refused as ambiguous
        assert len(c) >= 0.7 * len(f)

    def test_is_deterministic(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(500, 3))
        submap = Submap(pts[:200], pts[200:])
        f = features(rng.normal(size=(50, 3)))
        f.is_edge[:20] = True
        a = associate(f, submap, still(), RigidTransform.identity(), 0.0)
        b = associate(f, Submap(pts[:200], pts[200:]), still(), RigidTransform.identity(), 0.0)
        for name in ("tau", "xyz", "direction", "offset", "anchor"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_scan_csv_roundtrip(tmp_path):
    s = world_scan([WALL]).scan
    s.write_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "tau,x,y,z,ring"
    back = Scan.read_csv(tmp_path / "s.csv", s.t_start, s.period)
    np.testing.assert_array_equal(back.xyz, s.xyz)
    np.testing.assert_array_equal(back.ring, s.ring)


def test_scan_index_roundtrip(tmp_path):
    entries = [(1.0, 0.1, "scans/a.csv"), (1.1, 0.1, "scans/b.csv")]
    write_scan_index(tmp_path / "index.csv", entries)
    assert read_scan_index(tmp_path / "index.csv") == entries


def test_ply_header(tmp_path):
    write_ply(tmp_path / "m.ply", np.eye(3))
    lines = (tmp_path / "m.ply").read_text().splitlines()
    assert lines[:3] == ["ply", "format ascii 1.0", "element vertex 3"]
    assert "end_header" in lines and len(lines) == 8 + 3
