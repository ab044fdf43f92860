import math

import numpy as np
import pytest

from ctlio.bspline import KnotGrid
from ctlio.geometry import RigidTransform, log_so3_batch, rot_z
from ctlio.imu import HERMITE, ImuBias, ImuData, integrate
from ctlio.lidar import Correspondences, extract_features
from ctlio.solver import SolverOptions, solve
from ctlio.estimator import (EstimatorConfig, KeyScan, Odometry, build_submap, initialize_segment,
                             run_odometry, select_keyscan)
from ctlio.sim import SimConfig, World, ground_truth_trajectory, simulate, synthesize_imu
from ctlio.trajectory import Trajectory

CFG = EstimatorConfig()


def keyscan(i, t, x=0.0, yaw=0.0, n=4):
    pts = np.random.default_rng(i).normal(size=(n, 3))
    return KeyScan(i, t, RigidTransform(rot_z(yaw), [x, 0.0, 0.0]), pts[:1], pts[1:])


class TestSelectKeyscan:
    def test_bootstrap(self):
        assert select_keyscan(None, 0.0, RigidTransform.identity(), CFG)

    def test_same_pose_short_time(self):
        assert not select_keyscan(keyscan(0, 1.0), 1.1, RigidTransform.identity(), CFG)

    def test_translation_gate(self):
        pose = RigidTransform(np.eye(3), [0.3, 0.0, 0.0])
        assert select_keyscan(keyscan(0, 1.0), 1.1, pose, CFG)

    def test_rotation_gate(self):
        assert select_keyscan(keyscan(0, 1.0), 1.1, RigidTransform(rot_z(math.radians(12)), np.zeros(3)), CFG)
        assert not select_keyscan(keyscan(0, 1.0), 1.1, RigidTransform(rot_z(math.radians(8)), np.zeros(3)), CFG)

    def test_time_gate(self):
        assert select_keyscan(keyscan(0, 1.0), 2.05, RigidTransform.identity(), CFG)


class TestBuildSubmap:
    ext = RigidTransform.identity()

    def test_few_keyscans_all_included(self):
        ks = [keyscan(i, i * 0.1) for i in range(3)]
        assert build_submap(ks, np.zeros(3), self.ext, CFG).keyscan_ids == [0, 1, 2]

    def test_keeps_last_n_when_far_apart(self):
        ks = [keyscan(i, i * 0.1, x=100.0 * i) for i in range(15)]
        sub = build_submap(ks, np.array([1400.0, 0, 0]), self.ext, CFG)
        assert sub.keyscan_ids == list(range(5, 15))
        assert len(sub.planar_points) == 10 * 3 and len(sub.edge_points) == 10

    def test_revisited_keyscan_is_included(self):
        ks = [keyscan(i, i * 0.1, x=100.0 * i) for i in range(14)] + [keyscan(14, 1.4, x=5.0)]
        sub = build_submap(ks, np.array([5.0, 0, 0]), self.ext, CFG)
        assert sub.keyscan_ids == [0] + list(range(5, 15))

    def test_points_are_moved_to_global_frame(self):
        k = keyscan(0, 0.0, x=2.0, yaw=0.5)
        ext = RigidTransform(rot_z(0.1), [0.1, 0, 0])
        sub = build_submap([k], np.zeros(3), ext, CFG)
        np.testing.assert_allclose(sub.planar_points, (k.pose @ ext).apply(k.planar_points))

    def test_empty(self):
        assert len(build_submap([], np.zeros(3), self.ext, CFG)) == 0


class TestInitializeSegment:
    @pytest.fixture(scope="class")
    @classmethod
    def truth(cls):
        cfg = SimConfig(motion="loop").noise_free()
        traj = ground_truth_trajectory(cfg)
        return traj, synthesize_imu(cfg, traj)

    @pytest.mark.parametrize("n", [30, 40, 55])
    def test_recovers_ground_truth(self, truth, n):
        gt, imu = truth
        tr = Trajectory(gt.grid, gt.rotations[:n], gt.positions[:n])
        t_prev = tr.interval[1]
        new = tr.extend_to(t_prev + gt.grid.dt)
        initialize_segment(tr, imu, ImuBias(), new, t_prev)
        assert np.abs(tr.positions[new] - gt.positions[new]).max() < 1e-6
        dR = np.swapaxes(gt.rotations[new], -1, -2) @ tr.rotations[new]
        assert np.linalg.norm(log_so3_batch(dR), axis=1).max() < 1e-6

    def test_only_new_points_move(self, truth):
        gt, imu = truth
        tr = Trajectory(gt.grid, gt.rotations[:40], gt.positions[:40])
        R_old, p_old = tr.rotations.copy(), tr.positions.copy()
        t_prev = tr.interval[1]
        new = tr.extend_to(t_prev + 2 * gt.grid.dt)
        initialize_segment(tr, imu, ImuBias(), new, t_prev)
        np.testing.assert_array_equal(tr.rotations[:40], R_old)
        np.testing.assert_array_equal(tr.positions[:40], p_old)

    def test_stationary_keeps_last_pose(self):
        pose = RigidTransform(rot_z(0.4), [1.0, 2.0, 0.5])
        tr = Trajectory.constant(KnotGrid(0.0, 0.05), pose, 6)
        t = np.arange(0, 0.5, 0.0025)
        imu = ImuData(t, np.zeros((len(t), 3)), np.tile([0, 0, 9.81], (len(t), 1)))
        t_prev = tr.interval[1]
        new = tr.extend_to(t_prev + 0.1)
        initialize_segment(tr, imu, ImuBias(), new, t_prev)
        np.testing.assert_allclose(tr.positions[new], np.tile(pose.translation, (2, 1)), atol=1e-9)
        np.testing.assert_allclose(tr.rotations[new], np.tile(pose.rotation, (2, 1, 1)), atol=1e-9)

    def test_empty_stream_keeps_seed(self):
        tr = Trajectory.constant(KnotGrid(0.0, 0.05), RigidTransform(rot_z(0.2), [1, 0, 0]), 5)
        t_prev = tr.interval[1]
        new = tr.extend_to(t_prev + 0.05)
        before = tr.positions.copy(), tr.rotations.copy()
        imu = ImuData(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
        rep = initialize_segment(tr, imu, ImuBias(), new, t_prev)
        assert rep.termination == "no_imu"
        np.testing.assert_array_equal(tr.positions, before[0])
        np.testing.assert_array_equal(tr.rotations, before[1])


@pytest.fixture(scope="module")
def short_run():
    cfg = SimConfig(motion="loop", n_scans=5).noise_free()
    run = simulate(cfg)
    odo = Odometry(EstimatorConfig(), cfg.extrinsics(), run.imu, run.scans[0].scan.t_start)
    snapshots, reports = [], []
    for n, s in enumerate(run.scans):
        before = odo.trajectory.rotations.copy(), odo.trajectory.positions.copy()
        reports.append(odo.process_scan(s.scan, n))
        snapshots.append((before, s.scan))
    return run, odo, reports, snapshots


class TestOdometry:
    def test_first_scan_is_keyscan_zero(self, short_run):
        run, odo, reports, _ = short_run
        assert reports[0].keyscan and reports[0].n_corr == 0
        k0 = odo.keyscans[0]
        assert k0.id == 0 and k0.t == run.scans[0].scan.t_start
        np.testing.assert_allclose(k0.pose.translation, 0, atol=1e-12)

    def test_tracks_ground_truth(self, short_run):
        run, odo, reports, _ = short_run
        assert all(r.n_corr > 50 and not r.degenerate for r in reports[1:])
        t = np.linspace(run.scans[0].scan.t_start, run.scans[-1].scan.t_start + 0.1, 101)
        err = odo.trajectory.evaluate(t).p - run.trajectory.evaluate(t).p
        assert np.abs(err).max() < 1e-2

    def test_earlier_control_points_are_untouched(self, short_run):
        run, odo, _, snapshots = short_run
        for (R0, p0), scan in snapshots[1:]:
            first_active = odo.trajectory.window_for(scan.t_start, scan.t_start + scan.period).active_ids[0]
            np.testing.assert_array_equal(odo.trajectory.rotations[:first_active], R0[:first_active])
            np.testing.assert_array_equal(odo.trajectory.positions[:first_active], p0[:first_active])

    def test_cost_never_increases(self, short_run):
        for r in short_run[2][1:]:
            for rep in r.solve_reports:
                costs = rep.accepted_costs
                assert all(b <= a for a, b in zip(costs, costs[1:]))

    def test_bias_history(self, short_run):
        run, odo, *_ = short_run
        assert len(odo.bias_history) == 5
        assert odo.bias_at(0.0) is odo.bias_history[0][1]
        assert odo.bias_at(run.scans[2].scan.t_start + 0.01) is odo.bias_history[2][1]

    def test_scan_before_trajectory_rejected(self, short_run):
        run, odo, *_ = short_run
        with pytest.raises(ValueError):
            odo.process_scan(run.scans[0].scan.__class__(0.5, 0.1, [0.0], [[1, 0, 0]], [0]))


def test_zero_noise_cost_at_ground_truth_vanishes():
    # correspondences come from the simulator's plane ids, so only the model is tested
    cfg = SimConfig(motion="loop", n_scans=4).noise_free()
    run = simulate(cfg)
    t1 = run.scans[0].scan.t_start
    odo = Odometry(EstimatorConfig(), cfg.extrinsics(), run.imu, t1)
    g = run.trajectory.grid
    first = int(round((t1 - g.t0) / g.dt))
    scan = run.scans[3]
    t_end = scan.scan.t_start + scan.scan.period
    n = int(round((t_end - t1) / g.dt)) + g.order - 1
    odo.trajectory = Trajectory(KnotGrid(t1, g.dt), run.trajectory.rotations[first:first + n],
                                run.trajectory.positions[first:first + n])
    window = odo.trajectory.window_for(scan.scan.t_start, t_end)
    f = extract_features(scan.scan)
    normals, offsets = run.world.planes()
    ids = scan.plane_ids[f.index]
    m = len(f)
    corr = Correspondences(f.tau, f.xyz, np.ones(m, bool), normals[ids], offsets[ids],
                           np.zeros((m, 3)))
    imu = run.imu.between(odo.trajectory.grid.knot(window.static_ids[0]), t_end)
    problem = odo._registration_problem(corr, scan.scan.t_start, window, imu, ImuBias())
    assert problem.cost() < 1e-12
    rep = solve(problem, SolverOptions(max_iter=10))
    assert rep.final_cost < 1e-12 and rep.iterations <= 1


def test_featureless_world_follows_imu():
    cfg = SimConfig(motion="loop", n_scans=4).noise_free()
    run = simulate(cfg, World([]))
    odo, reports = run_odometry(EstimatorConfig(), cfg.extrinsics(), run.imu,
                                [s.scan for s in run.scans])
    assert all(r.degenerate and r.n_corr == 0 for r in reports[1:])
    t0 = run.scans[0].scan.t_start
    s = odo.trajectory.evaluate(t0, derivatives=True)
    imu = run.imu.between(t0, odo.trajectory.interval[1])
    g = odo.trajectory.grid
    knots = g.knot(np.arange(odo.trajectory.n_control - g.order + 2))
    dead = integrate(imu, s.R, s.p, s.v, t0, odo.bias, scheme=HERMITE, breaks=knots)
    est = odo.trajectory.evaluate(imu.t)
    assert np.abs(est.p - dead.p).max() < 1e-4


def test_finalize_promotes_last_scan():
    cfg = SimConfig(motion="static", n_scans=3).noise_free()
    run = simulate(cfg)
    odo, reports = run_odometry(EstimatorConfig(), cfg.extrinsics(), run.imu,
                                [s.scan for s in run.scans], finalize=False)
    assert [k.id for k in odo.keyscans] == [0]
    odo.finalize()
    odo.finalize()
    assert [k.id for k in odo.keyscans] == [0, 2]


@pytest.mark.parametrize("field,value", [("knot_dt", 0.0), ("sigma_lidar", -1.0),
                                         ("submap_size", 0), ("association_rounds", 0)])
def test_config_validation(field, value):
    with pytest.raises(ValueError):
        EstimatorConfig(**{field: value})


def test_run_odometry_needs_scans():
    with pytest.raises(ValueError):
        run_odometry(CFG, RigidTransform.identity(), ImuData([0.0], [[0, 0, 0]], [[0, 0, 9.81]]), [])
