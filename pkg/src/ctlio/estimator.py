"""Sliding-window continuous-time LiDAR-inertial odometry.

Each scan extends the spline, seeds the new control points from integrated
IMU states, then alternates feature association and a joint LiDAR/IMU solve
in which only the control points of the scan's own time span (plus biases)
move. Control points whose basis overlaps that span from the past are held
fixed.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .bspline import KnotGrid
from .geometry import RigidTransform, log_so3, log_so3_batch, rot_x, rot_y, rot_z
from .imu import (ACCEL_BIAS_BOUND, GRAVITY, GYRO_BIAS_BOUND, HERMITE, ImuBias, ImuData,
                  IntegratedStates, gravity_alignment, integrate, predicted_accel)
from .lidar import (AssociationConfig, Correspondences, FeatureConfig, Features, Scan, Submap,
                    associate, extract_features, project_residual, undistort_points)
from .solver import Huber, Problem, SolveReport, SolverOptions, solve
from .trajectory import SegmentBasis, Trajectory, group_by_segment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimatorConfig:
    knot_dt: float = 0.05
    sigma_lidar: float = 0.05
    sigma_accel: float = 0.05
    sigma_gyro: float = 0.005
    huber_delta: float = 0.1
    bias_prior_factor: float = 10.0
    keyscan_trans_thresh: float = 0.2
    keyscan_rot_thresh: float = math.radians(10.0)
    keyscan_time_thresh: float = 1.0
    submap_size: int = 10
    submap_radius: float = 20.0
    association_rounds: int = 3
    max_iter: int = 10
    init_max_iter: int = 20
    gravity_window: float = 1.0
    edge_threshold: float = 0.02
    planar_threshold: float = 0.005
    max_edge_per_sector: int = 2
    max_planar_per_sector: int = 6
    rigid: bool = False

    def __post_init__(self):
        for name in ("knot_dt", "sigma_lidar", "sigma_accel", "sigma_gyro", "huber_delta",
                     "keyscan_trans_thresh", "keyscan_rot_thresh", "keyscan_time_thresh",
                     "submap_radius", "gravity_window"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.submap_size < 1 or self.association_rounds < 1:
            raise ValueError("submap_size and association_rounds must be positive")

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(edge_threshold=self.edge_threshold,
                             planar_threshold=self.planar_threshold,
                             max_edge_per_sector=self.max_edge_per_sector,
                             max_planar_per_sector=self.max_planar_per_sector)


@dataclass
class KeyScan:
    id: int
    t: float
    pose: RigidTransform
    edge_points: np.ndarray
    planar_points: np.ndarray


@dataclass
class ScanReport:
    scan_id: int
    cost_init: float
    cost_final: float
    n_corr: int
    keyscan: bool
    degenerate: bool
    ms: float
    init_report: SolveReport | None = None
    solve_reports: list = field(default_factory=list)


# --- problem construction --------------------------------------------------

def add_control_blocks(problem: Problem, traj: Trajectory, ids, free) -> None:
    free = set(free)
    for i in ids:
        if ("R", i) in problem.blocks:
            continue
        problem.add_parameter_block(("R", i), traj.rotations[i], "so3", fixed=i not in free)
        problem.add_parameter_block(("p", i), traj.positions[i], "euclidean", fixed=i not in free)


def control_block_ids(ids) -> list:
    return [("R", i) for i in ids] + [("p", i) for i in ids]


def write_back(problem: Problem, traj: Trajectory, ids) -> None:
    for i in ids:
        traj.rotations[i] = problem.value(("R", i))
        traj.positions[i] = problem.value(("p", i))


def initialize_segment(traj: Trajectory, imu: ImuData, bias: ImuBias, new_ids, t_from: float,
                       gravity=GRAVITY, max_iter: int = 20) -> SolveReport:
    """Fit the new control points to IMU-integrated states (rotation, position, velocity).

    Integration starts from the spline state at ``t_from``; all other control
    points stay fixed. Without samples the seed is kept and the report says so.
    """
    t_to = traj.interval[1]
    # start at the last sample not after t_from so every step has both endpoints
    before = imu.t[(imu.t <= t_from) & (imu.t >= traj.interval[0])]
    t_start = before[-1] if len(before) else t_from
    samples = imu.between(t_start, t_to)
    if not new_ids or not np.any(samples.t > t_from):
        return SolveReport(0, 0.0, 0.0, "no_imu" if new_ids else "converged", 0.0)
    st = traj.evaluate(t_start, derivatives=True)
    g = traj.grid
    knots = g.knot(np.arange(traj.n_control - g.order + 2))
    states = integrate(samples, st.R, st.p, st.v, t_start, bias, gravity, HERMITE, knots)
    keep = states.t > t_from
    states = IntegratedStates(states.t[keep], states.R[keep], states.p[keep], states.v[keep])

    problem = Problem()
    groups = group_by_segment(traj, states.t)
    for seg, idx in groups.items():
        basis = SegmentBasis(traj.grid, seg, states.t[idx])
        add_control_blocks(problem, traj, basis.ids, new_ids)
        Rm, pm, vm = states.R[idx], states.p[idx], states.v[idx]

        def fn(vals, basis=basis, Rm=Rm, pm=pm, vm=vm):
            k = len(basis.ids)
            R, _ = basis.rotation(vals[:k])
            Ps = vals[k:]
            r_rot = log_so3_batch(np.swapaxes(Rm, -1, -2) @ R)
            return np.concatenate([r_rot.ravel(), (basis.position(Ps) - pm).ravel(),
                                   (basis.velocity(Ps) - vm).ravel()])

        problem.add_residual_block(fn, control_block_ids(basis.ids), name=f"init:{seg}")
    report = solve(problem, SolverOptions(max_iter=max_iter, cost_tol=1e-12))
    write_back(problem, traj, new_ids)
    return report


def select_keyscan(last: KeyScan | None, t: float, pose: RigidTransform,
                   cfg: EstimatorConfig) -> bool:
    if last is None:
        return True
    rel = last.pose.inverse() @ pose
    return bool(np.linalg.norm(rel.translation) > cfg.keyscan_trans_thresh
                or np.linalg.norm(log_so3(rel.rotation)) > cfg.keyscan_rot_thresh
                or t - last.t > cfg.keyscan_time_thresh)


def build_submap(keyscans: list, position, ext: RigidTransform,
                 cfg: EstimatorConfig) -> Submap:
    """Most recent ``submap_size`` key-scans plus any within ``submap_radius``."""
    if not keyscans:
        return Submap(np.zeros((0, 3)), np.zeros((0, 3)))
    recent = set(range(max(0, len(keyscans) - cfg.submap_size), len(keyscans)))
    near = {n for n, ks in enumerate(keyscans)
            if np.linalg.norm(ks.pose.translation - position) <= cfg.submap_radius}
    chosen = sorted(recent | near)
    edges, planars = [], []
    for n in chosen:
        T = keyscans[n].pose @ ext
        edges.append(T.apply(keyscans[n].edge_points))
        planars.append(T.apply(keyscans[n].planar_points))
    return Submap(np.vstack(edges), np.vstack(planars), [keyscans[n].id for n in chosen])


class Odometry:
    """Sequential odometry state: trajectory, biases, key-scans and submap."""

    def __init__(self, cfg: EstimatorConfig, extrinsics: RigidTransform, imu: ImuData,
                 t_first: float, gravity=GRAVITY):
        self.cfg = cfg
        self.ext = extrinsics
        self.imu = imu
        self.gravity = np.asarray(gravity, dtype=float)
        R0, bias0 = gravity_alignment(imu.between(t_first - cfg.gravity_window, t_first,
                                                  closed=False), self.gravity)
        self.trajectory = Trajectory.constant(KnotGrid(t_first, cfg.knot_dt),
                                              RigidTransform(R0, np.zeros(3)))
        self.bias = bias0
        self.keyscans: list[KeyScan] = []
        self.submap: Submap | None = None
        self.processed = 0
        self.bias_history: list = []
        self._last = None

    # -- registration problem -------------------------------------------------

    def _registration_problem(self, corr: Correspondences, t_start: float, window,
                              imu: ImuData, prior: ImuBias) -> Problem:
        cfg, traj, ext = self.cfg, self.trajectory, self.ext
        problem = Problem()
        problem.add_parameter_block("ba", self.bias.accel, max_norm=ACCEL_BIAS_BOUND)
        problem.add_parameter_block("bw", self.bias.gyro, max_norm=GYRO_BIAS_BOUND)
        free = set(window.active_ids)
        t_lidar = t_start + corr.tau
        lidar_groups = group_by_segment(traj, t_lidar)
        imu_groups = group_by_segment(traj, imu.t)
        body_pts = corr.xyz @ ext.rotation.T + ext.translation
        g = self.gravity
        w_l, w_a, w_w = 1.0 / cfg.sigma_lidar, 1.0 / cfg.sigma_accel, 1.0 / cfg.sigma_gyro
        for seg in sorted(set(lidar_groups) | set(imu_groups)):
            ids = list(range(seg, seg + traj.grid.order))
            if not free.intersection(ids):
                continue
            add_control_blocks(problem, traj, ids, free)
            li = lidar_groups.get(seg, np.zeros(0, int))
            ii = imu_groups.get(seg, np.zeros(0, int))
            times = np.concatenate([t_lidar[li], imu.t[ii]])
            basis = SegmentBasis(traj.grid, seg, times)
            nl = len(li)
            sub = corr.subset(li)
            xb = body_pts[li]
            am, wm = imu.accel[ii], imu.gyro[ii]
            k = len(ids)

            def fn(vals, basis=basis, nl=nl, sub=sub, xb=xb, am=am, wm=wm, k=k):
                Rs, Ps, ba, bw = vals[:k], vals[k:2 * k], vals[2 * k], vals[2 * k + 1]
                R, omega = basis.rotation(Rs, derivative=len(am) > 0)
                out = []
                if nl:
                    xg = np.einsum("nij,nj->ni", R[:nl], xb) + basis.position(Ps)[:nl]
                    out.append(project_residual(xg, sub))
                if len(am):
                    acc = basis.acceleration(Ps)[nl:]
                    out.append((predicted_accel(R[nl:], acc, g) - am + ba).ravel())
                    out.append((omega[nl:] - wm + bw).ravel())
                return np.concatenate(out)

            weight = np.concatenate([np.full(nl, w_l), np.full(3 * len(ii), w_a),
                                     np.full(3 * len(ii), w_w)])
            delta = np.concatenate([np.full(nl, cfg.huber_delta * w_l),
                                    np.full(6 * len(ii), np.inf)])
            problem.add_residual_block(fn, control_block_ids(ids) + ["ba", "bw"],
                                       weight=weight, loss=Huber(delta), name=f"seg:{seg}")
        k_prior = cfg.bias_prior_factor
        problem.add_residual_block(lambda v, b=prior.accel: v[0] - b, ["ba"],
                                   weight=k_prior * w_a, name="prior:ba")
        problem.add_residual_block(lambda v, b=prior.gyro: v[0] - b, ["bw"],
                                   weight=k_prior * w_w, name="prior:bw")
        return problem

    # -- pipeline -------------------------------------------------------------

    def process_scan(self, scan: Scan, scan_id: int | None = None) -> ScanReport:
        clock = time.perf_counter()
        cfg, traj = self.cfg, self.trajectory
        scan_id = self.processed if scan_id is None else scan_id
        if cfg.rigid:
            scan = scan.with_zero_tau()
        t_k, t_end = scan.t_start, scan.t_start + scan.period
        if t_k < traj.interval[0]:
            raise ValueError(f"scan {scan_id} starts before the trajectory")

        t_prev = traj.interval[1]
        new_ids = traj.extend_to(t_end)
        init_report = initialize_segment(traj, self.imu, self.bias, new_ids, t_prev,
                                         self.gravity, cfg.init_max_iter)
        features = extract_features(scan, cfg.feature_config())
        window = traj.window_for(t_k, t_end)

        reports, n_corr, degenerate = [], 0, False
        if self.keyscans:
            position = traj.evaluate(t_k).p
            self.submap = build_submap(self.keyscans, position, self.ext, cfg)
            t_lo = traj.grid.knot(window.static_ids[0] if window.static_ids else window.active_ids[0])
            imu = self.imu.between(max(t_lo, traj.interval[0]), t_end)
            prior = self.bias.copy()
            for _ in range(cfg.association_rounds):
                corr = associate(features, self.submap, traj, self.ext, t_k)
                n_corr = len(corr)
                degenerate = n_corr == 0
                problem = self._registration_problem(corr, t_k, window, imu, prior)
                rep = solve(problem, SolverOptions(max_iter=cfg.max_iter))
                reports.append(rep)
                write_back(problem, traj, window.active_ids)
                self.bias = ImuBias(problem.value("ba"), problem.value("bw"))
                if degenerate:
                    break
        self.bias_history.append((t_k, self.bias.copy()))

        pose = traj.pose_at(t_k)
        last = self.keyscans[-1] if self.keyscans else None
        is_key = select_keyscan(last, t_k, pose, cfg)
        if is_key:
            self._add_keyscan(scan_id, scan, features)
        self._last = (scan_id, scan, features)
        self.processed += 1
        ms = (time.perf_counter() - clock) * 1e3
        cost_init = reports[0].initial_cost if reports else 0.0
        cost_final = reports[-1].final_cost if reports else 0.0
        log.info("scan %d: cost %.4g -> %.4g, %d corr, key=%s, %.0f ms",
                 scan_id, cost_init, cost_final, n_corr, is_key, ms)
        return ScanReport(scan_id, cost_init, cost_final, n_corr, is_key, degenerate, ms,
                          init_report, reports)

    def _add_keyscan(self, scan_id, scan: Scan, features: Features) -> None:
        pts = undistort_points(self.trajectory, self.ext, scan.t_start, features.tau, features.xyz)
        self.keyscans.append(KeyScan(scan_id, scan.t_start, self.trajectory.pose_at(scan.t_start),
                                     pts[features.is_edge], pts[~features.is_edge]))

    def finalize(self) -> None:
        """Promote the last processed scan so the trajectory end is anchored."""
        if self._last is None:
            return
        scan_id, scan, features = self._last
        if not self.keyscans or self.keyscans[-1].id != scan_id:
            self._add_keyscan(scan_id, scan, features)

    def refresh_keyscan_poses(self) -> None:
        for ks in self.keyscans:
            ks.pose = self.trajectory.pose_at(ks.t)

    def bias_at(self, t: float) -> ImuBias:
        current = self.bias_history[0][1] if self.bias_history else self.bias
        for t_k, b in self.bias_history:
            if t_k <= t:
                current = b
        return current


def run_odometry(cfg: EstimatorConfig, extrinsics: RigidTransform, imu: ImuData, scans,
                 finalize: bool = True):
    """Process ``scans`` in order; returns the odometry object and per-scan reports."""
    scans = list(scans)
    if not scans:
        raise ValueError("no scans to process")
    odo = Odometry(cfg, extrinsics, imu, scans[0].t_start)
    reports = [odo.process_scan(s, n) for n, s in enumerate(scans)]
    if finalize:
        odo.finalize()
    return odo, reports


def extrinsics_from_rpy(translation, rpy) -> RigidTransform:
    r, p, y = rpy
    return RigidTransform(rot_z(y) @ rot_y(p) @ rot_x(r), translation)
