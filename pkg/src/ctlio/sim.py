"""Deterministic ground truth and sensor synthesis over a world of planar patches."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bspline import KnotGrid
from .config import dump_config
from .geometry import RigidTransform, exp_so3, rot_x, rot_y, rot_z
from .imu import GRAVITY, ImuData, predicted_accel
from .lidar import Scan, write_scan_index
from .loopclosure import LoopConstraint, write_loops
from .trajectory import Trajectory, export_tum


@dataclass(frozen=True)
class Patch:
    """Rectangle ``corner + a*e1 + b*e2`` for ``a, b`` in [0, 1]."""

    corner: tuple
    e1: tuple
    e2: tuple
    plane_id: int

    def __post_init__(self):
        e1, e2 = np.asarray(self.e1, float), np.asarray(self.e2, float)
        if np.linalg.norm(np.cross(e1, e2)) <= 1e-12:
            raise ValueError(f"degenerate patch {self.plane_id}")
        if abs(e1 @ e2) > 1e-9 * np.linalg.norm(e1) * np.linalg.norm(e2):
            raise ValueError(f"patch {self.plane_id} edges are not perpendicular")

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.e1, self.e2)
        return n / np.linalg.norm(n)

    @property
    def offset(self) -> float:
        return -float(self.normal @ np.asarray(self.corner, float))


@dataclass
class World:
    patches: list

    def planes(self):
        """``(normals (P,3), offsets (P,))`` indexed by plane id."""
        n = max((p.plane_id for p in self.patches), default=-1) + 1
        normals, offsets = np.zeros((n, 3)), np.zeros(n)
        for p in self.patches:
            normals[p.plane_id], offsets[p.plane_id] = p.normal, p.offset
        return normals, offsets

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["plane_id", "cx", "cy", "cz", "e1x", "e1y", "e1z", "e2x", "e2y", "e2z"])
            for p in self.patches:
                w.writerow([p.plane_id, *(repr(float(x)) for x in (*p.corner, *p.e1, *p.e2))])

    @classmethod
    def read_csv(cls, path) -> "World":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"world file not found: {path}")
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            patches = []
            for row in reader:
                if not row:
                    continue
                v = [float(x) for x in row[1:10]]
                patches.append(Patch(tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:9]), int(row[0])))
        return cls(patches)


def box(lo, hi, first_id: int, inward: bool) -> list:
    """Six faces of an axis-aligned box; normals point inward for rooms."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    size = hi - lo
    ex, ey, ez = np.diag(size)
    faces = [
        (lo, ey, ez), (hi, -ez, -ey),  # x faces
        (lo, ez, ex), (hi, -ex, -ez),  # y faces
        (lo, ex, ey), (hi, -ey, -ex),  # z faces
    ]
    patches = []
    for n, (c, a, b) in enumerate(faces):
        if not inward:
            a, b = b, a
        patches.append(Patch(tuple(c), tuple(a), tuple(b), first_id + n))
    return patches


def pillar(x, y, half, z_lo, z_hi, first_id: int) -> list:
    """Four vertical outward faces of a square pillar (no caps)."""
    faces = box((x - half, y - half, z_lo), (x + half, y + half, z_hi), first_id, inward=False)
    keep = [f for f in faces if abs(f.normal[2]) < 0.5]
    return [Patch(f.corner, f.e1, f.e2, first_id + i) for i, f in enumerate(keep)]


def box_room(lo=(-5.0, -4.0, -0.8), hi=(5.0, 4.0, 1.2), pillars=True) -> World:
    patches = box(lo, hi, 0, inward=True)
    if pillars:
        patches += pillar(2.2, 1.8, 0.25, lo[2], hi[2], 6)
        patches += pillar(-2.0, -1.5, 0.3, lo[2], hi[2], 10)
        patches += pillar(-1.0, 2.6, 0.2, lo[2], hi[2], 14)
    return World(patches)


# --- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    world: str = ""
    motion: str = "loop"
    n_scans: int = 20
    t_first_scan: float = 1.0
    knot_dt: float = 0.05
    imu_rate: float = 400.0
    rings: int = 16
    points_per_ring: int = 360
    spin_rate: float = 10.0
    vfov_min_deg: float = -15.0
    vfov_max_deg: float = 15.0
    max_range: float = 50.0
    sigma_gyro: float = 0.005
    sigma_accel: float = 0.05
    sigma_range: float = 0.02
    accel_bias: tuple = (0.02, -0.01, 0.03)
    gyro_bias: tuple = (0.002, -0.001, 0.001)
    extrinsic_translation: tuple = (0.05, 0.0, 0.1)
    extrinsic_rpy: tuple = (0.0, 0.0, 0.05)
    loop_radius: float = 0.25
    yaw_amplitude: float = 0.5
    spin_rate_z: float = 1.0
    drift_speed: float = 0.3
    loop_weight: float = 100.0
    loop_noise_trans: float = 0.0
    loop_noise_rot: float = 0.0

    @property
    def scan_period(self) -> float:
        return 1.0 / self.spin_rate

    @property
    def t_end(self) -> float:
        return self.t_first_scan + self.n_scans * self.scan_period

    def extrinsics(self) -> RigidTransform:
        r, p, y = self.extrinsic_rpy
        return RigidTransform(rot_z(y) @ rot_y(p) @ rot_x(r), self.extrinsic_translation)

    def noise_free(self) -> "SimConfig":
        from dataclasses import replace
        return replace(self, sigma_gyro=0.0, sigma_accel=0.0, sigma_range=0.0,
                       accel_bias=(0.0, 0.0, 0.0), gyro_bias=(0.0, 0.0, 0.0))


def load_world(cfg: SimConfig) -> World:
    return World.read_csv(cfg.world) if cfg.world else box_room()


# --- ground truth ----------------------------------------------------------

def _smootherstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * x * (x * (6 * x - 15) + 10)


def _motion(cfg: SimConfig, t):
    """Position and roll/pitch/yaw of the body at times ``t``."""
    t = np.asarray(t, dtype=float)
    t_move = cfg.t_first_scan + cfg.scan_period
    zeros = np.zeros_like(t)
    if cfg.motion == "static":
        return np.zeros(t.shape + (3,)), np.stack([zeros, zeros, zeros], -1)
    if cfg.motion == "loop":
        span = max(cfg.t_end - t_move - 0.5 * cfg.scan_period, 1e-6)
        phi = 2 * np.pi * _smootherstep((t - t_move) / span)
        r = cfg.loop_radius
        p = np.stack([r * np.sin(phi), r * (1 - np.cos(phi)), 0.15 * np.sin(2 * phi)], -1)
        rpy = np.stack([0.05 * np.sin(2 * phi), 0.05 * np.sin(3 * phi),
                        cfg.yaw_amplitude * np.sin(phi)], -1)
        return p, rpy
    if cfg.motion == "spin":
        ramp = 0.3
        s = np.clip((t - t_move) / ramp, 0.0, None)
        # integral of smoothstep-ramped rate: rate * ramp * F(s)
        inside = s < 1.0
        F = np.where(inside, s ** 3 - 0.5 * s ** 4, 0.5 + (s - 1.0))
        yaw = cfg.spin_rate_z * ramp * F
        dist = cfg.drift_speed * ramp * F
        p = np.stack([dist, zeros, zeros], -1)
        return p, np.stack([zeros, zeros, yaw], -1)
    raise ValueError(f"unknown motion profile {cfg.motion!r}")


def ground_truth_trajectory(cfg: SimConfig) -> Trajectory:
    """Cubic spline on a grid starting at t=0 whose control points follow the motion."""
    k = 4
    dt = cfg.knot_dt
    n_seg = int(math.ceil((cfg.t_end + 0.5) / dt))
    n = n_seg + k - 1
    # control point m is centred on knot m-1 for cubic splines
    tc = (np.arange(n) - 1) * dt
    p, rpy = _motion(cfg, tc)
    R = np.array([rot_z(y) @ rot_y(b) @ rot_x(a) for a, b, y in rpy])
    return Trajectory(KnotGrid(0.0, dt, k), R, p)


# --- sensors ---------------------------------------------------------------

def _rngs(cfg: SimConfig):
    ss = np.random.SeedSequence(cfg.seed)
    imu_ss, scan_ss, loop_ss = ss.spawn(3)
    return imu_ss, scan_ss, loop_ss


def synthesize_imu(cfg: SimConfig, traj: Trajectory, rng=None) -> ImuData:
    """Inverse measurement model with constant biases and white noise."""
    if rng is None:
        rng = np.random.default_rng(_rngs(cfg)[0])
    lo, hi = traj.interval
    n = int(math.floor((hi - lo) * cfg.imu_rate + 1e-9))
    t = lo + np.arange(n) / cfg.imu_rate
    s = traj.evaluate(t, derivatives=True)
    gyro = s.omega + np.asarray(cfg.gyro_bias)
    accel = predicted_accel(s.R, s.a, GRAVITY) + np.asarray(cfg.accel_bias)
    noise_w = rng.standard_normal(gyro.shape) * cfg.sigma_gyro
    noise_a = rng.standard_normal(accel.shape) * cfg.sigma_accel
    return ImuData(t, gyro + noise_w, accel + noise_a)


@dataclass
class SimScan:
    scan: Scan
    plane_ids: np.ndarray
    range_noise: np.ndarray


def ray_directions(cfg: SimConfig):
    """Unit rays ``(columns, rings, 3)`` in the sensor frame and column offsets tau."""
    az = 2 * np.pi * np.arange(cfg.points_per_ring) / cfg.points_per_ring
    el = np.radians(np.linspace(cfg.vfov_min_deg, cfg.vfov_max_deg, cfg.rings))
    ce, se = np.cos(el), np.sin(el)
    d = np.stack([np.outer(np.cos(az), ce), np.outer(np.sin(az), ce),
                  np.broadcast_to(se, (len(az), len(el)))], -1)
    tau = np.arange(cfg.points_per_ring) / (cfg.points_per_ring * cfg.spin_rate)
    return d, tau


def raycast(world: World, origins, dirs, max_range: float):
    """Nearest patch hit per ray: ``(range, plane_id)``, range=inf and id=-1 on miss."""
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    best = np.full(len(d), np.inf)
    ids = np.full(len(d), -1)
    for patch in world.patches:
        c = np.asarray(patch.corner, float)
        e1, e2 = np.asarray(patch.e1, float), np.asarray(patch.e2, float)
        n = patch.normal
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - o) @ n) / denom
        hit = o + t[:, None] * d
        a = (hit - c) @ e1 / (e1 @ e1)
        b = (hit - c) @ e2 / (e2 @ e2)
        ok = (np.abs(denom) > 1e-12) & (t > 1e-6) & (t <= max_range) & \
             (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1) & (t < best)
        best = np.where(ok, t, best)
        ids = np.where(ok, patch.plane_id, ids)
    return best, ids


def synthesize_scan(cfg: SimConfig, world: World, traj: Trajectory, t_start: float,
                    rng=None) -> SimScan:
    """Cast each column from the true LiDAR pose at its own firing time."""
    rng = rng or np.random.default_rng(0)
    ext = cfg.extrinsics()
    dirs, tau = ray_directions(cfg)
    s = traj.evaluate(t_start + tau)
    R = s.R @ ext.rotation
    o = s.p + s.R @ ext.translation
    world_dirs = np.einsum("cij,crj->cri", R, dirs)
    origins = np.broadcast_to(o[:, None, :], world_dirs.shape)
    rng_, ids = raycast(world, origins, world_dirs, cfg.max_range)
    rng_ = rng_.reshape(dirs.shape[:2])
    ids = ids.reshape(dirs.shape[:2])
    noise = rng.standard_normal(rng_.shape) * cfg.sigma_range
    hit = np.isfinite(rng_)
    # firing order: column-major, so tau increases within every ring
    cols, rings = np.nonzero(hit)
    r = rng_[cols, rings] + noise[cols, rings]
    xyz = dirs[cols, rings] * r[:, None]
    scan = Scan(t_start, cfg.scan_period, tau[cols], xyz, rings)
    return SimScan(scan, ids[cols, rings], noise[cols, rings])


@dataclass
class SimRun:
    config: SimConfig
    world: World
    trajectory: Trajectory
    imu: ImuData
    scans: list
    loops: list = field(default_factory=list)


def scan_times(cfg: SimConfig) -> np.ndarray:
    return cfg.t_first_scan + np.arange(cfg.n_scans) * cfg.scan_period


def loop_constraints(cfg: SimConfig, traj: Trajectory, rng=None) -> list:
    """Ground-truth relative body pose between the first and last scan of a loop run."""
    if cfg.motion != "loop" or cfg.n_scans < 2:
        return []
    rng = rng or np.random.default_rng(_rngs(cfg)[2])
    times = scan_times(cfg)
    a, b = 0, cfg.n_scans - 1
    rel = traj.pose_at(times[a]).inverse() @ traj.pose_at(times[b])
    dR = exp_so3(rng.standard_normal(3) * cfg.loop_noise_rot)
    dp = rng.standard_normal(3) * cfg.loop_noise_trans
    rel = RigidTransform(rel.rotation @ dR, rel.translation + dp)
    return [LoopConstraint(a, b, rel, cfg.loop_weight)]


def simulate(cfg: SimConfig, world: World | None = None) -> SimRun:
    world = world if world is not None else load_world(cfg)
    traj = ground_truth_trajectory(cfg)
    imu_ss, scan_ss, loop_ss = _rngs(cfg)
    imu = synthesize_imu(cfg, traj, np.random.default_rng(imu_ss))
    scans = [synthesize_scan(cfg, world, traj, t, np.random.default_rng(ss))
             for t, ss in zip(scan_times(cfg), scan_ss.spawn(cfg.n_scans))]
    loops = loop_constraints(cfg, traj, np.random.default_rng(loop_ss))
    return SimRun(cfg, world, traj, imu, scans, loops)


def emit_dataset(cfg: SimConfig, out_dir, world: World | None = None) -> SimRun:
    """Write the IMU stream, scans, ground truth, loops and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = simulate(cfg, world)
    run.imu.write_csv(out / "imu.csv")
    (out / "scans").mkdir(exist_ok=True)
    (out / "groundtruth").mkdir(exist_ok=True)
    entries = []
    for n, s in enumerate(run.scans):
        rel = f"scans/scan_{n:04d}.csv"
        s.scan.write_csv(out / rel)
        np.savetxt(out / "groundtruth" / f"planes_{n:04d}.txt", s.plane_ids, fmt="%d")
        entries.append((s.scan.t_start, s.scan.period, rel))
    write_scan_index(out / "scans" / "index.csv", entries)
    run.trajectory.save(out / "groundtruth" / "trajectory.txt")
    export_tum(run.trajectory, out / "groundtruth" / "trajectory.tum", rate=100.0)
    run.world.write_csv(out / "world.csv")
    write_loops(out / "loops.csv", run.loops)
    (out / "manifest.txt").write_text(dump_config(cfg))
    return run
