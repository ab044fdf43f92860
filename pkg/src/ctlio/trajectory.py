"""Continuous IMU trajectory in the global frame: paired R^3 / SO(3) splines."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bspline import (KnotGrid, OutOfRangeError, SplineR3, SplineSO3, cumulative_basis,
                      so3_segment)
from .geometry import RigidTransform, quat_from_rotation, rotation_from_quat

# Ulp-level slack when converting times to knot indices.
_EPS = 1e-9


@dataclass
class SegmentWindow:
    active_range: tuple
    active_ids: list
    static_ids: list


@dataclass
class TrajectoryState:
    """Pose and derivatives at a batch of times."""

    R: np.ndarray
    p: np.ndarray
    v: np.ndarray | None = None
    a: np.ndarray | None = None
    omega: np.ndarray | None = None


class Trajectory:
    """Split-representation trajectory ``T_GI(t) = [R(t) p(t); 0 1]``."""

    def __init__(self, grid: KnotGrid, rotations, positions):
        rotations = np.array(rotations, dtype=float).reshape(-1, 3, 3)
        positions = np.array(positions, dtype=float).reshape(-1, 3)
        if len(rotations) != len(positions):
            raise ValueError("rotation and position control counts differ")
        self.pos = SplineR3(grid, positions)
        self.rot = SplineSO3(grid, rotations)

    @classmethod
    def constant(cls, grid: KnotGrid, pose: RigidTransform, n_control: int | None = None):
        n = grid.order if n_control is None else n_control
        return cls(grid, np.repeat(pose.rotation[None], n, axis=0),
                   np.repeat(pose.translation[None], n, axis=0))

    @property
    def grid(self) -> KnotGrid:
        return self.pos.grid

    @property
    def rotations(self) -> np.ndarray:
        return self.rot.control_points

    @property
    def positions(self) -> np.ndarray:
        return self.pos.control_points

    @property
    def n_control(self) -> int:
        return len(self.positions)

    @property
    def interval(self):
        return self.pos.interval

    def copy(self) -> "Trajectory":
        return Trajectory(self.grid, self.rotations.copy(), self.positions.copy())

    # -- evaluation ----------------------------------------------------------

    def evaluate(self, t, derivatives: bool = False) -> TrajectoryState:
        """Batch evaluation of pose and, optionally, v, a and body omega."""
        g = self.grid
        i, u = g.locate(t, self.n_control)
        idx = i[..., None] + np.arange(g.order)
        B = cumulative_basis(u, g.order, g.dt)
        R, omega = so3_segment(self.rotations[idx], B.lam, B.dlam if derivatives else None)
        P = self.positions[idx]
        d = P[..., 1:, :] - P[..., :-1, :]
        p = P[..., 0, :] + np.einsum("...j,...jc->...c", B.lam[..., 1:], d)
        if not derivatives:
            return TrajectoryState(R, p)
        v = np.einsum("...j,...jc->...c", B.dlam[..., 1:], d)
        a = np.einsum("...j,...jc->...c", B.ddlam[..., 1:], d)
        return TrajectoryState(R, p, v, a, omega)

    def pose_at(self, t: float) -> RigidTransform:
        s = self.evaluate(t)
        return RigidTransform(s.R, s.p)

    def lidar_pose_at(self, extrinsics: RigidTransform, t: float) -> RigidTransform:
        return self.pose_at(t) @ extrinsics

    # -- knot bookkeeping ----------------------------------------------------

    def segments_for(self, t_a: float, t_b: float) -> range:
        """Segment indices intersecting ``[t_a, t_b)``."""
        g = self.grid
        start, end = self.interval
        if t_a < start - _EPS or t_b > end + _EPS or t_b < t_a:
            raise OutOfRangeError(t_a if t_a < start else t_b, start, end)
        first = int(math.floor((t_a - g.t0) / g.dt + _EPS))
        last = int(math.ceil((t_b - g.t0) / g.dt - _EPS)) - 1
        n_seg = self.n_control - g.order + 1
        first = min(max(first, 0), n_seg - 1)
        last = min(max(last, first), n_seg - 1)
        return range(first, last + 1)

    def extend_to(self, t_end: float) -> list:
        """Append constant-extrapolated control points until ``t_end`` is evaluable."""
        g = self.grid
        needed_seg = int(math.ceil((t_end - g.t0) / g.dt - _EPS))
        needed = needed_seg + g.order - 1
        n = self.n_control
        if needed <= n:
            return []
        extra = needed - n
        self.pos.control_points = np.concatenate(
            [self.positions, np.repeat(self.positions[-1:], extra, axis=0)])
        self.rot.control_points = np.concatenate(
            [self.rotations, np.repeat(self.rotations[-1:], extra, axis=0)])
        return list(range(n, needed))

    def window_for(self, t_a: float, t_b: float) -> SegmentWindow:
        """Active control points for ``[t_a, t_b)`` and the static ones preceding them."""
        k = self.grid.order
        segs = self.segments_for(t_a, t_b)
        active = list(range(segs[0], segs[-1] + k))
        static = list(range(max(0, segs[0] - (k - 1)), segs[0]))
        return SegmentWindow((t_a, t_b), active, static)

    # -- serialization -------------------------------------------------------

    def save(self, path) -> None:
        g = self.grid
        lines = ["# t0 dt k n", f"{g.t0!r} {g.dt!r} {g.order} {self.n_control}"]
        for i in range(self.n_control):
            q = quat_from_rotation(self.rotations[i])
            vals = list(self.positions[i]) + list(q)
            lines.append(f"{i} " + " ".join(repr(float(x)) for x in vals))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Trajectory":
        rows = [ln.split() for ln in Path(path).read_text().splitlines()
                if ln.strip() and not ln.startswith("#")]
        t0, dt, k, n = float(rows[0][0]), float(rows[0][1]), int(rows[0][2]), int(rows[0][3])
        body = rows[1:]
        if len(body) != n:
            raise ValueError(f"{path}: header declares {n} control points, found {len(body)}")
        P = np.array([[float(x) for x in r[1:4]] for r in body])
        R = np.array([rotation_from_quat([float(x) for x in r[4:8]]) for r in body])
        return cls(KnotGrid(t0, dt, k), R, P)


class SegmentBasis:
    """Cumulative basis cached for fixed sample times inside one segment.

    Residuals that only depend on the ``k`` control points of a segment use
    this to re-evaluate the spline cheaply while those points are perturbed.
    """

    def __init__(self, grid: KnotGrid, segment: int, times):
        self.segment = segment
        self.times = np.asarray(times, dtype=float)
        u = np.clip((self.times - grid.knot(segment)) / grid.dt, 0.0, 1.0)
        B = cumulative_basis(u, grid.order, grid.dt)
        self.lam, self.dlam, self.ddlam = B.lam, B.dlam, B.ddlam
        self.ids = list(range(segment, segment + grid.order))

    def rotation(self, Rs, derivative: bool = False):
        return so3_segment(np.asarray(Rs), self.lam, self.dlam if derivative else None)

    def _blend(self, Ps, coeff, base):
        P = np.asarray(Ps)
        d = P[1:] - P[:-1]
        out = coeff[:, 1:] @ d
        return out + P[0] if base else out

    def position(self, Ps):
        return self._blend(Ps, self.lam, True)

    def velocity(self, Ps):
        return self._blend(Ps, self.dlam, False)

    def acceleration(self, Ps):
        return self._blend(Ps, self.ddlam, False)


def group_by_segment(traj: Trajectory, times) -> dict:
    """Map segment index -> indices into ``times`` (in ascending order)."""
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        return {}
    seg, _ = traj.grid.locate(times, traj.n_control)
    return {int(s): np.flatnonzero(seg == s) for s in np.unique(seg)}


def sample_times(traj: Trajectory, rate: float, start: float | None = None,
                 end: float | None = None) -> np.ndarray:
    lo, hi = traj.interval
    lo = lo if start is None else max(lo, start)
    hi = hi if end is None else min(hi, end)
    n = int(math.floor((hi - lo) * rate + _EPS)) + 1
    return lo + np.arange(n) / rate


def write_tum(path, times, rotations, positions) -> None:
    lines = []
    for t, R, p in zip(times, rotations, positions):
        q = quat_from_rotation(R)
        vals = [t, *p, *q]
        lines.append(" ".join(repr(float(x)) for x in vals))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_tum(path):
    """Return ``(times, rotations, positions)`` arrays from a TUM file."""
    rows = []
    for ln in Path(path).read_text().splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        f = ln.split()
        if len(f) != 8:
            raise ValueError(f"{path}: expected 8 fields per line, got {len(f)}")
        rows.append([float(x) for x in f])
    data = np.array(rows).reshape(-1, 8)
    R = np.array([rotation_from_quat(q) for q in data[:, 4:8]]).reshape(-1, 3, 3)
    return data[:, 0], R, data[:, 1:4]


def export_tum(traj: Trajectory, path, rate: float = 100.0) -> None:
    t = sample_times(traj, rate)
    s = traj.evaluate(t)
    write_tum(path, t, s.R, s.p)
