"""Two-stage loop correction.

Stage one optimizes a pose graph over key-scan poses. Stage two re-fits every
control point of the continuous trajectory so that it passes through the
updated key poses while keeping the body-frame velocities it had before.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import (RigidTransform, exp_so3, log_so3_batch, quat_from_rotation,
                       rotation_from_quat)
from .solver import Problem, SolveReport, SolverOptions, solve
from .trajectory import SegmentBasis, Trajectory, group_by_segment

LOOP_HEADER = ["id_a", "id_b", "tx", "ty", "tz", "qx", "qy", "qz", "qw", "weight"]


class DisconnectedGraphError(ValueError):
    def __init__(self, components):
        self.components = components
        desc = "; ".join("{" + ", ".join(str(i) for i in c) + "}" for c in components)
        super().__init__(f"pose graph is disconnected: {desc}")


@dataclass
class LoopConstraint:
    """Relative pose ``T_a^-1 T_b`` between two key-scans; ``weight`` scales the residual."""

    id_a: int
    id_b: int
    relative: RigidTransform
    weight: float = 1.0


def write_loops(path, loops) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOOP_HEADER)
        for c in loops:
            q = quat_from_rotation(c.relative.rotation)
            w.writerow([c.id_a, c.id_b, *(repr(float(x)) for x in c.relative.translation),
                        *(repr(float(x)) for x in q), repr(float(c.weight))])


def read_loops(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if header != LOOP_HEADER:
            raise ValueError(f"{path}: unexpected loop header {header}")
        out = []
        for n, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(LOOP_HEADER):
                raise ValueError(f"{path}:{n}: expected {len(LOOP_HEADER)} fields")
            vals = [float(x) for x in row[2:]]
            rel = RigidTransform(rotation_from_quat(vals[3:7]), vals[0:3])
            out.append(LoopConstraint(int(row[0]), int(row[1]), rel, vals[7]))
    return out


# --- stage one -------------------------------------------------------------

@dataclass
class PoseGraph:
    nodes: dict
    edges: list = field(default_factory=list)
    fixed: set = field(default_factory=set)

    @classmethod
    def from_poses(cls, ids, poses, weight: float = 1.0) -> "PoseGraph":
        """Chain graph whose odometry edges agree exactly with ``poses``; first node fixed."""
        ids = list(ids)
        nodes = dict(zip(ids, poses))
        edges = [LoopConstraint(a, b, nodes[a].inverse() @ nodes[b], weight)
                 for a, b in zip(ids[:-1], ids[1:])]
        return cls(nodes, edges, {ids[0]} if ids else set())

    def components(self, extra_edges=()) -> list:
        ids = list(self.nodes)
        index = {k: n for n, k in enumerate(ids)}
        pairs = [(index[e.id_a], index[e.id_b]) for e in list(self.edges) + list(extra_edges)]
        rows = [a for a, _ in pairs]
        cols = [b for _, b in pairs]
        graph = coo_matrix((np.ones(len(pairs)), (rows, cols)), shape=(len(ids), len(ids)))
        _, labels = connected_components(graph, directed=False)
        groups: dict = {}
        for k, lab in zip(ids, labels):
            groups.setdefault(lab, []).append(k)
        return sorted(groups.values(), key=lambda g: g[0])


def edge_residual(Ta_R, Ta_p, Tb_R, Tb_p, meas: RigidTransform) -> np.ndarray:
    """Rotation Log error and translation error in frame ``a``."""
    dR = meas.rotation.T @ Ta_R.T @ Tb_R
    dp = Ta_R.T @ (Tb_p - Ta_p) - meas.translation
    return np.concatenate([log_so3_batch(dR[None])[0], dp])


def optimize_pose_graph(graph: PoseGraph, loops=(), options: SolverOptions | None = None):
    """Returns ``({id: RigidTransform}, SolveReport)``."""
    loops = list(loops)
    for c in loops:
        for i in (c.id_a, c.id_b):
            if i not in graph.nodes:
                raise KeyError(f"loop constraint references unknown key-scan {i}")
    if not graph.fixed:
        raise ValueError("pose graph needs at least one fixed node")
    comps = graph.components(loops)
    if len(comps) > 1:
        raise DisconnectedGraphError(comps)
    problem = Problem()
    for k, T in graph.nodes.items():
        problem.add_parameter_block(("R", k), T.rotation, "so3", fixed=k in graph.fixed)
        problem.add_parameter_block(("p", k), T.translation, "euclidean", fixed=k in graph.fixed)
    for e in list(graph.edges) + loops:
        problem.add_residual_block(
            lambda v, m=e.relative: edge_residual(v[0], v[1], v[2], v[3], m),
            [("R", e.id_a), ("p", e.id_a), ("R", e.id_b), ("p", e.id_b)],
            weight=math.sqrt(e.weight), name=f"edge:{e.id_a}-{e.id_b}")
    report = solve(problem, options or SolverOptions(max_iter=50, cost_tol=1e-12))
    poses = {k: RigidTransform(problem.value(("R", k)), problem.value(("p", k)))
             for k in graph.nodes}
    return poses, report


# --- stage two -------------------------------------------------------------

@dataclass
class VelocityAnchors:
    t: np.ndarray
    v: np.ndarray
    omega: np.ndarray

    def __len__(self) -> int:
        return len(self.t)


def sample_velocity_anchors(traj: Trajectory, rate: float | None = None) -> VelocityAnchors:
    """Body-frame linear and angular velocity at uniform times, default two per knot."""
    rate = 2.0 / traj.grid.dt if rate is None else rate
    if rate <= 0:
        raise ValueError("anchor rate must be positive")
    t0, t1 = traj.interval
    n = int(math.floor((t1 - t0) * rate + 1e-9)) + 1
    t = np.minimum(t0 + np.arange(n) / rate, t1)
    s = traj.evaluate(t, derivatives=True)
    v_body = np.einsum("nji,nj->ni", s.R, s.v)
    return VelocityAnchors(t, v_body, s.omega.copy())


def correct_trajectory(traj: Trajectory, key_times, key_poses, anchors: VelocityAnchors,
                       pose_weight: float = 10.0, options: SolverOptions | None = None):
    """Re-fit all control points to key poses and velocity anchors.

    Returns a new trajectory on the same knot grid and the solver report.
    """
    key_times = np.asarray(key_times, dtype=float).reshape(-1)
    key_poses = list(key_poses)
    if len(key_times) == 0 or len(key_times) != len(key_poses):
        raise ValueError("correct_trajectory needs at least one key pose per key time")
    out = traj.copy()
    KR = np.array([T.rotation for T in key_poses])
    Kp = np.array([T.translation for T in key_poses])
    times = np.concatenate([key_times, anchors.t])
    is_key = np.arange(len(times)) < len(key_times)
    problem = Problem()
    for i in range(out.n_control):
        problem.add_parameter_block(("R", i), out.rotations[i], "so3")
        problem.add_parameter_block(("p", i), out.positions[i], "euclidean")
    for seg, idx in group_by_segment(out, times).items():
        basis = SegmentBasis(out.grid, seg, times[idx])
        k = len(basis.ids)
        kmask = is_key[idx]
        kidx = idx[kmask]
        aidx = idx[~kmask] - len(key_times)
        rhat, phat = KR[kidx], Kp[kidx]
        vhat, what = anchors.v[aidx], anchors.omega[aidx]

        def fn(vals, basis=basis, k=k, kmask=kmask, rhat=rhat, phat=phat, vhat=vhat, what=what):
            R, omega = basis.rotation(vals[:k], derivative=True)
            Ps = vals[k:]
            p = basis.position(Ps)
            v = basis.velocity(Ps)
            am = ~kmask
            v_body = np.einsum("nji,nj->ni", R[am], v[am])
            return np.concatenate([
                log_so3_batch(np.swapaxes(rhat, -1, -2) @ R[kmask]).ravel(),
                (p[kmask] - phat).ravel(),
                (v_body - vhat).ravel(),
                (omega[am] - what).ravel()])

        n_key, n_anchor = int(kmask.sum()), int((~kmask).sum())
        weight = np.concatenate([np.full(6 * n_key, pose_weight), np.full(6 * n_anchor, 1.0)])
        ids = [("R", i) for i in basis.ids] + [("p", i) for i in basis.ids]
        problem.add_residual_block(fn, ids, weight=weight, name=f"refit:{seg}")
    report = solve(problem, options or SolverOptions(max_iter=50, cost_tol=1e-12))
    for i in range(out.n_control):
        out.rotations[i] = problem.value(("R", i))
        out.positions[i] = problem.value(("p", i))
    return out, report


def loop_correct(traj: Trajectory, key_ids, key_times, loops, options=None):
    """Both stages; key poses are read from ``traj`` at ``key_times``.

    Returns the corrected trajectory, the updated key poses and both reports.
    """
    key_ids = list(key_ids)
    key_times = np.asarray(key_times, dtype=float)
    if not key_ids:
        raise ValueError("no key-scans to correct")
    anchors = sample_velocity_anchors(traj)
    poses = [traj.pose_at(t) for t in key_times]
    graph = PoseGraph.from_poses(key_ids, poses)
    updated, graph_report = optimize_pose_graph(graph, loops, options)
    corrected, fit_report = correct_trajectory(traj, key_times, [updated[k] for k in key_ids],
                                               anchors, options=options)
    return corrected, updated, graph_report, fit_report


def inject_drift(traj: Trajectory, t_a: float, t_b: float, rot_drift, trans_drift) -> Trajectory:
    """Copy of ``traj`` deformed by a global error growing linearly from ``t_a`` to ``t_b``.

    Control point ``i`` is left-multiplied by ``(Exp(s*rot_drift), s*trans_drift)``
    with ``s`` its ramp fraction, which mimics accumulated odometry drift.
    """
    out = traj.copy()
    rot_drift = np.asarray(rot_drift, dtype=float)
    trans_drift = np.asarray(trans_drift, dtype=float)
    for i in range(out.n_control):
        s = np.clip((out.grid.knot(i - 1) - t_a) / (t_b - t_a), 0.0, 1.0)
        D = exp_so3(s * rot_drift)
        out.rotations[i] = D @ out.rotations[i]
        out.positions[i] = D @ out.positions[i] + s * trans_drift
    return out
