"""LiDAR scans, curvature features, undistortion, association and residuals."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidTransform
from .trajectory import Trajectory

NEIGHBORS = 5


@dataclass
class Scan:
    """One sweep. Points are column arrays; ``tau`` is relative to ``t_start``."""

    t_start: float
    period: float
    tau: np.ndarray
    xyz: np.ndarray
    ring: np.ndarray

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=float).reshape(-1)
        self.xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)
        self.ring = np.asarray(self.ring, dtype=int).reshape(-1)

    def __len__(self) -> int:
        return len(self.tau)

    @property
    def times(self) -> np.ndarray:
        return self.t_start + self.tau

    def with_zero_tau(self) -> "Scan":
        return Scan(self.t_start, self.period, np.zeros_like(self.tau), self.xyz, self.ring)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "x", "y", "z", "ring"])
            for tau, p, r in zip(self.tau, self.xyz, self.ring):
                w.writerow([repr(float(tau)), *(repr(float(x)) for x in p), int(r)])

    @classmethod
    def read_csv(cls, path, t_start: float, period: float) -> "Scan":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["tau", "x", "y", "z", "ring"]:
                raise ValueError(f"{path}: unexpected scan header {header}")
            rows = [row for row in reader if row]
        if rows and any(len(r) != 5 for r in rows):
            raise ValueError(f"{path}: malformed row")
        data = np.array([[float(x) for x in r] for r in rows], dtype=float).reshape(-1, 5)
        return cls(t_start, period, data[:, 0], data[:, 1:4], data[:, 4].astype(int))


def write_scan_index(path, entries) -> None:
    """``entries`` is an iterable of ``(t_start, period, relative_path)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_start", "period", "path"])
        for t, period, p in entries:
            w.writerow([repr(float(t)), repr(float(period)), p])


def read_scan_index(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["t_start", "period", "path"]:
            raise ValueError(f"{path}: unexpected scan index header {header}")
        return [(float(r[0]), float(r[1]), r[2]) for r in reader if r]


def write_ply(path, points, intensity=None) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    intensity = np.zeros(len(points)) if intensity is None else np.asarray(intensity, dtype=float)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property float x", "property float y", "property float z",
             "property float intensity", "end_header"]
    lines += [f"{p[0]!r} {p[1]!r} {p[2]!r} {float(i)!r}" for p, i in zip(points, intensity)]
    Path(path).write_text("\n".join(lines) + "\n")


# --- features --------------------------------------------------------------

@dataclass
class FeatureConfig:
    edge_threshold: float = 0.02
    planar_threshold: float = 0.005
    sectors: int = 6
    max_edge_per_sector: int = 2
    max_planar_per_sector: int = 6
    suppress: int = 5
    jump_ratio: float = 0.1
    # edges seen along a beam nearly parallel to both adjacent surfaces are conic
    # sections of a plane, not corners
    grazing_cos: float = 0.85


@dataclass
class Features:
    """Selected feature points of one scan (sensor-frame coordinates)."""

    tau: np.ndarray
    xyz: np.ndarray
    curvature: np.ndarray
    is_edge: np.ndarray
    index: np.ndarray
    skipped_rings: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tau)

    def subset(self, mask) -> "Features":
        return Features(self.tau[mask], self.xyz[mask], self.curvature[mask],
                        self.is_edge[mask], self.index[mask], self.skipped_rings)

    @property
    def edges(self) -> "Features":
        return self.subset(self.is_edge)

    @property
    def planars(self) -> "Features":
        return self.subset(~self.is_edge)

    @classmethod
    def empty(cls) -> "Features":
        return cls(np.zeros(0), np.zeros((0, 3)), np.zeros(0), np.zeros(0, bool), np.zeros(0, int))


def ring_curvature(xyz: np.ndarray) -> np.ndarray:
    """``||sum_{|n|<=5, n!=0} (x_{j+n} - x_j)|| / (10 ||x_j||)``; NaN within 5 of the ends."""
    n = len(xyz)
    c = np.full(n, np.nan)
    if n < 2 * NEIGHBORS + 1:
        return c
    cs = np.vstack([np.zeros((1, 3)), np.cumsum(xyz, axis=0)])
    j = np.arange(NEIGHBORS, n - NEIGHBORS)
    window = cs[j + NEIGHBORS + 1] - cs[j - NEIGHBORS]
    diff = window - (2 * NEIGHBORS + 1) * xyz[j]
    c[j] = np.linalg.norm(diff, axis=1) / (2 * NEIGHBORS * np.linalg.norm(xyz[j], axis=1))
    return c


def _pick(order, allowed, quota, suppress, taken):
    picked = []
    for j in order:
        if len(picked) >= quota:
            break
        if not allowed[j] or taken[j]:
            continue
        picked.append(j)
        taken[max(0, j - suppress):j + suppress + 1] = True
    return picked


def _grazing(pts: np.ndarray, cos_limit: float) -> np.ndarray:
    """True where the beam is within ``acos(cos_limit)`` of the surface on both sides."""
    n = len(pts)
    out = np.zeros(n, bool)
    if n < 2 * NEIGHBORS + 1:
        return out
    j = np.arange(NEIGHBORS, n - NEIGHBORS)
    ray = pts[j] / np.linalg.norm(pts[j], axis=1, keepdims=True)

    def cos_to(other):
        t = other - pts[j]
        nrm = np.maximum(np.linalg.norm(t, axis=1), 1e-12)
        return np.abs(np.einsum("ni,ni->n", t, ray)) / nrm

    out[j] = (cos_to(pts[j - NEIGHBORS]) > cos_limit) & (cos_to(pts[j + NEIGHBORS]) > cos_limit)
    return out


def extract_features(scan: Scan, cfg: FeatureConfig | None = None) -> Features:
    """Curvature-based edge/planar selection with per-ring sector quotas."""
    cfg = cfg or FeatureConfig()
    sel_idx, sel_edge, sel_c = [], [], []
    skipped = []
    for ring in np.unique(scan.ring):
        idx = np.flatnonzero(scan.ring == ring)
        idx = idx[np.argsort(scan.tau[idx], kind="stable")]
        if len(idx) < 2 * NEIGHBORS + 1:
            skipped.append(int(ring))
            continue
        pts = scan.xyz[idx]
        c = ring_curvature(pts)
        rng = np.linalg.norm(pts, axis=1)
        # depth jumps and gaps make curvature meaningless
        step = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        jump = np.zeros(len(idx), bool)
        big = step > cfg.jump_ratio * np.minimum(rng[:-1], rng[1:])
        jump[:-1] |= big
        jump[1:] |= big
        # a jump anywhere in the window spoils the curvature
        spoiled = np.convolve(jump.astype(int), np.ones(2 * NEIGHBORS + 1, int), "same") > 0
        valid = np.isfinite(c) & ~spoiled
        grazing = _grazing(pts, cfg.grazing_cos)
        lo, hi = NEIGHBORS, len(idx) - NEIGHBORS
        bounds = np.linspace(lo, hi, cfg.sectors + 1).astype(int)
        for s in range(cfg.sectors):
            a, b = bounds[s], bounds[s + 1]
            if b <= a:
                continue
            local = np.arange(a, b)
            cc = np.where(valid[local], c[local], np.nan)
            taken = np.zeros(len(idx), bool)
            desc = local[np.argsort(-np.nan_to_num(cc, nan=-1.0), kind="stable")]
            edges = _pick(desc, valid & ~grazing & (np.nan_to_num(c, nan=-1.0) > cfg.edge_threshold),
                          cfg.max_edge_per_sector, cfg.suppress, taken)
            asc = local[np.argsort(np.nan_to_num(cc, nan=np.inf), kind="stable")]
            planars = _pick(asc, valid & (np.nan_to_num(c, nan=np.inf) < cfg.planar_threshold),
                            cfg.max_planar_per_sector, cfg.suppress, taken)
            for j in edges:
                sel_idx.append(idx[j]); sel_edge.append(True); sel_c.append(c[j])
            for j in planars:
                sel_idx.append(idx[j]); sel_edge.append(False); sel_c.append(c[j])
    if not sel_idx:
        f = Features.empty()
        f.skipped_rings = skipped
        return f
    order = np.argsort(np.asarray(sel_idx), kind="stable")
    ii = np.asarray(sel_idx)[order]
    return Features(scan.tau[ii], scan.xyz[ii], np.asarray(sel_c)[order],
                    np.asarray(sel_edge)[order], ii, skipped)


# --- continuous-time transforms -------------------------------------------

def lidar_poses(traj: Trajectory, ext: RigidTransform, times):
    """Rotations ``(N, 3, 3)`` and translations ``(N, 3)`` of T_GL at ``times``."""
    s = traj.evaluate(np.asarray(times, dtype=float))
    R = s.R @ ext.rotation
    p = s.p + s.R @ ext.translation
    return R, p


def points_to_global(traj: Trajectory, ext: RigidTransform, times, xyz) -> np.ndarray:
    R, p = lidar_poses(traj, ext, times)
    return np.einsum("nij,nj->ni", R, xyz) + p


def undistort_points(traj: Trajectory, ext: RigidTransform, t_start: float, tau, xyz) -> np.ndarray:
    """Express every point in the LiDAR frame at ``t_start``."""
    xg = points_to_global(traj, ext, t_start + np.asarray(tau, dtype=float), xyz)
    T0 = traj.lidar_pose_at(ext, t_start).inverse()
    return T0.apply(xg)


def undistort_scan(scan: Scan, traj: Trajectory, ext: RigidTransform) -> np.ndarray:
    return undistort_points(traj, ext, scan.t_start, scan.tau, scan.xyz)


# --- association -----------------------------------------------------------

@dataclass
class AssociationConfig:
    neighbors: int = 5
    max_nn_distance: float = 1.0
    max_plane_distance: float = 0.2
    edge_eig_ratio: float = 3.0
    plane_flatness: float = 0.02
    # rms of neighbours about the fitted plane; rejects fits bent over a corner
    max_plane_rms: float = 0.05


class Submap:
    """Global-frame feature clouds with one k-d tree per kind."""

    def __init__(self, edge_points, planar_points, keyscan_ids=()):
        self.edge_points = np.asarray(edge_points, dtype=float).reshape(-1, 3)
        self.planar_points = np.asarray(planar_points, dtype=float).reshape(-1, 3)
        self.keyscan_ids = list(keyscan_ids)
        self.edge_tree = cKDTree(self.edge_points) if len(self.edge_points) else None
        self.planar_tree = cKDTree(self.planar_points) if len(self.planar_points) else None

    def __len__(self) -> int:
        return len(self.edge_points) + len(self.planar_points)


@dataclass
class Correspondences:
    """Feature points with their geometric targets.

    ``is_plane`` rows use ``direction`` as the unit plane normal and ``offset``
    as d in ``n.x + d = 0``; edge rows use ``anchor`` and ``direction`` as a
    point on the line and its unit direction.
    """

    tau: np.ndarray
    xyz: np.ndarray
    is_plane: np.ndarray
    direction: np.ndarray
    offset: np.ndarray
    anchor: np.ndarray

    def __len__(self) -> int:
        return len(self.tau)

    @classmethod
    def empty(cls) -> "Correspondences":
        return cls(np.zeros(0), np.zeros((0, 3)), np.zeros(0, bool), np.zeros((0, 3)),
                   np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def concat(cls, parts) -> "Correspondences":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("tau", "xyz", "is_plane", "direction", "offset", "anchor")))

    def subset(self, mask) -> "Correspondences":
        return Correspondences(self.tau[mask], self.xyz[mask], self.is_plane[mask],
                               self.direction[mask], self.offset[mask], self.anchor[mask])


def _neighbors(tree, pts, k):
    k_eff = min(k, tree.n)
    dist, idx = tree.query(pts, k=k_eff)
    dist = np.asarray(dist).reshape(len(pts), k_eff)
    idx = np.asarray(idx).reshape(len(pts), k_eff)
    # stable tie-break: distance, then lowest index
    order = np.lexsort((idx, dist), axis=-1) if k_eff > 1 else np.zeros_like(idx)
    return np.take_along_axis(dist, order, 1), np.take_along_axis(idx, order, 1)


def _pca(points):
    centroid = points.mean(axis=1)
    X = points - centroid[:, None, :]
    cov = np.einsum("nki,nkj->nij", X, X) / points.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    return centroid, evals, evecs


def associate(features: Features, submap: Submap | None, traj: Trajectory,
              ext: RigidTransform, t_start: float,
              cfg: AssociationConfig | None = None) -> Correspondences:
    """Match features to planes/lines fitted to their nearest submap neighbors."""
    cfg = cfg or AssociationConfig()
    if submap is None or len(submap) == 0 or len(features) == 0:
        return Correspondences.empty()
    xg = points_to_global(traj, ext, t_start + features.tau, features.xyz)
    parts = []

    planar = ~features.is_edge
    if np.any(planar) and submap.planar_tree is not None and submap.planar_tree.n >= cfg.neighbors:
        sel = np.flatnonzero(planar)
        dist, idx = _neighbors(submap.planar_tree, xg[sel], cfg.neighbors)
        ok = dist[:, -1] <= cfg.max_nn_distance
        sel, idx = sel[ok], idx[ok]
        if len(sel):
            nb = submap.planar_points[idx]
            centroid, evals, evecs = _pca(nb)
            normal = evecs[:, :, 0]
            d = -np.einsum("ni,ni->n", normal, centroid)
            resid = np.abs(np.einsum("nki,ni->nk", nb, normal) + d[:, None])
            # the query point itself must also sit near the plane
            own = np.abs(np.einsum("ni,ni->n", normal, xg[sel]) + d)
            ok = (resid.max(axis=1) <= cfg.max_plane_distance) & \
                 (own <= cfg.max_plane_distance) & \
                 (evals[:, 1] >= cfg.plane_flatness * evals[:, 2]) & \
                 (np.sqrt(np.maximum(evals[:, 0], 0.0)) <= cfg.max_plane_rms)
            sel, normal, d = sel[ok], normal[ok], d[ok]
            parts.append(Correspondences(features.tau[sel], features.xyz[sel],
                                         np.ones(len(sel), bool), normal, d,
                                         np.zeros((len(sel), 3))))

    edge = features.is_edge
    if np.any(edge) and submap.edge_tree is not None and submap.edge_tree.n >= cfg.neighbors:
        sel = np.flatnonzero(edge)
        dist, idx = _neighbors(submap.edge_tree, xg[sel], cfg.neighbors)
        ok = dist[:, -1] <= cfg.max_nn_distance
        sel, idx = sel[ok], idx[ok]
        if len(sel):
            centroid, evals, evecs = _pca(submap.edge_points[idx])
            line_dist = np.linalg.norm(np.cross(xg[sel] - centroid, evecs[:, :, 2]), axis=1)
            ok = (evals[:, 2] >= cfg.edge_eig_ratio * evals[:, 1]) & \
                 (line_dist <= cfg.max_plane_distance)
            sel = sel[ok]
            parts.append(Correspondences(features.tau[sel], features.xyz[sel],
                                         np.zeros(len(sel), bool), evecs[ok][:, :, 2],
                                         np.zeros(len(sel)), centroid[ok]))
    return Correspondences.concat(parts)


def project_residual(xg, corr: Correspondences) -> np.ndarray:
    """Signed point-to-plane distance or unsigned point-to-line distance."""
    plane = np.einsum("ni,ni->n", corr.direction, xg) + corr.offset
    line = np.linalg.norm(np.cross(xg - corr.anchor, corr.direction), axis=1)
    return np.where(corr.is_plane, plane, line)


def lidar_residual(corr: Correspondences, traj: Trajectory, ext: RigidTransform,
                   t_start: float) -> np.ndarray:
    xg = points_to_global(traj, ext, t_start + corr.tau, corr.xyz)
    return project_residual(xg, corr)
