"""IMU measurement model, strapdown integration and gravity alignment."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import exp_so3, normalize_rotation
from .trajectory import Trajectory

GRAVITY_NORM = 9.81
GRAVITY = np.array([0.0, 0.0, -GRAVITY_NORM])

ACCEL_BIAS_BOUND = 1.0
GYRO_BIAS_BOUND = 0.1


@dataclass
class ImuBias:
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.accel = np.asarray(self.accel, dtype=float).reshape(3)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(3)

    def copy(self) -> "ImuBias":
        return ImuBias(self.accel.copy(), self.gyro.copy())


@dataclass
class ImuData:
    """A stream of samples as column arrays: ``t (N,)``, ``gyro``/``accel`` ``(N, 3)``."""

    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.gyro) == len(self.accel)):
            raise ValueError("IMU column lengths differ")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("IMU timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t)

    def between(self, t_a: float, t_b: float, closed: bool = True) -> "ImuData":
        hi = self.t <= t_b if closed else self.t < t_b
        m = (self.t >= t_a) & hi
        return ImuData(self.t[m], self.gyro[m], self.accel[m])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "wx", "wy", "wz", "ax", "ay", "az"])
            for t, g, a in zip(self.t, self.gyro, self.accel):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in (*g, *a)])

    @classmethod
    def read_csv(cls, path) -> "ImuData":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["t", "wx", "wy", "wz", "ax", "ay", "az"]:
                raise ValueError(f"{path}: unexpected IMU header {header}")
            rows = [[float(x) for x in row] for row in reader if row]
        data = np.array(rows, dtype=float).reshape(-1, 7)
        return cls(data[:, 0], data[:, 1:4], data[:, 4:7])


@dataclass
class IntegratedStates:
    t: np.ndarray
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray


def _piecewise_gradient(y, t, breaks, tol: float = 1e-9):
    """Derivative seen from the left and from the right of every sample.

    Finite differences never straddle a time in ``breaks``. A sample within
    ``tol`` of a break belongs to the pieces on both sides of it.
    """
    n = len(t)
    # pieces as inclusive index ranges
    pieces, lo = [], 0
    for b in np.sort(np.asarray(breaks, dtype=float)):
        j = int(np.searchsorted(t, b - tol))
        if j >= n or j <= lo:
            continue
        if abs(t[j] - b) <= tol:
            if j < n - 1:
                pieces.append((lo, j))
                lo = j
        else:
            pieces.append((lo, j - 1))
            lo = j
    pieces.append((lo, n - 1))
    left, right = np.zeros_like(y), np.zeros_like(y)
    for lo, hi in pieces:
        m = hi - lo + 1
        if m >= 3:
            d = np.gradient(y[lo:hi + 1], t[lo:hi + 1], axis=0, edge_order=2)
        elif m == 2:
            d = np.repeat((y[hi] - y[lo])[None] / (t[hi] - t[lo]), 2, axis=0)
        else:
            d = np.zeros((1,) + y.shape[1:])
        left[lo:hi + 1] = d
        right[lo:hi + 1] = d
    # a shared sample was overwritten by the later piece: restore its left view
    for (lo_a, hi_a), (lo_b, _) in zip(pieces[:-1], pieces[1:]):
        if hi_a == lo_b:
            m = hi_a - lo_a + 1
            if m >= 3:
                left[hi_a] = np.gradient(y[lo_a:hi_a + 1], t[lo_a:hi_a + 1], axis=0,
                                         edge_order=2)[-1]
            else:
                left[hi_a] = (y[hi_a] - y[lo_a]) / (t[hi_a] - t[lo_a])
    return left, right


MIDPOINT = "midpoint"
HERMITE = "hermite"


def integrate(imu: ImuData, R0, p0, v0, t0: float, bias: ImuBias | None = None,
              gravity=GRAVITY, scheme: str = MIDPOINT, breaks=()) -> IntegratedStates:
    """Strapdown integration over sample pairs, one state per sample.

    ``midpoint`` averages the two samples of each step. ``hermite`` adds the
    endpoint-derivative correction of that rule (sample derivatives by finite
    differences) and the two-sample coning term, which makes it fourth order
    on smooth signals. ``breaks`` lists times where the signal may have a
    kink, spline knots say, so that differences never straddle them.

    The gap between ``t0`` and the first sample is bridged with that sample
    alone.
    """
    if scheme not in (MIDPOINT, HERMITE):
        raise ValueError(f"unknown integration scheme {scheme!r}")
    bias = bias or ImuBias()
    n = len(imu)
    R = np.empty((n, 3, 3))
    p = np.empty((n, 3))
    v = np.empty((n, 3))
    if n == 0:
        return IntegratedStates(imu.t.copy(), R, p, v)
    if t0 > imu.t[0]:
        raise ValueError("initial state is later than the first IMU sample")
    g = np.asarray(gravity, dtype=float)
    w = imu.gyro - bias.gyro
    f = imu.accel - bias.accel
    hermite = scheme == HERMITE
    if hermite:
        wd_l, wd_r = _piecewise_gradient(w, imu.t, breaks)
        fd_l, fd_r = _piecewise_gradient(f, imu.t, breaks)
    Rc, pc, vc = np.array(R0, dtype=float), np.array(p0, dtype=float), np.array(v0, dtype=float)
    t_prev = t0
    zero = np.zeros(3)
    # previous sample: angular rate and world acceleration with their derivatives
    w_a, wd_a = w[0], zero
    a_a, ad_a = Rc @ f[0] + g, zero
    for j in range(n):
        h = imu.t[j] - t_prev
        if h > 0:
            phi = 0.5 * h * (w_a + w[j])
            if hermite and j > 0:
                phi = phi + h * h / 12.0 * (wd_a - wd_l[j] + np.cross(w_a, w[j]))
            Rn = Rc @ exp_so3(phi)
            a_b = Rn @ f[j] + g
            if hermite and j > 0:
                ad_b = Rn @ (np.cross(w[j], f[j]) + fd_l[j])
                pc = pc + vc * h + h * h * (0.35 * a_a + 0.15 * a_b) + \
                    h ** 3 * (ad_a / 20.0 - ad_b / 30.0)
                vc = vc + 0.5 * h * (a_a + a_b) + h * h / 12.0 * (ad_a - ad_b)
            else:
                a_mid = 0.5 * (a_a + a_b)
                pc = pc + vc * h + 0.5 * a_mid * h * h
                vc = vc + a_mid * h
            Rc = Rn
        R[j], p[j], v[j] = Rc, pc, vc
        t_prev = imu.t[j]
        w_a = w[j]
        a_a = Rc @ f[j] + g
        if hermite:
            wd_a = wd_r[j]
            ad_a = Rc @ (np.cross(w[j], f[j]) + fd_r[j])
    return IntegratedStates(imu.t.copy(), R, p, v)


def accel_residual(traj: Trajectory, imu: ImuData, bias: ImuBias, gravity=GRAVITY) -> np.ndarray:
    """``R(t)^T (a(t) - g) - a_m + b_a`` for every sample, shape ``(N, 3)``."""
    s = traj.evaluate(imu.t, derivatives=True)
    return predicted_accel(s.R, s.a, gravity) - imu.accel + bias.accel


def gyro_residual(traj: Trajectory, imu: ImuData, bias: ImuBias) -> np.ndarray:
    """``omega(t) - w_m + b_w`` for every sample."""
    s = traj.evaluate(imu.t, derivatives=True)
    return s.omega - imu.gyro + bias.gyro


def predicted_accel(R, a, gravity=GRAVITY):
    return np.einsum("...ji,...j->...i", R, a - gravity)


def gravity_alignment(imu: ImuData, gravity=GRAVITY):
    """Roll/pitch from mean specific force of a stationary stretch (yaw = 0).

    Returns the body-to-global rotation and a bias guess: the mean gyro
    reading, and the accelerometer bias component along gravity (the excess
    of the mean specific-force magnitude over ``|g|``). Horizontal accel bias
    is indistinguishable from tilt here and is left at zero.
    """
    if len(imu) == 0:
        return np.eye(3), ImuBias(np.zeros(3), np.zeros(3))
    f = imu.accel.mean(axis=0)
    up_body = f / np.linalg.norm(f)
    # find R with R @ up_body = z, minimal rotation (no yaw component added)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(up_body, z)
    s = np.linalg.norm(axis)
    c = float(np.dot(up_body, z))
    if s < 1e-12:
        R = np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    else:
        R = exp_so3(axis / s * np.arctan2(s, c))
    excess = np.linalg.norm(f) - np.linalg.norm(gravity)
    return normalize_rotation(R), ImuBias(excess * up_body, imu.gyro.mean(axis=0))
