"""Uniform cumulative B-splines on R^3 and SO(3).

A segment ``i`` covers ``[t0 + i*dt, t0 + (i+1)*dt)`` and is controlled by the
``k`` control points ``i .. i+k-1``. Basis matrices are built once per order
from the Cox-de Boor recurrence in exact rational arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .geometry import exp_so3, log_so3_batch, vee


TIME_TOLERANCE = 1e-12


class OutOfRangeError(ValueError):
    """Query time outside the evaluable interval of a spline."""

    def __init__(self, t, start, end):
        super().__init__(f"t={t!r} outside evaluable range [{start!r}, {end!r}]")
        self.t = t
        self.interval = (start, end)


# --- basis machinery -------------------------------------------------------

def _pmul(a, b):
    out = [Fraction(0)] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i + j] += x * y
    return out


def _padd(a, b):
    n = max(len(a), len(b))
    a = list(a) + [Fraction(0)] * (n - len(a))
    b = list(b) + [Fraction(0)] * (n - len(b))
    return [x + y for x, y in zip(a, b)]


def _cardinal_pieces(k):
    """Polynomial pieces of the cardinal B-spline of order ``k`` on ``[0, k)``.

    ``pieces[m]`` holds coefficients (ascending powers of x) valid on
    ``[m, m+1)``.
    """
    # order 1: indicator of [j, j+1) for the shifted copy starting at j
    # basis[j][m] = poly of N_{j,order} on [m, m+1)
    basis = {j: {j: [Fraction(1)]} for j in range(k)}
    for order in range(2, k + 1):
        new = {}
        for j in range(k - order + 1):
            pieces = {}
            denom = Fraction(order - 1)
            left = basis[j]
            right = basis[j + 1]
            # (x - j)/(order-1) * N_j + (j + order - x)/(order-1) * N_{j+1}
            for m, poly in left.items():
                term = _pmul([Fraction(-j) / denom, 1 / denom], poly)
                pieces[m] = _padd(pieces.get(m, []), term)
            for m, poly in right.items():
                term = _pmul([Fraction(j + order) / denom, -1 / denom], poly)
                pieces[m] = _padd(pieces.get(m, []), term)
            new[j] = pieces
        basis = new
    return basis[0]


def _shift(poly, c):
    """Coefficients of ``p(u + c)``."""
    out = [Fraction(0)]
    power = [Fraction(1)]
    for a in poly:
        out = _padd(out, [a * x for x in power])
        power = _pmul(power, [Fraction(c), Fraction(1)])
    return out


@lru_cache(maxsize=None)
def _blending_fractions(k: int):
    if k < 2:
        raise ValueError(f"unsupported spline order {k}")
    pieces = _cardinal_pieces(k)
    rows = []
    for j in range(k):
        # control point i+j sees the cardinal spline on [k-1-j, k-j)
        m = k - 1 - j
        poly = _shift(pieces[m], m)
        rows.append((poly + [Fraction(0)] * k)[:k])
    return rows


def _readonly(rows) -> np.ndarray:
    M = np.array([[float(c) for c in r] for r in rows])
    M.setflags(write=False)
    return M


@lru_cache(maxsize=None)
def blending_matrix(k: int) -> np.ndarray:
    """Basic-form matrix ``M`` with ``phi(u) = M @ [1, u, ..., u^(k-1)]``.

    Row ``j`` is the weight of control point ``i+j`` on segment ``i``.
    """
    return _readonly(_blending_fractions(k))


@lru_cache(maxsize=None)
def cumulative_blending_matrix(k: int) -> np.ndarray:
    """Row ``j`` is the sum of basic-form rows ``j..k-1``, summed exactly."""
    rows = _blending_fractions(k)
    return _readonly([[sum(col) for col in zip(*rows[j:])] for j in range(k)])


@dataclass(frozen=True)
class CumulativeBasis:
    lam: np.ndarray
    dlam: np.ndarray
    ddlam: np.ndarray


def _powers(u, k):
    u = np.asarray(u, dtype=float)
    n = np.arange(k)
    U = u[..., None] ** n
    dU = np.zeros_like(U)
    ddU = np.zeros_like(U)
    if k > 1:
        dU[..., 1:] = n[1:] * u[..., None] ** (n[1:] - 1)
    if k > 2:
        ddU[..., 2:] = n[2:] * (n[2:] - 1) * u[..., None] ** (n[2:] - 2)
    return U, dU, ddU


def cumulative_basis(u, k: int = 4, dt: float = 1.0) -> CumulativeBasis:
    """Cumulative coefficients and their time derivatives.

    ``u`` may be a scalar or an array; outputs gain a trailing axis of size k.
    """
    if k < 2:
        raise ValueError(f"unsupported spline order {k}")
    u = np.asarray(u, dtype=float)
    if np.any(u < 0.0) or np.any(u > 1.0):
        raise ValueError("normalized time must lie in [0, 1)")
    Mc = cumulative_blending_matrix(k)
    U, dU, ddU = _powers(u, k)
    return CumulativeBasis(U @ Mc.T, dU @ Mc.T / dt, ddU @ Mc.T / (dt * dt))


# --- splines ---------------------------------------------------------------

@dataclass(frozen=True)
class KnotGrid:
    t0: float
    dt: float
    order: int = 4

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("knot distance must be positive")
        if self.order < 2:
            raise ValueError(f"unsupported spline order {self.order}")

    def knot(self, i) -> float:
        return self.t0 + i * self.dt

    def end(self, n_control: int) -> float:
        """Upper end of the evaluable range for ``n_control`` points."""
        return self.t0 + (n_control - self.order + 1) * self.dt

    def locate(self, t, n_control: int):
        """Segment index and normalized time ``(i, u)`` for scalar or array t.

        The range end itself is accepted and maps to the last segment at u=1.
        """
        t = np.asarray(t, dtype=float)
        n_seg = n_control - self.order + 1
        s = (t - self.t0) / self.dt
        end = self.end(n_control)
        # rounding slack so that e.g. 1.1 + 0.1 still counts as 1.2
        tol = TIME_TOLERANCE * max(1.0, abs(end))
        outside = (t < self.t0 - tol) | (t > end + tol)
        if n_seg < 1 or np.any(outside):
            bad = np.ravel(t)[np.ravel(outside)] if np.any(outside) else np.ravel(t)
            raise OutOfRangeError(float(bad[0]) if bad.size else float("nan"),
                                  float(self.t0), float(end))
        i = np.clip(np.floor(s).astype(int), 0, n_seg - 1)
        u = np.clip(s - i, 0.0, 1.0)
        return i, u


class SplineR3:
    """Cumulative B-spline in R^3 with analytic time derivatives."""

    def __init__(self, grid: KnotGrid, control_points):
        self.grid = grid
        self.control_points = np.array(control_points, dtype=float).reshape(-1, 3)

    @property
    def n_control(self) -> int:
        return len(self.control_points)

    @property
    def interval(self):
        return self.grid.t0, self.grid.end(self.n_control)

    def _eval(self, t, order):
        k = self.grid.order
        i, u = self.grid.locate(t, self.n_control)
        idx = i[..., None] + np.arange(k)
        P = self.control_points[idx]  # (..., k, 3)
        d = P[..., 1:, :] - P[..., :-1, :]
        B = cumulative_basis(u, k, self.grid.dt)
        if order == 0:
            return P[..., 0, :] + np.einsum("...j,...jc->...c", B.lam[..., 1:], d)
        coeff = B.dlam if order == 1 else B.ddlam
        return np.einsum("...j,...jc->...c", coeff[..., 1:], d)

    def position(self, t):
        return self._eval(t, 0)

    def velocity(self, t):
        return self._eval(t, 1)

    def acceleration(self, t):
        return self._eval(t, 2)


class SplineSO3:
    """Cumulative B-spline on SO(3); angular velocity is in the body frame."""

    def __init__(self, grid: KnotGrid, control_points):
        self.grid = grid
        self.control_points = np.array(control_points, dtype=float).reshape(-1, 3, 3)

    @property
    def n_control(self) -> int:
        return len(self.control_points)

    @property
    def interval(self):
        return self.grid.t0, self.grid.end(self.n_control)

    def evaluate(self, t, derivative: bool = False):
        """Rotation (and body angular velocity if ``derivative``) at ``t``."""
        k = self.grid.order
        i, u = self.grid.locate(t, self.n_control)
        Rs = self.control_points[i[..., None] + np.arange(k)]
        B = cumulative_basis(u, k, self.grid.dt)
        return so3_segment(Rs, B.lam, B.dlam if derivative else None)

    def rotation(self, t):
        return self.evaluate(t)[0]

    def angular_velocity(self, t):
        return self.evaluate(t, derivative=True)[1]


def so3_segment(Rs, lam, dlam=None):
    """Evaluate cumulative SO(3) segments.

    ``Rs`` is ``(..., k, 3, 3)`` control rotations, ``lam`` and ``dlam`` are
    ``(..., k)`` cumulative coefficients. Returns ``(R, omega)``; omega is None
    unless ``dlam`` is given.
    """
    k = Rs.shape[-3]
    rel = np.swapaxes(Rs[..., :-1, :, :], -1, -2) @ Rs[..., 1:, :, :]
    d = log_so3_batch(rel.reshape(-1, 3, 3)).reshape(rel.shape[:-2] + (3,))
    R = Rs[..., 0, :, :]
    omega = np.zeros(R.shape[:-1]) if dlam is not None else None
    for j in range(1, k):
        A = exp_so3(lam[..., j, None] * d[..., j - 1, :])
        R = R @ A
        if omega is not None:
            # body rate through the cumulative product: w_j = A_j^T w_{j-1} + dlam_j d_j
            omega = np.einsum("...ji,...j->...i", A, omega) + dlam[..., j, None] * d[..., j - 1, :]
    return R, omega


def basic_form_position(grid: KnotGrid, control_points, t):
    """Non-cumulative evaluation ``sum_j phi_j(u) p_{i+j}``."""
    P = np.asarray(control_points, dtype=float)
    i, u = grid.locate(t, len(P))
    U, _, _ = _powers(u, grid.order)
    phi = U @ blending_matrix(grid.order).T
    idx = i[..., None] + np.arange(grid.order)
    return np.einsum("...j,...jc->...c", phi, P[idx])


def angular_velocity_from_derivative(R, dR):
    """Body rate ``(R^T dR)_vee``."""
    return vee(np.swapaxes(R, -1, -2) @ dR)
