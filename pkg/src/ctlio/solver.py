"""Dense Levenberg-Marquardt over Euclidean and SO(3) parameter blocks.

Residual functions receive the current values of the blocks they reference
(in the order given at registration) and return a 1-D residual vector.
Jacobians are central differences; SO(3) blocks are perturbed on the right,
``R exp(delta)``, and updated the same way.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .geometry import exp_so3

log = logging.getLogger(__name__)

EUCLIDEAN = "euclidean"
SO3 = "so3"

DAMPING_MIN = 1e-12
DAMPING_MAX = 1e6


class NonFiniteResidualError(FloatingPointError):
    pass


@dataclass
class Huber:
    """Huber loss on the whitened residual; ``delta`` is in whitened units."""

    delta: float | np.ndarray

    def weights(self, e):
        """Per-element cost contribution ``rho(e^2)`` and ``sqrt(rho')``.

        ``delta`` may be an array matching ``e``; ``inf`` entries disable the loss.
        """
        a = np.abs(e)
        delta = np.asarray(self.delta, dtype=float)
        inlier = a <= delta
        with np.errstate(invalid="ignore", over="ignore"):
            rho = np.where(inlier, e * e, 2.0 * delta * a - delta ** 2)
            scale = np.where(inlier, 1.0, np.sqrt(delta / np.maximum(a, 1e-300)))
        return rho, scale


@dataclass
class ParamBlock:
    id: object
    kind: str
    value: np.ndarray
    fixed: bool = False
    max_norm: float | None = None

    @property
    def dim(self) -> int:
        return 3 if self.kind == SO3 else self.value.size


@dataclass
class ResidualBlock:
    fn: Callable[[Sequence[np.ndarray]], np.ndarray]
    block_ids: list
    weight: float | np.ndarray = 1.0
    loss: Huber | None = None
    name: str = ""


@dataclass
class SolverOptions:
    max_iter: int = 10
    cost_tol: float = 1e-6
    step_tol: float = 1e-8
    init_damping: float = 1e-4
    jacobian_step: float = 1e-6
    trace_path: str | None = None


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    termination: str
    gradient_norm: float
    trace: list = field(default_factory=list)

    @property
    def accepted_costs(self):
        return [row[1] for row in self.trace if row[4]]


def retract(kind, value, delta):
    if kind == SO3:
        return value @ exp_so3(delta)
    return value + delta.reshape(value.shape)


class Problem:
    def __init__(self):
        self.blocks: dict = {}
        self.residuals: list[ResidualBlock] = []

    def add_parameter_block(self, block_id, value, kind: str | None = None,
                            fixed: bool = False, max_norm: float | None = None) -> ParamBlock:
        value = np.array(value, dtype=float)
        if kind is None:
            kind = SO3 if value.shape == (3, 3) else EUCLIDEAN
        if kind not in (EUCLIDEAN, SO3):
            raise ValueError(f"unknown block kind {kind!r}")
        if block_id in self.blocks:
            raise KeyError(f"duplicate parameter block {block_id!r}")
        block = ParamBlock(block_id, kind, value, fixed, max_norm)
        self.blocks[block_id] = block
        return block

    def add_residual_block(self, fn, block_ids, weight=1.0, loss=None, name="") -> ResidualBlock:
        for b in block_ids:
            if b not in self.blocks:
                raise KeyError(f"residual {name!r} references unknown block {b!r}")
        w = np.asarray(weight, dtype=float)
        if np.any(w <= 0):
            raise ValueError("residual weights must be positive")
        rb = ResidualBlock(fn, list(block_ids), weight, loss, name)
        self.residuals.append(rb)
        return rb

    def set_fixed(self, block_id, fixed: bool = True) -> None:
        self.blocks[block_id].fixed = fixed

    def value(self, block_id) -> np.ndarray:
        return self.blocks[block_id].value

    def free_blocks(self) -> list[ParamBlock]:
        return [b for b in self.blocks.values() if not b.fixed]

    # -- evaluation ----------------------------------------------------------

    def _values(self, rb, values):
        return [values[b] for b in rb.block_ids]

    def _whiten(self, rb, r):
        e = np.asarray(rb.weight) * r
        if rb.loss is None:
            return e, float(e @ e), np.ones_like(e)
        rho, scale = rb.loss.weights(e)
        return e, float(np.sum(rho)), scale

    def cost(self, values=None) -> float:
        values = values or {k: b.value for k, b in self.blocks.items()}
        total = 0.0
        for rb in self.residuals:
            r = np.atleast_1d(np.asarray(rb.fn(self._values(rb, values)), dtype=float))
            total += self._whiten(rb, r)[1]
        return 0.5 * total

    def linearize(self, h: float):
        """Whitened, robustified residual vector and Jacobian over free blocks."""
        free = self.free_blocks()
        offsets = {}
        n = 0
        for b in free:
            offsets[b.id] = n
            n += b.dim
        values = {k: b.value for k, b in self.blocks.items()}
        rows, jac_rows, cost = [], [], 0.0
        for rb in self.residuals:
            vals = self._values(rb, values)
            r = np.atleast_1d(np.asarray(rb.fn(vals), dtype=float))
            if not np.all(np.isfinite(r)):
                raise NonFiniteResidualError(f"residual {rb.name!r} is not finite")
            e, c, scale = self._whiten(rb, r)
            cost += c
            Jb = np.zeros((r.size, n))
            kinds = [self.blocks[b].kind for b in rb.block_ids]
            fixed = [self.blocks[b].fixed for b in rb.block_ids]
            Jloc = numeric_jacobian(rb.fn, vals, kinds, fixed, h, names=rb.block_ids)
            col = 0
            for bid, fx in zip(rb.block_ids, fixed):
                if fx:
                    continue
                d = self.blocks[bid].dim
                Jb[:, offsets[bid]:offsets[bid] + d] += Jloc[:, col:col + d]
                col += d
            w = np.asarray(rb.weight, dtype=float)
            Jb *= (w * scale)[:, None] if w.ndim else w * scale[:, None]
            rows.append(e * scale)
            jac_rows.append(Jb)
        r = np.concatenate(rows) if rows else np.zeros(0)
        J = np.vstack(jac_rows) if jac_rows else np.zeros((0, n))
        return r, J, 0.5 * cost, free, offsets


def numeric_jacobian(fn, values, kinds, fixed=None, h: float = 1e-6, names=None) -> np.ndarray:
    """Central-difference Jacobian of ``fn(values)`` w.r.t. the non-fixed blocks.

    Columns of fixed blocks are omitted; SO(3) blocks contribute 3 tangent
    columns each.
    """
    fixed = fixed or [False] * len(values)
    names = names or list(range(len(values)))
    values = list(values)
    cols = []
    for bi, (val, kind, fx) in enumerate(zip(values, kinds, fixed)):
        if fx:
            continue
        dim = 3 if kind == SO3 else np.size(val)
        for d in range(dim):
            delta = np.zeros(dim)
            delta[d] = h
            vp, vm = list(values), list(values)
            vp[bi] = retract(kind, val, delta)
            vm[bi] = retract(kind, val, -delta)
            rp = np.atleast_1d(np.asarray(fn(vp), dtype=float))
            rm = np.atleast_1d(np.asarray(fn(vm), dtype=float))
            if not (np.all(np.isfinite(rp)) and np.all(np.isfinite(rm))):
                raise NonFiniteResidualError(f"non-finite residual perturbing block {names[bi]!r}")
            cols.append((rp - rm) / (2.0 * h))
    if not cols:
        r = np.atleast_1d(np.asarray(fn(values), dtype=float))
        return np.zeros((r.size, 0))
    return np.stack(cols, axis=1)


def _apply_step(problem, free, offsets, step):
    out = {k: b.value for k, b in problem.blocks.items()}
    for b in free:
        o = offsets[b.id]
        v = retract(b.kind, b.value, step[o:o + b.dim])
        if b.max_norm is not None:
            nrm = np.linalg.norm(v)
            if nrm > b.max_norm:
                v = v * (b.max_norm / nrm)
        out[b.id] = v
    return out


def solve(problem: Problem, options: SolverOptions | None = None) -> SolveReport:
    """Minimize ``0.5 * sum rho(||W r||^2)`` by Levenberg-Marquardt."""
    opt = options or SolverOptions()
    cost0 = problem.cost()
    free = problem.free_blocks()
    if not free or not problem.residuals:
        report = SolveReport(0, cost0, cost0, "converged", 0.0)
        _dump_trace(report, opt)
        return report

    r, J, cost, free, offsets = problem.linearize(opt.jacobian_step)
    g = J.T @ r
    mu = opt.init_damping
    trace = [(0, cost, mu, 0.0, True)]
    termination = "max_iter"
    it = 0
    if cost == 0.0 or np.max(np.abs(g)) < 1e-15:
        termination = "converged"
    while termination == "max_iter" and it < opt.max_iter:
        it += 1
        H = J.T @ J
        D = np.clip(np.diag(H), 1e-6, 1e32)
        try:
            step = -cho_solve(cho_factor(H + mu * np.diag(D)), g)
        except LinAlgError:
            mu = mu * 2.0
            trace.append((it, cost, mu, float("nan"), False))
            if mu > DAMPING_MAX:
                termination = "stalled"
            continue
        step_norm = float(np.linalg.norm(step))
        tiny = step_norm < opt.step_tol
        trial = _apply_step(problem, free, offsets, step)
        new_cost = problem.cost(trial)
        if np.isfinite(new_cost) and new_cost < cost:
            for b in free:
                b.value = trial[b.id]
            rel = (cost - new_cost) / cost
            mu = max(mu * 0.5, DAMPING_MIN)
            trace.append((it, new_cost, mu, step_norm, True))
            if tiny:
                cost = new_cost
                termination = "converged"
                break
            r, J, cost, free, offsets = problem.linearize(opt.jacobian_step)
            g = J.T @ r
            if rel < opt.cost_tol or cost == 0.0:
                termination = "converged"
        elif tiny:
            trace.append((it, cost, mu, step_norm, False))
            termination = "converged"
        else:
            mu = mu * 2.0
            trace.append((it, cost, mu, step_norm, False))
            if mu > DAMPING_MAX:
                termination = "stalled"
    report = SolveReport(it, cost0, cost, termination, float(np.linalg.norm(g)), trace)
    log.debug("LM %s after %d iterations: %.3e -> %.3e", termination, it, cost0, cost)
    _dump_trace(report, opt)
    return report


def _dump_trace(report: SolveReport, opt: SolverOptions) -> None:
    if not opt.trace_path:
        return
    with open(opt.trace_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "cost", "damping", "step_norm"])
        for it, cost, mu, step, _ in report.trace:
            w.writerow([it, repr(cost), repr(mu), repr(step)])
