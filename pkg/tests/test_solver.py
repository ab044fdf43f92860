import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctlio.geometry import exp_so3, hat, log_so3
from ctlio.imu import ImuBias, ImuData, accel_residual, predicted_accel
from ctlio.solver import (Huber, NonFiniteResidualError, Problem, SolverOptions, numeric_jacobian,
                          solve)
from ctlio.trajectory import Trajectory

from oracles import random_trajectory


def linear_problem(seed=0, m=10, n=4, weights=None, order=None):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(m, n))
    y = rng.normal(size=m)
    p = Problem()
    # split x into blocks of one and three to exercise offsets
    blocks = [("a", slice(0, 1)), ("b", slice(1, n))]
    if order == "reversed":
        blocks = blocks[::-1]
    for name, sl in blocks:
        p.add_parameter_block(name, np.zeros(sl.stop - sl.start))
    w = np.ones(m) if weights is None else weights
    p.add_residual_block(lambda v: A @ np.concatenate([v[0], v[1]]) - y, ["a", "b"], weight=w)
    return p, A, y, w


def closed_form(A, y, w):
    W = np.diag(w ** 2)
    return np.linalg.solve(A.T @ W @ A, A.T @ W @ y)


class TestNumericJacobian:
    def test_square_derivative(self):
        J = numeric_jacobian(lambda v: v[0] ** 2, [np.array([3.0])], ["euclidean"])
        assert J[0, 0] == pytest.approx(6.0, abs=1e-6)

    def test_fixed_block_columns_are_omitted(self):
        fn = lambda v: np.array([v[0][0] * v[1][0], v[0][1] + v[1][1]])
        vals = [np.array([2.0, 3.0]), np.array([5.0, 7.0])]
        J = numeric_jacobian(fn, vals, ["euclidean"] * 2, fixed=[True, False])
        np.testing.assert_allclose(J, [[2.0, 0.0], [0.0, 1.0]], atol=1e-8)

    def test_so3_right_perturbation(self):
        # d/d delta of R Exp(delta) a is -R hat(a)
        R = exp_so3([0.3, -0.2, 0.5])
        a = np.array([1.0, 2.0, 3.0])
        J = numeric_jacobian(lambda v: v[0] @ a, [R], ["so3"])
        np.testing.assert_allclose(J, -R @ hat(a), atol=1e-8)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_names_the_block(self):
        fn = lambda v: np.array([1.0 / (v[0][0] - 1.0)])
        with pytest.raises(NonFiniteResidualError, match="speed"):
            numeric_jacobian(fn, [np.array([1.0 - 1e-6])], ["euclidean"], names=["speed"], h=1e-6)

    def test_accel_residual_jacobian_is_step_consistent(self):
        traj = random_trajectory(np.random.default_rng(2), n_control=6, rot_scale=0.2)
        t = np.linspace(*traj.interval, 12)
        s = traj.evaluate(t, derivatives=True)
        imu = ImuData(t, s.omega, predicted_accel(s.R, s.a) + 0.1)
        grid = traj.grid

        def fn(vals):
            tr = Trajectory(grid, vals[:6], vals[6:])
            return accel_residual(tr, imu, ImuBias()).ravel()

        vals = list(traj.rotations) + list(traj.positions)
        kinds = ["so3"] * 6 + ["euclidean"] * 6
        J1 = numeric_jacobian(fn, vals, kinds, h=1e-5)
        J2 = numeric_jacobian(fn, vals, kinds, h=2e-5)
        assert np.abs(J1 - J2).max() <= 1e-4 * max(1.0, np.abs(J1).max())


class TestSolve:
    def test_linear_least_squares(self):
        p, A, y, w = linear_problem()
        rep = solve(p, SolverOptions(max_iter=50, cost_tol=1e-12))
        x = np.concatenate([p.value("a"), p.value("b")])
        np.testing.assert_allclose(x, closed_form(A, y, w), atol=1e-8)
        assert rep.final_cost <= rep.initial_cost

    def test_weighted_linear_least_squares(self):
        w = np.linspace(0.5, 3.0, 10)
        p, A, y, w = linear_problem(seed=1, weights=w)
        solve(p, SolverOptions(max_iter=50, cost_tol=1e-12))
        x = np.concatenate([p.value("a"), p.value("b")])
        np.testing.assert_allclose(x, closed_form(A, y, w), atol=1e-8)

    def test_registration_order_does_not_matter(self):
        a, *_ = linear_problem(seed=3)
        b, *_ = linear_problem(seed=3, order="reversed")
        opts = SolverOptions(max_iter=50, cost_tol=1e-12)
        solve(a, opts)
        solve(b, opts)
        np.testing.assert_allclose(a.value("b"), b.value("b"), atol=1e-10)

    def test_so3_geodesic(self):
        target = exp_so3([0.2, -0.4, 0.9])
        start = target @ exp_so3(np.radians(30) * np.array([1.0, 1.0, 0.0]) / np.sqrt(2))
        p = Problem()
        p.add_parameter_block("R", start, "so3")
        p.add_residual_block(lambda v: log_so3(target.T @ v[0]), ["R"])
        solve(p, SolverOptions(max_iter=50, cost_tol=1e-15))
        assert np.linalg.norm(log_so3(target.T @ p.value("R"))) < 1e-9
        R = p.value("R")
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)

    def test_all_fixed_is_a_no_op(self):
        p = Problem()
        p.add_parameter_block("x", [1.0, 2.0], fixed=True)
        p.add_residual_block(lambda v: v[0] - 5.0, ["x"])
        rep = solve(p)
        assert rep.iterations == 0
        assert rep.final_cost == rep.initial_cost == pytest.approx(0.5 * (16 + 9))
        np.testing.assert_array_equal(p.value("x"), [1.0, 2.0])

    def test_fixed_blocks_never_change(self):
        p = Problem()
        p.add_parameter_block("a", [1.0])
        p.add_parameter_block("b", [4.0], fixed=True)
        p.add_residual_block(lambda v: np.array([v[0][0] + v[1][0] - 2.0, v[0][0] - 0.5]),
                             ["a", "b"])
        solve(p, SolverOptions(max_iter=30))
        assert p.value("b")[0] == 4.0

    def test_rank_deficient_does_not_crash(self):
        p = Problem()
        p.add_parameter_block("x", [0.0, 0.0])
        # only x0 + x1 is observed
        p.add_residual_block(lambda v: np.array([v[0].sum() - 1.0]), ["x"])
        rep = solve(p, SolverOptions(max_iter=20))
        assert p.value("x").sum() == pytest.approx(1.0, abs=1e-6)
        assert rep.termination in ("converged", "max_iter", "stalled")

    def test_max_norm_box(self):
        p = Problem()
        p.add_parameter_block("b", [0.0, 0.0, 0.0], max_norm=0.1)
        p.add_residual_block(lambda v: v[0] - [3.0, 0.0, 0.0], ["b"])
        solve(p, SolverOptions(max_iter=30))
        assert np.linalg.norm(p.value("b")) <= 0.1 + 1e-15

    def test_huber_downweights_outlier(self):
        y = np.array([0.0, 0.1, -0.1, 0.05, 10.0])

        def run(loss):
            p = Problem()
            p.add_parameter_block("m", [0.0])
            p.add_residual_block(lambda v: v[0][0] - y, ["m"], loss=loss)
            solve(p, SolverOptions(max_iter=100, cost_tol=1e-14))
            return p.value("m")[0]

        assert run(None) == pytest.approx(y.mean())
        assert abs(run(Huber(0.2))) < 0.2

    def test_rejects_bad_registration(self):
        p = Problem()
        p.add_parameter_block("x", [0.0])
        with pytest.raises(KeyError):
            p.add_parameter_block("x", [0.0])
        with pytest.raises(KeyError):
            p.add_residual_block(lambda v: v[0], ["y"])
        with pytest.raises(ValueError):
            p.add_residual_block(lambda v: v[0], ["x"], weight=0.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_residual_raises(self):
        p = Problem()
        p.add_parameter_block("x", [1.0])
        p.add_residual_block(lambda v: np.log(v[0] - 1.0), ["x"])
        with pytest.raises(NonFiniteResidualError):
            solve(p)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_accepted_cost_is_non_increasing(seed):
    rng = np.random.default_rng(seed)
    target = exp_so3(rng.normal(size=3))
    pts = rng.normal(size=(6, 3))
    obs = pts @ target.T + rng.normal(scale=0.01, size=pts.shape)
    p = Problem()
    p.add_parameter_block("R", exp_so3(rng.normal(size=3)), "so3")
    p.add_residual_block(lambda v: (pts @ v[0].T - obs).ravel(), ["R"])
    rep = solve(p, SolverOptions(max_iter=30))
    costs = rep.accepted_costs
    assert all(b <= a for a, b in zip(costs, costs[1:]))
    assert rep.final_cost <= rep.initial_cost
    mus = [row[2] for row in rep.trace]
    assert all(1e-12 <= m <= 2e6 for m in mus)


def test_trace_dump(tmp_path):
    p, *_ = linear_problem()
    path = tmp_path / "trace.csv"
    rep = solve(p, SolverOptions(max_iter=5, trace_path=str(path)))
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["iter", "cost", "damping", "step_norm"]
    assert len(rows) == len(rep.trace) + 1
