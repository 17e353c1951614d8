import numpy as np
import pytest

from gpcacc import gp, mld
from gpcacc.dynamics import ErrorState, VehicleParams, discrete_system
from gpcacc.miqp import QpProblem, check_solution, enumerate_solve, solve_miqp, solve_qp


def random_program(rng, N=None):
    N = N or int(rng.integers(1, 3))
    p = VehicleParams(tau=float(rng.uniform(0.5, 1.5)))
    x0 = ErrorState(float(rng.uniform(-3, 3)), float(rng.uniform(-3, 3)), float(rng.uniform(-2, 2)))
    v0 = float(rng.uniform(0.5, 25))
    plan = mld.PredecessorPlan(rng.uniform(-4, 3, N),
                               tuple(gp.discretize(float(rng.uniform(0, 1.5))) for _ in range(N)), "gp")
    beta = float(np.exp(rng.uniform(np.log(0.01 ** N), np.log(0.2))))
    return mld.build(x0, v0, p, discrete_system(p, 0.1), plan, u_prev=float(rng.uniform(-4, 3)),
                     horizon=N, chance_bound=beta)


def test_textbook_qp():
    # min (x-1)^2 + (y-2)^2 s.t. x + y <= 2 -> (0.5, 1.5)
    qp = QpProblem(2 * np.eye(2), np.array([-2.0, -4.0]), np.zeros((0, 2)), np.zeros(0),
                   np.array([[1.0, 1.0]]), np.array([2.0]), np.full(2, -10.0), np.full(2, 10.0))
    sol = solve_qp(qp)
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.x, [0.5, 1.5], atol=1e-6)
    assert sol.objective == pytest.approx(0.5 - 5.0, abs=1e-6)
    assert sol.stationarity < 1e-6 and sol.primal_residual < 1e-6 and sol.complementarity < 1e-6


def test_equality_constrained_qp():
    qp = QpProblem(np.eye(3), np.zeros(3), np.array([[1.0, 1.0, 1.0]]), np.array([3.0]),
                   np.zeros((0, 3)), np.zeros(0), np.full(3, -np.inf), np.full(3, np.inf))
    np.testing.assert_allclose(solve_qp(qp).x, [1, 1, 1], atol=1e-6)


def test_contradictory_bounds_infeasible():
    qp = QpProblem(np.eye(1), np.zeros(1), np.zeros((0, 1)), np.zeros(0),
                   np.array([[1.0]]), np.array([-1.0]), np.zeros(1), np.ones(1))
    assert solve_qp(qp).status == "infeasible"
    qp = QpProblem(np.eye(1), np.zeros(1), np.zeros((0, 1)), np.zeros(0),
                   np.zeros((0, 1)), np.zeros(0), np.ones(1), np.zeros(1))
    assert solve_qp(qp).status == "infeasible"


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        QpProblem(np.eye(2), np.zeros(3), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)),
                  np.zeros(0), np.zeros(3), np.ones(3))


def test_matches_enumeration_on_random_programs():
    rng = np.random.default_rng(2024)
    for _ in range(60):
        prog = random_program(rng)
        bb, ref = solve_miqp(prog), enumerate_solve(prog)
        assert (bb.z is None) == (ref.z is None)
        if ref.z is None:
            continue
        assert bb.objective == pytest.approx(ref.objective, rel=1e-6, abs=1e-6)
        assert check_solution(prog, bb.z)
        assert prog.objective(bb.z) == pytest.approx(bb.objective, rel=1e-6, abs=1e-6)


def test_deterministic():
    prog = random_program(np.random.default_rng(7), N=2)
    a, b = solve_miqp(prog, record_trace=True), solve_miqp(prog, record_trace=True)
    assert a.nodes == b.nodes and a.trace == b.trace
    np.testing.assert_array_equal(a.z, b.z)


def test_bound_never_exceeds_incumbent():
    rng = np.random.default_rng(9)
    for _ in range(10):
        sol = solve_miqp(random_program(rng, N=2), record_trace=True)
        if sol.z is None:
            continue
        root = sol.trace[0][2]
        assert root <= sol.objective + 1e-6
        assert sol.bound <= sol.objective + 1e-9


def test_infeasible_for_every_assignment():
    # already overlapping at 30 m/s closing speed: no braking keeps d >= 0.1
    p = VehicleParams(tau=0.7)
    prog = mld.build(ErrorState(-40.0, -20.0, 0.0), 25.0, p, discrete_system(p, 0.1),
                     mld.PredecessorPlan.deterministic(np.full(2, -4.0)), horizon=2, chance_bound=1.0)
    assert enumerate_solve(prog).status == "infeasible"
    assert solve_miqp(prog).status == "infeasible"


def test_budget_exhaustion_reports_gap():
    prog = random_program(np.random.default_rng(1), N=7)
    sol = solve_miqp(prog, node_budget=2)
    assert sol.status == "budget" and sol.nodes <= 2 + 1
    assert sol.gap >= 0 and check_solution(prog, sol.z)


def test_check_solution_rejects_fractional():
    prog = random_program(np.random.default_rng(3), N=1)
    sol = enumerate_solve(prog)
    if sol.z is None:
        pytest.skip("random program infeasible")
    z = sol.z.copy()
    z[prog.binary[0]] = 0.5
    assert not check_solution(prog, z)
    assert not check_solution(prog, None)


def test_enumeration_refuses_large_programs():
    with pytest.raises(ValueError):
        enumerate_solve(random_program(np.random.default_rng(0), N=7))
