import itertools

import numpy as np
import pytest

from gpcacc import gp, mld
from gpcacc.dynamics import ErrorState, VehicleParams, discrete_system
from gpcacc.miqp import QpProblem, solve_miqp, solve_qp

P = VehicleParams(tau=0.7)
SYS = discrete_system(P, 0.1)


def gp_plan(std=0.3, accel=0.0, N=7):
    return mld.PredecessorPlan(np.full(N, accel), tuple(gp.discretize(std) for _ in range(N)), "gp")


def build(x0=ErrorState(0.0, 0.0, 0.0), v0=20.0, plan=None, N=7, **kw):
    plan = plan or gp_plan(N=N)
    return mld.build(x0, v0, P, SYS, plan, horizon=N, chance_bound=kw.pop("chance_bound", 0.01 ** N), **kw)


def row(program, name):
    r = program.row_names.index(name)
    return program.A_in[r], program.b_in[r]


def row_holds(program, name, values: dict):
    """Evaluate one inequality row on a partial assignment covering its support."""
    a, b = row(program, name)
    assert set(np.flatnonzero(a)) <= set(values), f"{name} touches unassigned variables"
    return sum(a[i] * v for i, v in values.items()) <= b + 1e-12


def test_binary_and_sos_counts():
    prog = build()
    assert len(prog.binary) == 42
    diag = mld.validate(prog)
    assert diag.n_binary == 42 and diag.n_sos == 7 and diag.sos_per_step_ok
    assert diag.ok, diag.messages


@pytest.mark.parametrize("k", [0, 3, 6])
def test_gap_indicator_equivalence(k):
    prog = build()
    grid = np.concatenate([np.linspace(-6, 4, 201), [-1.0, -1 - 1e-3, -1 + 1e-3, -1 + 2 * mld.EPS]])
    for dd in grid:
        ok = [xi for xi in (0, 1)
              if all(row_holds(prog, f"ind_e_{s}[{k}]", {prog.ix(k): dd, prog.ie(k): xi})
                     for s in ("hi", "lo"))]
        assert ok == [int(dd <= -P.d_under)], dd


def test_gap_indicator_separation_band_is_excluded():
    prog = build()
    dd = -P.d_under + 0.5 * mld.EPS
    for xi in (0, 1):
        assert not all(row_holds(prog, f"ind_e_{s}[0]", {prog.ix(0): dd, prog.ie(0): xi})
                       for s in ("hi", "lo"))


def test_speed_indicator_equivalence():
    v0 = 5.0
    prog = build(v0=v0)
    for v in np.concatenate([np.linspace(0, 30, 121), [P.v_lo, P.v_lo + 1e-3]]):
        dv = v0 - v  # at k = 0 the ego speed is v0 + dv0 - dv with dv0 = 0
        ok = [xi for xi in (0, 1)
              if all(row_holds(prog, f"ind_v_{s}[0]", {prog.ix(0) + 1: dv, prog.iv(0): xi})
                     for s in ("hi", "lo"))]
        assert ok == [int(v > P.v_lo)], v


def test_emergency_product_truth_table():
    prog = build()
    for E, e, v in itertools.product((0, 1), repeat=3):
        vals = {prog.iE(2): E, prog.ie(2): e, prog.iv(2): v}
        feasible = all(row_holds(prog, f"{n}[2]", vals) for n in ("and_lo", "and_e", "and_v"))
        assert feasible == (E == (e and v)), (E, e, v)


def test_ceiling_collapses_to_u_min():
    prog = build()
    for u in np.linspace(P.u_min, P.u_max, 29):
        assert row_holds(prog, "ceiling[1]", {prog.iu(1): u, prog.iE(1): 0})
        assert row_holds(prog, "ceiling[1]", {prog.iu(1): u, prog.iE(1): 1}) == (u <= P.u_min)


def test_forced_emergency_gives_u_min():
    # large negative gap error at low relative speed: brake hard at step 0
    prog = build(x0=ErrorState(-3.0, -2.0, 0.0), v0=20.0)
    lb, ub = prog.lb.copy(), prog.ub.copy()
    lb[prog.iE(0)] = ub[prog.iE(0)] = 1.0
    lb[prog.ie(0)] = ub[prog.ie(0)] = 1.0
    lb[prog.iv(0)] = ub[prog.iv(0)] = 1.0
    sol = solve_qp(QpProblem(prog.H, prog.g, prog.A_eq, prog.b_eq, prog.A_in, prog.b_in, lb, ub))
    assert sol.status == "optimal"
    assert sol.x[prog.iu(0)] == pytest.approx(P.u_min, abs=1e-6)


def test_comfort_rate_limits_without_emergency():
    prog = build(u_prev=1.0)
    vals = {prog.iu(0): 1.0 + 0.1 * P.u_max + 1e-3, prog.iE(0): 0}
    assert not row_holds(prog, "comfort_up[0]", vals)
    vals[prog.iE(0)] = 1
    assert row_holds(prog, "comfort_up[0]", vals)
    assert row_holds(prog, "comfort_lo[0]", {prog.iu(0): 1.0 + 0.1 * P.u_min, prog.iE(0): 0})
    assert not row_holds(prog, "comfort_lo[0]", {prog.iu(0): 1.0 + 0.1 * P.u_min - 1e-3, prog.iE(0): 0})


def test_big_m_bounds_examples():
    bm = mld.big_m_bounds(VehicleParams(), 100.0)
    assert (bm.e_upper, bm.e_lower) == (101.0, -99.0)
    assert (bm.v_upper, bm.v_lower) == (29.0, -1.0)
    with pytest.raises(ValueError):
        mld.big_m_bounds(VehicleParams(), 0.0)


def test_envelope_grows_with_large_initial_error():
    prog = build(x0=ErrorState(250.0, 0.0, 0.0))
    assert prog.big_m.e_upper >= 250.0 + P.d_under
    assert mld.validate(prog).big_m_ok


def test_validate_flags_indefinite_hessian():
    prog = build()
    prog.H = prog.H.copy()
    prog.H[prog.iu(0), prog.iu(0)] = -1.0
    diag = mld.validate(prog)
    assert not diag.psd and not diag.ok
    assert diag.min_eigenvalue < 0


def test_validate_reports_tightness():
    diag = mld.validate(build())
    assert diag.tightness["e"] == pytest.approx(1.0)
    assert diag.tightness["v"] == pytest.approx(1.0)
    prog = build()
    prog.big_m = mld.BigM(10.0, -10.0, 29.0, -1.0)
    diag = mld.validate(prog)
    assert not diag.big_m_ok and diag.messages


def test_chance_row_is_log_linear():
    prog = build()
    a, b = row(prog, "chance")
    for k in range(prog.N):
        np.testing.assert_allclose([-a[prog.iw(k, j)] for j in range(3)],
                                   np.log([1 / 6, 2 / 3, 1 / 6]), rtol=1e-12)
    assert b == pytest.approx(-prog.N * np.log(0.01))


def test_equilibrium_objective_zero():
    plan = mld.PredecessorPlan.deterministic(np.zeros(7))
    prog = build(plan=plan)
    sol = solve_miqp(prog)
    assert sol.status == "optimal"
    assert sol.objective == pytest.approx(0.0, abs=1e-8)
    np.testing.assert_allclose(sol.unpack(prog)["u"], 0.0, atol=1e-6)


def test_ego_speed_trajectory_consistent():
    prog = build(x0=ErrorState(0.5, 0.2, 0.0), plan=gp_plan(std=0.0, accel=-1.0))
    sol = solve_miqp(prog)
    v = mld.ego_speed_trajectory(prog, sol.z)
    assert v[0] == pytest.approx(20.0)
    np.testing.assert_allclose(np.diff(v), 0.1 * sol.unpack(prog)["states"][:-1, 2], atol=1e-6)


def test_chance_bound_monotone():
    x0 = ErrorState(-0.5, -1.0, 0.0)
    objs = [solve_miqp(build(x0=x0, plan=gp_plan(std=1.0), N=4, chance_bound=beta)).objective
            for beta in (0.15, 0.05, 1e-4, 1e-8)]
    # a smaller bound admits more level sequences
    assert all(a >= b - 1e-9 for a, b in zip(objs, objs[1:]))


def test_chance_bound_excluding_every_sequence_is_infeasible():
    # the likeliest sequence has probability (2/3)^4 < 0.25
    sol = solve_miqp(build(plan=gp_plan(std=1.0), N=4, chance_bound=0.25))
    assert sol.z is None and sol.status == "infeasible"


def test_zero_probability_levels_excluded():
    lv = gp.DisturbanceLevels(np.array([-1.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0]))
    prog = build(plan=mld.PredecessorPlan(np.zeros(7), (lv,) * 7, "gp"))
    for k in range(7):
        assert prog.ub[prog.iw(k, 0)] == 0.0 and prog.ub[prog.iw(k, 2)] == 0.0


@pytest.mark.parametrize("kw", [dict(N=0), dict(chance_bound=0.0), dict(chance_bound=1.5)])
def test_build_rejects_bad_arguments(kw):
    with pytest.raises(ValueError):
        build(**kw)


def test_short_plan_rejected():
    with pytest.raises(ValueError):
        build(plan=gp_plan(N=3), N=7)


def test_communicated_plan_must_be_certain():
    with pytest.raises(ValueError):
        mld.PredecessorPlan(np.zeros(2), (gp.discretize(1.0),) * 2, "communicated")


def test_dump_lists_every_variable():
    prog = build(N=2)
    text = prog.dump()
    assert text.count("\nvar ") == prog.n
    assert "le chance" in text
