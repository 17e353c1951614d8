"""Mixed-logical-dynamical program for one follower and one horizon.

Decision vector layout (all blocks contiguous, in this order)::

    x(0..N)   3 per step   gap error, speed error, acceleration
    u(0..N-1)              input
    w(k, j)   m per step   disturbance-level selectors
    xi_e(k)                gap-error emergency indicator
    xi_v(k)                speed-above-threshold indicator
    xi_E(k)                emergency braking (product of the two)

Ego speed is not a state; along the horizon it is the affine expression
``v_pred(k) - dv(k)`` where the predecessor speed accumulates the planned
acceleration profile and the selected disturbance levels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import DiscreteSystem, ErrorState, VehicleParams
from .gp import DisturbanceLevels

EPS = 1e-6        # separation constant of strict big-M inequalities
EPS_GAP = 0.1     # d(k) > 0 realized as d(k) >= EPS_GAP
GAP_ERROR_ENVELOPE = 200.0

SOURCES = ("communicated", "gp", "acc-fallback")


@dataclass(frozen=True)
class MpcWeights:
    Q: tuple = (3.0, 1.0, 0.1)  # gap weight raised so ramps do not ride the braking threshold
    R: tuple = (0.0, 0.0, 0.0)
    q: float = 10.0


@dataclass(frozen=True)
class PredecessorPlan:
    accel: np.ndarray
    levels: tuple  # one DisturbanceLevels per horizon step
    source: str = "communicated"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown plan source {self.source!r}")
        if len(self.levels) != len(self.accel):
            raise ValueError("one set of disturbance levels per horizon step required")
        if self.source == "communicated":
            for lv in self.levels:
                if len(lv.levels) != 1 or lv.levels[0] != 0 or lv.probabilities[0] != 1:
                    raise ValueError("communicated plans carry no disturbance")

    @classmethod
    def deterministic(cls, accel, source="communicated"):
        accel = np.asarray(accel, dtype=float)
        certain = DisturbanceLevels(np.zeros(1), np.ones(1))
        return cls(accel, tuple(certain for _ in accel), source)


@dataclass(frozen=True)
class BigM:
    e_upper: float
    e_lower: float
    v_upper: float
    v_lower: float


def big_m_bounds(params: VehicleParams, gap_error_max=GAP_ERROR_ENVELOPE) -> BigM:
    """Interval bounds of the indicator expressions over the envelope
    ``|gap error| <= gap_error_max``, ``0 <= v <= v_max``."""
    if gap_error_max <= 0:
        raise ValueError("zero-width gap-error envelope")
    return BigM(e_upper=gap_error_max + params.d_under,
                e_lower=-gap_error_max + params.d_under,
                v_upper=params.v_max - params.v_lo,
                v_lower=-params.v_lo)


@dataclass
class MldProgram:
    """Quadratic objective ``0.5 z'Hz + g'z + const`` over the layout above,
    with ``A_eq z = b_eq``, ``A_in z <= b_in`` and ``lb <= z <= ub``."""

    N: int
    m: int
    H: np.ndarray
    g: np.ndarray
    const: float
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    binary: np.ndarray          # indices of binary variables
    priority: np.ndarray        # branching priority per binary (lower first)
    log_prob: np.ndarray        # ln p per w variable, shape (N, m)
    log_chance: float
    big_m: BigM
    envelope: dict
    row_names: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return len(self.g)

    # index helpers
    def ix(self, k):
        return 3 * k

    def iu(self, k):
        return 3 * (self.N + 1) + k

    def iw(self, k, j):
        return 3 * (self.N + 1) + self.N + k * self.m + j

    def ie(self, k):
        return 3 * (self.N + 1) + self.N * (1 + self.m) + k

    def iv(self, k):
        return self.ie(k) + self.N

    def iE(self, k):
        return self.ie(k) + 2 * self.N

    def objective(self, z):
        return float(0.5 * z @ self.H @ z + self.g @ z + self.const)

    def violation(self, z):
        """Largest constraint violation of ``z`` (integrality excluded)."""
        parts = [np.abs(self.A_eq @ z - self.b_eq).max(initial=0.0),
                 np.max(self.A_in @ z - self.b_in, initial=0.0),
                 np.max(self.lb - z, initial=0.0),
                 np.max(z - self.ub, initial=0.0)]
        return float(max(parts))

    def integrality(self, z):
        zb = z[self.binary]
        return float(np.abs(zb - np.round(zb)).max(initial=0.0))

    def dump(self) -> str:
        """Plain-text listing for cross-checks with external solvers."""
        lines = [f"# variables {self.n}"]
        for i in range(self.n):
            kind = "bin" if i in set(self.binary.tolist()) else "cont"
            lines.append(f"var {i} {self.meta['names'][i]} {kind} {self.lb[i]!r} {self.ub[i]!r}")
        for r in range(len(self.b_eq)):
            nz = np.flatnonzero(self.A_eq[r])
            terms = " ".join(f"{c}:{self.A_eq[r, c]!r}" for c in nz)
            lines.append(f"eq {r} {terms} = {self.b_eq[r]!r}")
        for r in range(len(self.b_in)):
            nz = np.flatnonzero(self.A_in[r])
            terms = " ".join(f"{c}:{self.A_in[r, c]!r}" for c in nz)
            lines.append(f"le {self.row_names[r]} {terms} <= {self.b_in[r]!r}")
        for i, j in zip(*np.nonzero(np.triu(self.H))):
            lines.append(f"obj_q {i} {j} {self.H[i, j]!r}")
        for i in np.flatnonzero(self.g):
            lines.append(f"obj_l {i} {self.g[i]!r}")
        lines.append(f"obj_c {self.const!r}")
        return "\n".join(lines) + "\n"


class _Rows:
    def __init__(self, n):
        self.n = n
        self.rows = []
        self.rhs = []
        self.names = []

    def add(self, coeffs: dict, rhs, name=""):
        row = np.zeros(self.n)
        for i, c in coeffs.items():
            row[i] += c
        self.rows.append(row)
        self.rhs.append(rhs)
        self.names.append(name)

    def arrays(self):
        if not self.rows:
            return np.zeros((0, self.n)), np.zeros(0)
        return np.array(self.rows), np.array(self.rhs, dtype=float)


def build(x0: ErrorState, v0: float, params: VehicleParams, system: DiscreteSystem,
          plan: PredecessorPlan, weights: MpcWeights = MpcWeights(), u_prev: float = 0.0,
          horizon: int = 7, chance_bound: float = 1.0,
          gap_error_max: float = GAP_ERROR_ENVELOPE) -> MldProgram:
    """Assemble the hybrid MPC program for one follower.

    ``x0`` is the measured error state, ``v0`` the measured ego speed and
    ``u_prev`` the input applied at the previous step.
    """
    N = horizon
    if N < 1:
        raise ValueError("horizon must be at least 1")
    if len(plan.accel) < N:
        raise ValueError(f"predecessor plan shorter than horizon ({len(plan.accel)} < {N})")
    if not 0.0 < chance_bound <= 1.0:
        raise ValueError("chance bound must lie in (0, 1]")
    if params.u_min > params.u_max or params.a_min > params.a_max:
        raise ValueError("inconsistent static bounds")
    z0 = x0.as_array()
    if not np.all(np.isfinite(z0)) or not np.isfinite(v0):
        raise ValueError("initial state must be finite")
    m = max(len(plan.levels[k].levels) for k in range(N))
    if any(len(plan.levels[k].levels) != m for k in range(N)):
        raise ValueError("all horizon steps need the same number of disturbance levels")

    t_s = system.t_s
    envelope = {"gap_error_max": max(gap_error_max, abs(z0[0]) + 10.0),
                "v_max": params.v_max}
    bm = big_m_bounds(params, envelope["gap_error_max"])
    nx = 3 * (N + 1)
    n = nx + N + N * m + 3 * N
    prog_idx = MldProgram(N, m, *([None] * 15))
    ix, iu, iw = prog_idx.ix, prog_idx.iu, prog_idx.iw
    ie, iv, iE = prog_idx.ie, prog_idx.iv, prog_idx.iE

    levels = np.array([plan.levels[k].levels for k in range(N)], dtype=float)
    probs = np.array([plan.levels[k].probabilities for k in range(N)], dtype=float)
    with np.errstate(divide="ignore"):
        log_prob = np.log(probs)
    a_pred = np.asarray(plan.accel[:N], dtype=float)

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    lb[0:3] = ub[0:3] = z0
    for k in range(1, N + 1):
        lb[ix(k) + 2], ub[ix(k) + 2] = params.a_min, params.a_max
    for k in range(N):
        lb[iu(k)], ub[iu(k)] = params.u_min, params.u_max
    binary = list(range(nx + N, n))
    lb[binary] = 0.0
    ub[binary] = 1.0
    # impossible levels (zero probability) are excluded outright
    for k in range(N):
        for j in range(m):
            if not np.isfinite(log_prob[k, j]):
                ub[iw(k, j)] = 0.0
    log_prob = np.where(np.isfinite(log_prob), log_prob, 0.0)

    eq = _Rows(n)
    for k in range(N):
        for r in range(3):
            coeffs = {ix(k + 1) + r: 1.0, iu(k): -system.B[r]}
            for c in range(3):
                coeffs[ix(k) + c] = coeffs.get(ix(k) + c, 0.0) - system.A[r, c]
            for j in range(m):
                coeffs[iw(k, j)] = -system.E[r] * levels[k, j]
            eq.add(coeffs, system.D[r] * a_pred[k], f"dyn[{k}][{r}]")
    for k in range(N):
        eq.add({iw(k, j): 1.0 for j in range(m)}, 1.0, f"sos[{k}]")
    A_eq, b_eq = eq.arrays()

    # ego speed at step k as (constant, coefficient dict)
    def ego_speed(k):
        const = v0 + z0[1] + t_s * a_pred[:k].sum()
        coeffs = {ix(k) + 1: -1.0}
        for s in range(k):
            for j in range(m):
                coeffs[iw(s, j)] = levels[s, j]
        return const, coeffs

    ineq = _Rows(n)
    for k in range(1, N + 1):
        c, co = ego_speed(k)
        ineq.add({i: -a for i, a in co.items()}, c, f"v_nonneg[{k}]")
        ineq.add(co, params.v_max - c, f"v_max[{k}]")
        # gap = dd + tau * v + d_s >= EPS_GAP
        gap = {i: -params.tau * a for i, a in co.items()}
        gap[ix(k)] = gap.get(ix(k), 0.0) - 1.0
        ineq.add(gap, params.tau * c + params.standstill_gap - EPS_GAP, f"gap[{k}]")

    ubar = params.u_max - params.u_min
    for k in range(N):
        du = {iu(k): 1.0}
        du_const = 0.0
        if k == 0:
            du_const = -u_prev
        else:
            du[iu(k - 1)] = -1.0
        # du <= xi_E*ubar + (1 - xi_E)*t_s*u_max
        row = dict(du)
        row[iE(k)] = -(ubar - t_s * params.u_max)
        ineq.add(row, t_s * params.u_max - du_const, f"comfort_up[{k}]")
        # du >= (1 - xi_E)*t_s*u_min - xi_E*ubar
        row = {i: -a for i, a in du.items()}
        row[iE(k)] = t_s * params.u_min * -1.0 - ubar
        ineq.add(row, -t_s * params.u_min + du_const, f"comfort_lo[{k}]")
        # u <= xi_E*u_min + (1 - xi_E)*u_max
        ineq.add({iu(k): 1.0, iE(k): params.u_max - params.u_min}, params.u_max, f"ceiling[{k}]")
        # dd + d_under <= e_upper*(1 - xi_e)
        ineq.add({ix(k): 1.0, ie(k): bm.e_upper}, bm.e_upper - params.d_under, f"ind_e_hi[{k}]")
        # dd + d_under >= EPS + xi_e*(e_lower - EPS)
        ineq.add({ix(k): -1.0, ie(k): bm.e_lower - EPS}, params.d_under - EPS, f"ind_e_lo[{k}]")
        c, co = ego_speed(k)
        # v - v_lo <= v_upper*xi_v
        row = dict(co)
        row[iv(k)] = -bm.v_upper
        ineq.add(row, params.v_lo - c, f"ind_v_hi[{k}]")
        # v - v_lo >= EPS + (1 - xi_v)*(v_lower - EPS)
        row = {i: -a for i, a in co.items()}
        row[iv(k)] = -(bm.v_lower - EPS)
        ineq.add(row, c - params.v_lo - EPS - (bm.v_lower - EPS), f"ind_v_lo[{k}]")
        ineq.add({iE(k): -1.0, ie(k): 1.0, iv(k): 1.0}, 1.0, f"and_lo[{k}]")
        ineq.add({iE(k): 1.0, ie(k): -1.0}, 0.0, f"and_e[{k}]")
        ineq.add({iE(k): 1.0, iv(k): -1.0}, 0.0, f"and_v[{k}]")
    log_chance = float(np.log(chance_bound))
    ineq.add({iw(k, j): -log_prob[k, j] for k in range(N) for j in range(m)},
             -log_chance, "chance")
    A_in, b_in = ineq.arrays()

    Q = np.diag(np.asarray(weights.Q, dtype=float))
    R = np.asarray(weights.R, dtype=float)
    H = np.zeros((n, n))
    g = np.zeros(n)
    for k in range(N):
        s = slice(ix(k), ix(k) + 3)
        H[s, s] = 2.0 * Q
        g[s] = -2.0 * Q @ R
    for k in range(N):
        for j in range(m):
            g[iw(k, j)] = -weights.q * log_prob[k, j]
    const = float(N * R @ Q @ R)

    names = ([f"x{k}.{c}" for k in range(N + 1) for c in ("dd", "dv", "a")]
             + [f"u{k}" for k in range(N)]
             + [f"w{k}.{j}" for k in range(N) for j in range(m)]
             + [f"xi_e{k}" for k in range(N)] + [f"xi_v{k}" for k in range(N)]
             + [f"xi_E{k}" for k in range(N)])
    # w first, then the emergency indicators
    priority = np.array([0 if i < ie(0) else 1 for i in binary])
    return MldProgram(N=N, m=m, H=H, g=g, const=const, A_eq=A_eq, b_eq=b_eq, A_in=A_in,
                      b_in=b_in, lb=lb, ub=ub, binary=np.array(binary), priority=priority,
                      log_prob=log_prob, log_chance=log_chance, big_m=bm, envelope=envelope,
                      row_names=ineq.names,
                      meta={"names": names, "v0": v0, "x0": z0, "a_pred": a_pred,
                            "levels": levels, "u_prev": u_prev, "params": params,
                            "t_s": t_s, "source": plan.source})


def ego_speed_trajectory(program: MldProgram, z) -> np.ndarray:
    """Ego speeds v(0..N) implied by a decision vector."""
    N, m = program.N, program.m
    t_s = program.meta["t_s"]
    a_pred = program.meta["a_pred"]
    levels = program.meta["levels"]
    v_pred0 = program.meta["v0"] + program.meta["x0"][1]
    w = np.array([[z[program.iw(k, j)] for j in range(m)] for k in range(N)])
    eta = (w * levels).sum(axis=1)
    v_pred = v_pred0 + np.concatenate([[0.0], np.cumsum(t_s * a_pred + eta)])
    dv = np.array([z[program.ix(k) + 1] for k in range(N + 1)])
    return v_pred - dv


@dataclass
class Diagnostics:
    psd: bool
    min_eigenvalue: float
    big_m_ok: bool
    tightness: dict
    n_binary: int
    n_sos: int
    sos_per_step_ok: bool
    nominal_feasible: bool
    messages: list

    @property
    def ok(self):
        return self.psd and self.big_m_ok and self.sos_per_step_ok and self.nominal_feasible


def validate(program: MldProgram) -> Diagnostics:
    """Structural checks of a program; never raises."""
    from .miqp import QpProblem, solve_qp

    msgs = []
    eig = float(np.linalg.eigvalsh(program.H).min()) if program.n else 0.0
    scale = max(1.0, float(np.abs(program.H).max(initial=0.0)))
    psd = eig >= -1e-9 * scale
    if not psd:
        msgs.append(f"objective Hessian not PSD (min eigenvalue {eig:.3g})")

    params = program.meta["params"]
    env = program.envelope
    e_range = (-env["gap_error_max"] + params.d_under, env["gap_error_max"] + params.d_under)
    v_range = (-params.v_lo, env["v_max"] - params.v_lo)
    bm = program.big_m
    tight = {"e": (bm.e_upper - bm.e_lower) / (e_range[1] - e_range[0]),
             "v": (bm.v_upper - bm.v_lower) / (v_range[1] - v_range[0])}
    big_m_ok = (bm.e_upper >= e_range[1] and bm.e_lower <= e_range[0]
                and bm.v_upper >= v_range[1] and bm.v_lower <= v_range[0])
    if not big_m_ok:
        msgs.append("big-M bounds do not cover the operating envelope")

    sos_rows = [r for r in range(len(program.b_eq)) if program.b_eq[r] == 1.0
                and set(np.flatnonzero(program.A_eq[r])) <= set(range(program.iw(0, 0), program.ie(0)))]
    sos_ok = len(sos_rows) == program.N
    if not sos_ok:
        msgs.append(f"expected {program.N} level-selection equalities, found {len(sos_rows)}")

    # nominal assignment: no emergency, most likely level
    lb, ub = program.lb.copy(), program.ub.copy()
    for k in range(program.N):
        for idx in (program.ie(k), program.iv(k), program.iE(k)):
            lb[idx] = ub[idx] = 0.0
        best = int(np.argmax(program.log_prob[k]))
        for j in range(program.m):
            lb[program.iw(k, j)] = ub[program.iw(k, j)] = float(j == best)
    # with xi_v = 0 the speed must stay below v_lo; use xi_v = 1 where that fails
    feasible = False
    for xi_v in (1.0, 0.0):
        for k in range(program.N):
            lb[program.iv(k)] = ub[program.iv(k)] = xi_v
        sol = solve_qp(QpProblem(program.H, program.g, program.A_eq, program.b_eq,
                                 program.A_in, program.b_in, lb, ub))
        if sol.status == "optimal":
            feasible = True
            break
    if not feasible:
        msgs.append("no feasible continuous completion for the nominal binary assignment")
    return Diagnostics(psd, eig, big_m_ok, tight, len(program.binary), len(sos_rows),
                       sos_ok, feasible, msgs)
