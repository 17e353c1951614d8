"""Convex QP relaxations and best-first branch-and-bound over MLD binaries."""
from __future__ import annotations

import heapq
import itertools
import logging
import time
from dataclasses import dataclass, field

import daqp
import numpy as np

log = logging.getLogger(__name__)

FEAS_TOL = 1e-6
INT_TOL = 1e-6
GAP_TOL = 1e-6
DEFAULT_NODE_BUDGET = 20_000
MAX_ENUM_BINARIES = 18

PROX_WEIGHT = 1e-4
_EQ_SENSE = 5


@dataclass
class QpProblem:
    """``min 0.5 x'Hx + g'x`` s.t. ``A_eq x = b_eq``, ``A_in x <= b_in``, ``lb <= x <= ub``."""

    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        n = len(self.g)
        if self.H.shape != (n, n):
            raise ValueError("Hessian shape does not match the linear term")
        for A, b in ((self.A_eq, self.b_eq), (self.A_in, self.b_in)):
            if A.shape != (len(b), n):
                raise ValueError("constraint matrix shape mismatch")
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValueError("bound vectors must have one entry per variable")


@dataclass
class QpSolution:
    x: np.ndarray
    duals: np.ndarray  # bounds first, then equality rows, then inequality rows
    objective: float
    status: str        # optimal | infeasible | max-iter
    stationarity: float = np.nan
    primal_residual: float = np.nan
    complementarity: float = np.nan
    iterations: int = 0


class _DaqpForm:
    """Stacked constraint data in the two-sided form DAQP expects."""

    def __init__(self, qp: QpProblem):
        self.qp = qp
        n = len(qp.g)
        self.C = np.vstack([qp.A_eq, qp.A_in]) if len(qp.b_eq) + len(qp.b_in) else np.zeros((0, n))
        self.C = np.ascontiguousarray(self.C, dtype=float)
        self.row_up = np.concatenate([qp.b_eq, qp.b_in]).astype(float)
        self.row_lo = np.concatenate([qp.b_eq, np.full(len(qp.b_in), -np.inf)]).astype(float)
        sense = np.zeros(n + len(self.row_up), dtype=np.int32)
        sense[n:n + len(qp.b_eq)] = _EQ_SENSE
        self.sense = sense
        self.H = np.ascontiguousarray(qp.H, dtype=float)
        self.g = np.ascontiguousarray(qp.g, dtype=float)

    def solve(self, lb, ub, dual_start=None) -> QpSolution:
        qp = self.qp
        n = len(qp.g)
        if np.any(lb > ub + FEAS_TOL):
            return QpSolution(np.full(n, np.nan), np.zeros(n + len(self.row_up)), np.inf,
                              "infeasible")
        sense = self.sense.copy()
        fixed = lb == ub
        sense[:n][fixed] = _EQ_SENSE
        bup = np.concatenate([ub, self.row_up])
        blo = np.concatenate([lb, self.row_lo])
        # a fixed proximal weight; the automatic (tiny) one misreports
        # infeasibility on the badly scaled big-M relaxations
        kwargs = {"eps_prox": PROX_WEIGHT, "iter_limit": 5000}
        if dual_start is not None:
            kwargs["dual_start"] = dual_start
        x, _, flag, info = daqp.solve(self.H, self.g, self.C, bup, blo, sense, **kwargs)
        lam = np.asarray(info["lam"], dtype=float)
        if flag in (1, 2):
            return _with_kkt(qp, self.C, bup, blo, np.asarray(x, dtype=float), lam,
                             info["iterations"])
        status = "infeasible" if flag == -1 else "max-iter"
        return QpSolution(np.asarray(x, dtype=float), lam, np.inf, status,
                          iterations=info["iterations"])


def _with_kkt(qp, C, bup, blo, x, lam, iterations):
    n = len(x)
    objective = float(0.5 * x @ qp.H @ x + qp.g @ x)
    scale = 1.0 + max(np.abs(qp.g).max(initial=0.0), np.abs(qp.H).max(initial=0.0))
    grad = qp.H @ x + qp.g + lam[:n] + C.T @ lam[n:]
    rows = np.concatenate([x, C @ x])
    viol = np.concatenate([blo - rows, rows - bup])
    primal = float(np.max(viol[np.isfinite(viol)], initial=0.0))
    slack = np.where(lam > 0, bup - rows, np.where(lam < 0, rows - blo, 0.0))
    comp = float(np.max(np.abs(slack * lam), initial=0.0))
    return QpSolution(x, lam, objective, "optimal", float(np.abs(grad).max(initial=0.0)) / scale,
                      primal, comp / scale, iterations)


def solve_qp(qp: QpProblem, dual_start=None) -> QpSolution:
    """Solve a convex QP; deterministic for fixed inputs."""
    return _DaqpForm(qp).solve(qp.lb, qp.ub, dual_start)


@dataclass
class MiqpSolution:
    status: str                 # optimal | infeasible | budget | budget-infeasible
    z: np.ndarray | None = None
    objective: float = np.inf
    nodes: int = 0
    gap: float = np.inf
    bound: float = -np.inf
    solve_time: float = 0.0
    trace: list = field(default_factory=list)  # (node id, parent id, relaxation value)

    def unpack(self, program):
        """Inputs, states, binaries and selected levels of the solution."""
        N, z = program.N, self.z
        states = z[:3 * (N + 1)].reshape(N + 1, 3)
        u = np.array([z[program.iu(k)] for k in range(N)])
        w = np.array([[z[program.iw(k, j)] for j in range(program.m)] for k in range(N)])
        xi = {name: np.round([z[f(k)] for k in range(N)]).astype(int)
              for name, f in (("e", program.ie), ("v", program.iv), ("E", program.iE))}
        return {"u": u, "states": states, "w": np.round(w).astype(int),
                "level": np.argmax(w, axis=1), "xi": xi}


def _propagate(program, lb, ub):
    """Unit propagation on the level selectors and the emergency product.

    Returns False when the fixings are already contradictory.
    """
    changed = True
    while changed:
        changed = False
        for k in range(program.N):
            e, v, E = program.ie(k), program.iv(k), program.iE(k)
            if (ub[e] == 0 or ub[v] == 0) and ub[E] != 0:
                if lb[E] == 1:
                    return False
                ub[E] = 0.0
                changed = True
            if lb[e] == 1 and lb[v] == 1 and lb[E] != 1:
                if ub[E] == 0:
                    return False
                lb[E] = 1.0
                changed = True
            if lb[E] == 1 and (lb[e] != 1 or lb[v] != 1):
                if ub[e] == 0 or ub[v] == 0:
                    return False
                lb[e] = lb[v] = 1.0
                changed = True
            ws = [program.iw(k, j) for j in range(program.m)]
            ones = [i for i in ws if lb[i] == 1]
            if len(ones) > 1:
                return False
            if ones:
                for i in ws:
                    if i != ones[0] and ub[i] != 0:
                        ub[i] = 0.0
                        changed = True
            free = [i for i in ws if ub[i] != 0]
            if not free:
                return False
            if len(free) == 1 and lb[free[0]] != 1:
                lb[free[0]] = 1.0
                changed = True
    return True


def _chance_reachable(program, ub, lb):
    """Best achievable log trajectory probability under current fixings."""
    best = 0.0
    for k in range(program.N):
        allowed = [program.log_prob[k, j] for j in range(program.m)
                   if ub[program.iw(k, j)] != 0]
        best += max(allowed)
    return best


def _qp_of(program):
    return QpProblem(program.H, program.g, program.A_eq, program.b_eq, program.A_in,
                     program.b_in, program.lb, program.ub)


def check_solution(program, z, tol=FEAS_TOL) -> bool:
    """Independent substitution check: constraints and integrality."""
    if z is None or not np.all(np.isfinite(z)):
        return False
    return program.violation(z) <= tol * 10 and program.integrality(z) <= INT_TOL


def _snap(program, z):
    z = z.copy()
    z[program.binary] = np.round(z[program.binary])
    return z


def _rounded_assignment(program, x):
    """Binary assignment consistent with the relaxed continuous trajectory."""
    from .mld import ego_speed_trajectory

    params = program.meta["params"]
    speeds = ego_speed_trajectory(program, x)
    z = x.copy()
    for k in range(program.N):
        ws = [program.iw(k, j) for j in range(program.m)]
        pick = ws[int(np.argmax(x[ws]))]
        for i in ws:
            z[i] = float(i == pick)
        e = float(x[program.ix(k)] + params.d_under <= 0.0)
        v = float(speeds[k] > params.v_lo)
        z[program.ie(k)], z[program.iv(k)], z[program.iE(k)] = e, v, e * v
    return z[program.binary]


def solve_miqp(program, node_budget: int = DEFAULT_NODE_BUDGET, record_trace=False) -> MiqpSolution:
    """Best-first branch-and-bound to a relative gap of ``GAP_TOL``.

    Branching: most fractional binary within the lowest priority class
    (level selectors before emergency indicators), ties by lowest index.
    Open nodes are ordered by relaxation bound, ties first-in first-out.
    """
    t0 = time.perf_counter()
    form = _DaqpForm(_qp_of(program))
    binary = program.binary
    priority = program.priority
    tie = itertools.count()
    node_ids = itertools.count()
    trace = []

    incumbent_z, incumbent = None, np.inf
    nodes = 0

    def evaluate(lb, ub, dual_start, parent_id):
        nonlocal nodes
        nodes += 1
        node_id = next(node_ids)
        if not _propagate(program, lb, ub):
            return None
        if _chance_reachable(program, ub, lb) < program.log_chance - 1e-9:
            return None
        sol = form.solve(lb, ub, dual_start)
        if record_trace:
            trace.append((node_id, parent_id, sol.objective if sol.status == "optimal" else np.inf))
        if sol.status != "optimal":
            return None
        return node_id, sol

    def cutoff():
        return incumbent - GAP_TOL * max(1.0, abs(incumbent))

    open_nodes = []

    def consider(lb, ub, result):
        nonlocal incumbent, incumbent_z
        node_id, sol = result
        value = sol.objective + program.const
        if value >= cutoff():
            return
        frac = np.abs(sol.x[binary] - np.round(sol.x[binary]))
        if frac.max(initial=0.0) <= INT_TOL:
            z = _snap(program, sol.x)
            if check_solution(program, z):
                incumbent, incumbent_z = value, z
                return
            # rounding broke feasibility: re-solve with binaries pinned
            lbf, ubf = lb.copy(), ub.copy()
            lbf[binary] = ubf[binary] = z[binary]
            pinned = form.solve(lbf, ubf, sol.duals)
            if pinned.status == "optimal":
                z = _snap(program, pinned.x)
                v = pinned.objective + program.const
                if v < incumbent and program.violation(z) <= 10 * FEAS_TOL:
                    incumbent, incumbent_z = v, z
            return
        heapq.heappush(open_nodes, (value, next(tie), node_id, lb, ub, sol))

    root_lb, root_ub = program.lb.copy(), program.ub.copy()
    root = evaluate(root_lb, root_ub, None, -1)
    if root is None:
        return MiqpSolution("infeasible", nodes=nodes, solve_time=time.perf_counter() - t0,
                            trace=trace)
    consider(root_lb, root_ub, root)
    if incumbent_z is None:
        # rounding heuristic for an early incumbent
        lbf, ubf = root_lb.copy(), root_ub.copy()
        guess = _rounded_assignment(program, root[1].x)
        if np.all((guess >= lbf[binary]) & (guess <= ubf[binary])):
            lbf[binary] = ubf[binary] = guess
            pinned = form.solve(lbf, ubf, root[1].duals)
            if pinned.status == "optimal":
                z = _snap(program, pinned.x)
                if check_solution(program, z):
                    incumbent, incumbent_z = pinned.objective + program.const, z

    best_open = -np.inf
    status = "optimal"
    while open_nodes:
        value, _, node_id, lb, ub, sol = heapq.heappop(open_nodes)
        if value >= cutoff():
            open_nodes.clear()
            break
        if nodes >= node_budget:
            best_open = value
            status = "budget"
            break
        xb = sol.x[binary]
        frac = np.abs(xb - np.round(xb))
        candidates = np.flatnonzero(frac > INT_TOL)
        top = priority[candidates].min()
        candidates = candidates[priority[candidates] == top]
        dist = np.abs(xb[candidates] - 0.5)
        pick = binary[candidates[np.argmin(dist)]]  # argmin keeps the lowest index on ties
        for val in (0.0, 1.0):
            clb, cub = lb.copy(), ub.copy()
            clb[pick] = cub[pick] = val
            result = evaluate(clb, cub, sol.duals, node_id)
            if result is not None:
                consider(clb, cub, result)

    elapsed = time.perf_counter() - t0
    if incumbent_z is None:
        st = "budget-infeasible" if status == "budget" else "infeasible"
        return MiqpSolution(st, nodes=nodes, solve_time=elapsed, trace=trace)
    if status == "budget":
        gap = (incumbent - best_open) / max(1.0, abs(incumbent))
        log.warning("node budget %d exhausted, incumbent gap %.3g", node_budget, gap)
        return MiqpSolution("budget", incumbent_z, incumbent, nodes, gap, best_open, elapsed, trace)
    return MiqpSolution("optimal", incumbent_z, incumbent, nodes, 0.0, incumbent, elapsed, trace)


def enumerate_solve(program) -> MiqpSolution:
    """Exhaustive oracle: one QP per level choice and consistent indicator triple."""
    if len(program.binary) > MAX_ENUM_BINARIES:
        raise ValueError(f"too many binaries for enumeration ({len(program.binary)})")
    t0 = time.perf_counter()
    form = _DaqpForm(_qp_of(program))
    N, m = program.N, program.m
    per_step = [(j, e, v) for j in range(m) for e in (0, 1) for v in (0, 1)]
    best_z, best, count = None, np.inf, 0
    for combo in itertools.product(per_step, repeat=N):
        lb, ub = program.lb.copy(), program.ub.copy()
        skip = False
        logp = 0.0
        for k, (j, e, v) in enumerate(combo):
            for jj in range(m):
                i = program.iw(k, jj)
                val = float(jj == j)
                if not (program.lb[i] <= val <= program.ub[i]):
                    skip = True
                lb[i] = ub[i] = val
            logp += program.log_prob[k, j]
            for i, val in ((program.ie(k), e), (program.iv(k), v), (program.iE(k), e * v)):
                lb[i] = ub[i] = float(val)
        if skip or logp < program.log_chance - 1e-9:
            continue
        count += 1
        sol = form.solve(lb, ub)
        if sol.status != "optimal":
            continue
        value = sol.objective + program.const
        if value < best:
            best, best_z = value, _snap(program, sol.x)
    elapsed = time.perf_counter() - t0
    if best_z is None:
        return MiqpSolution("infeasible", nodes=count, solve_time=elapsed)
    return MiqpSolution("optimal", best_z, best, count, 0.0, best, elapsed)
