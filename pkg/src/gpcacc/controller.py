"""Per-vehicle decision layer: predecessor-plan selection and MPC solve."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import gp as gpmod
from . import mld
from .dynamics import DiscreteSystem, ErrorState, KinematicState, VehicleParams, discrete_system
from .miqp import DEFAULT_NODE_BUDGET, QpProblem, solve_miqp, solve_qp

log = logging.getLogger(__name__)


class Policy(str, Enum):
    DHMPC = "dhmpc"
    DHSMPC = "dhsmpc"
    DH_DHSMPC = "dh-dhsmpc"


class Source(str, Enum):
    FRESH = "fresh-comm"
    SHIFTED = "shifted-comm"
    GP = "gp"
    ACC = "acc"


# runtime sources each policy may use
ALLOWED_SOURCES = {
    Policy.DHMPC: {Source.FRESH, Source.SHIFTED, Source.ACC},
    Policy.DHSMPC: {Source.GP, Source.ACC},
    Policy.DH_DHSMPC: {Source.FRESH, Source.GP, Source.ACC},
}


@dataclass
class ControllerConfig:
    horizon: int = 7
    t_s: float = 0.1
    weights: mld.MpcWeights = field(default_factory=mld.MpcWeights)
    chance_bound: float | None = None  # default 0.01**horizon
    node_budget: int = DEFAULT_NODE_BUDGET
    gp_refit_local: bool = False
    acc_after_steps: int | None = None  # default: horizon
    gp_jitter: float = gpmod.DEFAULT_JITTER

    @property
    def chance(self):
        return 0.01 ** self.horizon if self.chance_bound is None else self.chance_bound

    @property
    def acc_threshold(self):
        return self.horizon if self.acc_after_steps is None else self.acc_after_steps


@dataclass
class PredecessorStore:
    """What a follower knows about its predecessor beyond the ranging sensor."""

    profile: np.ndarray | None = None
    profile_step: int | None = None
    gp_payload: bytes | None = None
    gp_step: int | None = None
    observed: deque = field(default_factory=lambda: deque(maxlen=gpmod.WINDOW_SIZE))

    def receive(self, packet):
        if packet.profile is not None:
            if self.profile_step is not None and packet.step < self.profile_step:
                raise ValueError("packets must arrive in step order")
            self.profile = np.asarray(packet.profile, dtype=float)
            self.profile_step = packet.step
        if packet.gp_payload is not None:
            self.gp_payload = packet.gp_payload
            self.gp_step = packet.step

    def observe(self, t, speed):
        self.observed.append((t, speed))


def shifted_profile(profile, k0, k1, horizon, a_min=-np.inf, a_max=np.inf):
    """Acceleration profile received at step ``k0`` re-indexed to start at ``k1``.

    Entries past the end of the received profile are linearly extrapolated
    from its last two samples.
    """
    if profile is None:
        raise ValueError("no profile received")
    if k1 < k0:
        raise ValueError("current step precedes the receipt step")
    profile = np.asarray(profile, dtype=float)
    last = len(profile) - 1
    slope = profile[-1] - profile[-2] if len(profile) > 1 else 0.0
    out = np.empty(horizon)
    for h in range(horizon):
        idx = k1 - k0 + h
        out[h] = profile[idx] if idx <= last else profile[-1] + slope * (idx - last)
    return np.clip(out, a_min, a_max)


@dataclass
class PlanResult:
    u: float
    source: Source
    xi_E0: int
    objective: float
    nodes: int
    solve_time: float
    status: str
    accel_profile: np.ndarray  # planned own acceleration at steps k+1..k+N
    safety_event: bool = False


class FollowerController:
    """Hybrid (stochastic) MPC for one follower."""

    def __init__(self, params: VehicleParams, policy: Policy | str,
                 config: ControllerConfig | None = None):
        self.params = params
        self.policy = Policy(policy)
        self.config = config or ControllerConfig()
        self.system: DiscreteSystem = discrete_system(params, self.config.t_s)
        self._gp_cache = (None, None)

    # -- predecessor plan selection ----------------------------------------

    def _gp_model(self, store: PredecessorStore):
        cfg = self.config
        if cfg.gp_refit_local and len(store.observed) == gpmod.WINDOW_SIZE:
            times, speeds = zip(*store.observed)
            return gpmod.fit(times, speeds, cfg.gp_jitter, self.params.v_max)
        if store.gp_payload is None:
            return None
        key, model = self._gp_cache
        if key != store.gp_payload:
            model = gpmod.GaussianProcessSpeedModel.from_payload(
                store.gp_payload, jitter=cfg.gp_jitter, v_max=self.params.v_max)
            self._gp_cache = (store.gp_payload, model)
        return model

    def gp_plan(self, model, k) -> mld.PredecessorPlan:
        cfg = self.config
        fc = model.forecast(k * cfg.t_s, cfg.horizon + 1, cfg.t_s)
        accel = gpmod.implied_accel(fc.mean, cfg.t_s, self.params.a_min, self.params.a_max)
        levels = tuple(gpmod.discretize(fc.std[h + 1]) for h in range(cfg.horizon))
        return mld.PredecessorPlan(accel[:cfg.horizon], levels, "gp")

    def acc_plan(self) -> mld.PredecessorPlan:
        return mld.PredecessorPlan.deterministic(np.zeros(self.config.horizon), "acc-fallback")

    def select(self, store: PredecessorStore, k: int, fresh: bool):
        """Choose the predecessor plan for step ``k``.

        ``fresh`` tells whether a packet was delivered at this step.
        """
        cfg, p = self.config, self.params
        has_profile = store.profile is not None
        if self.policy is Policy.DHMPC or (self.policy is Policy.DH_DHSMPC and fresh and has_profile):
            if has_profile and fresh and store.profile_step == k:
                prof = shifted_profile(store.profile, store.profile_step, k, cfg.horizon, p.a_min, p.a_max)
                return mld.PredecessorPlan.deterministic(prof), Source.FRESH
            if (self.policy is Policy.DHMPC and has_profile
                    and k - store.profile_step <= cfg.acc_threshold):
                prof = shifted_profile(store.profile, store.profile_step, k, cfg.horizon, p.a_min, p.a_max)
                return mld.PredecessorPlan.deterministic(prof), Source.SHIFTED
            if self.policy is Policy.DHMPC:
                return self.acc_plan(), Source.ACC
        model = self._gp_model(store)
        if model is None:
            return self.acc_plan(), Source.ACC
        return self.gp_plan(model, k), Source.GP

    # -- MPC ----------------------------------------------------------------

    def solve(self, err: ErrorState, v_ego: float, plan: mld.PredecessorPlan, u_prev: float,
              source: Source) -> PlanResult:
        cfg, p = self.config, self.params
        program = mld.build(err, v_ego, p, self.system, plan, cfg.weights, u_prev,
                            cfg.horizon, cfg.chance)
        sol = solve_miqp(program, cfg.node_budget)
        if sol.z is None:
            log.warning("MPC infeasible (%s); applying u_min", sol.status)
            profile = np.full(cfg.horizon, p.u_min)
            return PlanResult(p.u_min, source, 0, np.inf, sol.nodes, sol.solve_time, sol.status,
                              profile, safety_event=True)
        parts = sol.unpack(program)
        u0 = float(np.clip(parts["u"][0], p.u_min, p.u_max))
        return PlanResult(u0, source, int(parts["xi"]["E"][0]), sol.objective, sol.nodes,
                          sol.solve_time, sol.status, parts["states"][1:, 2].copy())

    def plan(self, err: ErrorState, v_ego: float, store: PredecessorStore, k: int,
             u_prev: float, fresh: bool = False) -> PlanResult:
        plan, source = self.select(store, k, fresh)
        assert source in ALLOWED_SOURCES[self.policy]
        return self.solve(err, v_ego, plan, u_prev, source)

    def acc_fallback_plan(self, err: ErrorState, v_ego: float, u_prev: float) -> PlanResult:
        return self.solve(err, v_ego, self.acc_plan(), u_prev, Source.ACC)


@dataclass
class LeaderConfig:
    horizon: int = 7
    t_s: float = 0.1
    speed_weight: float = 1.0
    accel_weight: float = 0.1
    slack_weight: float = 1e4


class LeaderController:
    """Reference-speed tracking MPC for the platoon leader.

    Decision vector: v(0..N), a(0..N), u(0..N-1), s(1..N) where ``s`` is a
    non-negative slack on ``v >= 0`` so the program is always feasible.
    """

    def __init__(self, params: VehicleParams, config: LeaderConfig | None = None):
        self.params = params
        self.config = config or LeaderConfig()

    def plan(self, state: KinematicState, v_ref, u_prev: float):
        cfg, p = self.config, self.params
        N, t_s = cfg.horizon, cfg.t_s
        v_ref = np.asarray(v_ref, dtype=float)
        if len(v_ref) < N + 1:
            raise ValueError("reference must cover the horizon (N+1 samples)")
        iv = lambda k: k
        ia = lambda k: N + 1 + k
        iu = lambda k: 2 * (N + 1) + k
        isl = lambda k: 3 * N + 2 + (k - 1)
        n = 4 * N + 2
        H = np.zeros((n, n))
        g = np.zeros(n)
        for k in range(1, N + 1):
            H[iv(k), iv(k)] = 2 * cfg.speed_weight
            g[iv(k)] = -2 * cfg.speed_weight * v_ref[k]
            H[ia(k), ia(k)] = 2 * cfg.accel_weight
            H[isl(k), isl(k)] = 2 * cfg.slack_weight
        A_eq = np.zeros((2 * N, n))
        b_eq = np.zeros(2 * N)
        for k in range(N):
            A_eq[2 * k, [iv(k + 1), iv(k), ia(k)]] = [1.0, -1.0, -t_s]
            A_eq[2 * k + 1, [ia(k + 1), ia(k), iu(k)]] = [1.0, -(1 - t_s * p.f), -t_s * p.f]
        u_prev = float(np.clip(u_prev, p.u_min, p.u_max))
        rows, rhs = [], []
        for k in range(N):
            r_up = np.zeros(n)
            r_up[iu(k)] = 1.0
            if k:
                r_up[iu(k - 1)] = -1.0
            rows += [r_up, -r_up]
            c = u_prev if k == 0 else 0.0
            rhs += [t_s * p.u_max + c, -t_s * p.u_min - c]
        for k in range(1, N + 1):
            r = np.zeros(n)
            r[[iv(k), isl(k)]] = [-1.0, -1.0]
            rows.append(r)
            rhs.append(0.0)
        lb = np.full(n, -np.inf)
        ub = np.full(n, np.inf)
        lb[iv(0)] = ub[iv(0)] = state.v
        lb[ia(0)] = ub[ia(0)] = state.a
        for k in range(1, N + 1):
            lb[ia(k)], ub[ia(k)] = p.a_min, p.a_max
            ub[iv(k)] = p.v_max
            lb[isl(k)] = 0.0
        for k in range(N):
            lb[iu(k)], ub[iu(k)] = p.u_min, p.u_max
        sol = solve_qp(QpProblem(H, g, A_eq, b_eq, np.array(rows), np.array(rhs), lb, ub))
        if sol.status != "optimal":
            log.warning("leader QP %s; holding previous input", sol.status)
            return u_prev, np.full(N, state.a)
        x = sol.x
        accel = np.array([x[ia(k)] for k in range(1, N + 1)])
        return float(np.clip(x[iu(0)], p.u_min, p.u_max)), accel
