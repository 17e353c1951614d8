"""Scenario configuration, synchronous platoon simulation, metrics and traces."""
from __future__ import annotations

import csv
import io
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from . import gp as gpmod
from .comms import Channel, ChannelConfig, Packet
from .controller import (ControllerConfig, FollowerController, LeaderConfig, LeaderController,
                         Policy, PredecessorStore, Source)
from .dynamics import KinematicState, VehicleParams, desired_gap, error_state, step_plant
from .mld import MpcWeights

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LeaderReference:
    """Piecewise-constant reference speed: ``speeds[i]`` until ``times[i]``."""

    times: tuple = (15.0, 30.0)
    speeds: tuple = (27.0, 0.0, 25.0)

    def __post_init__(self):
        if len(self.speeds) != len(self.times) + 1:
            raise ConfigError("need one more reference speed than switching times")
        if list(self.times) != sorted(self.times):
            raise ConfigError("switching times must be increasing")

    def __call__(self, t):
        if t < 0:
            raise ValueError("reference defined for t >= 0 only")
        for switch, speed in zip(self.times, self.speeds):
            if t < switch:
                return speed
        return self.speeds[-1]


def leader_reference(t, ref: LeaderReference = LeaderReference()):
    return ref(t)


@dataclass
class ScenarioConfig:
    n_vehicles: int = 10
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    vehicles: list | None = None  # optional per-vehicle overrides (dicts)
    policy: str = "dhsmpc"
    horizon: int = 7
    t_s: float = 0.1
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    leader_reference: LeaderReference = field(default_factory=LeaderReference)
    duration: float = 60.0
    Q: tuple = (3.0, 1.0, 0.1)
    q: float = 10.0
    chance_bound: float | None = None
    initial_speed: float = 27.0
    seed: int | None = None
    halt_on_collision: bool = False
    gp_refit_local: bool = False
    node_budget: int = 20_000
    leader_speed_weight: float = 1.0
    leader_accel_weight: float = 0.1

    def __post_init__(self):
        if self.n_vehicles < 1:
            raise ConfigError("need at least one vehicle")
        try:
            Policy(self.policy)
        except ValueError as exc:
            raise ConfigError(f"unknown policy {self.policy!r}") from exc
        steps = self.duration / self.t_s
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError("duration must be a multiple of t_s")
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if self.vehicles is not None and len(self.vehicles) != self.n_vehicles:
            raise ConfigError("per-vehicle list must have n_vehicles entries")
        if self.seed is not None:
            self.channel = ChannelConfig(self.channel.t_c, self.channel.p_success, self.seed)
        try:
            self.params_list()
            Channel(self.channel, self.t_s)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def n_steps(self):
        return int(round(self.duration / self.t_s))

    def params_list(self):
        if self.vehicles is None:
            return [self.vehicle] * self.n_vehicles
        return [self.vehicle.with_(**(v or {})) for v in self.vehicles]

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "vehicle" in data:
                data["vehicle"] = VehicleParams(**data["vehicle"])
            if "channel" in data:
                data["channel"] = ChannelConfig(**data["channel"])
            if "leader_reference" in data:
                ref = data["leader_reference"]
                data["leader_reference"] = LeaderReference(tuple(ref["times"]), tuple(ref["speeds"]))
            for key in ("Q",):
                if key in data:
                    data[key] = tuple(data[key])
            return cls(**data)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_dict(self):
        out = asdict(self)
        out["leader_reference"] = {"times": list(self.leader_reference.times),
                                   "speeds": list(self.leader_reference.speeds)}
        out["Q"] = list(self.Q)
        return out


TRACE_FIELDS = ("step", "t", "vehicle", "x", "v", "a", "u", "gap", "gap_error", "source",
                "xi_E0", "nodes", "status")
DIAG_FIELDS = ("step", "vehicle", "policy", "source", "xi_E0", "objective", "nodes",
               "solve_time", "status", "safety_event")


@dataclass
class TraceRecord:
    step: int
    t: float
    vehicle: int
    x: float
    v: float
    a: float
    u: float
    gap: float
    gap_error: float
    source: str
    xi_E0: int
    nodes: int
    status: str

    def row(self):
        return [self.step, repr(self.t), self.vehicle, repr(self.x), repr(self.v), repr(self.a),
                repr(self.u), repr(self.gap), repr(self.gap_error), self.source, self.xi_E0,
                self.nodes, self.status]


@dataclass
class Metrics:
    collision: bool
    collision_time: float | None
    collision_vehicle: int | None
    min_gap: float
    emergency_activations: int
    emergency_duration: float
    emergency_by_phase: list
    rms_gap_error: dict
    settling_time: dict
    phase_end_gap_error: list
    phase_speed_overshoot: list
    phase_gap_overshoot: list
    safety_events: int
    budget_warnings: int
    steps: int

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            lines.append(f"{key}: {_fmt(value)}")
        return "\n".join(lines) + "\n"


def _fmt(value):
    if isinstance(value, float):
        return repr(round(value, 9))
    if isinstance(value, dict):
        return "{" + ", ".join(f"{k}: {_fmt(v)}" for k, v in value.items()) + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    return str(value)


@dataclass
class SimResult:
    config: ScenarioConfig
    trace: list
    diagnostics: list
    metrics: Metrics

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_FIELDS)
        for rec in self.trace:
            writer.writerow(rec.row())
        return buf.getvalue()

    def diagnostics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(DIAG_FIELDS)
        for d in self.diagnostics:
            writer.writerow([d[f] for f in DIAG_FIELDS])
        return buf.getvalue()

    def write(self, out_dir):
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trace.csv").write_text(self.trace_csv())
        (out / "diagnostics.csv").write_text(self.diagnostics_csv())
        (out / "metrics.txt").write_text(self.metrics.to_text())


def initial_formation(params_list, v0):
    """Leader at x=0, each follower at its desired gap behind its predecessor."""
    states = [KinematicState(0.0, v0, 0.0)]
    for i in range(1, len(params_list)):
        prev = states[-1]
        x = prev.x - params_list[i - 1].length - desired_gap(v0, params_list[i])
        states.append(KinematicState(x, v0, 0.0))
    return states


def run(config: ScenarioConfig) -> SimResult:
    """Synchronous loop: sense, communicate, plan, step plants, log."""
    policy = Policy(config.policy)
    params = config.params_list()
    n, N, t_s = config.n_vehicles, config.horizon, config.t_s
    ctrl_cfg = ControllerConfig(horizon=N, t_s=t_s,
                                weights=MpcWeights(Q=tuple(config.Q), q=config.q),
                                chance_bound=config.chance_bound, node_budget=config.node_budget,
                                gp_refit_local=config.gp_refit_local)
    leader = LeaderController(params[0], LeaderConfig(N, t_s, config.leader_speed_weight,
                                                      config.leader_accel_weight))
    followers = [None] + [FollowerController(params[i], policy, ctrl_cfg) for i in range(1, n)]
    stores = [None] + [PredecessorStore() for _ in range(1, n)]
    channel = Channel(config.channel, t_s)
    send_profile = policy in (Policy.DHMPC, Policy.DH_DHSMPC)
    send_gp = policy in (Policy.DHSMPC, Policy.DH_DHSMPC)

    states = initial_formation(params, config.initial_speed)
    u_prev = [s.a for s in states]
    # own-speed history for the GP window, prefilled with the steady initial speed
    history = [deque(((j - 4) * t_s, s.v) for j in range(gpmod.WINDOW_SIZE)) for s in states]
    profiles = [np.zeros(N) for _ in range(n)]  # planned accel for steps k..k+N-1
    trace, diagnostics = [], []

    for k in range(config.n_steps):
        t = k * t_s
        # 1. sense
        errs, gaps = [None] * n, [math.inf] * n
        for i in range(1, n):
            errs[i] = error_state(states[i], states[i - 1], params[i - 1].length, params[i],
                                  strict=False)
            gaps[i] = states[i - 1].x - states[i].x - params[i - 1].length
            stores[i].observe(t, states[i - 1].v)
        collided = any(g <= 0 for g in gaps[1:])

        # 2. broadcast and deliver
        fresh = [False] * n
        if channel.broadcast_step(k):
            packets = []
            for i in range(n - 1):
                payload = None
                if send_gp:
                    times, speeds = zip(*history[i])
                    payload = gpmod.fit(times, speeds, ctrl_cfg.gp_jitter,
                                        params[i].v_max).to_payload()
                prof = tuple(float(a) for a in profiles[i]) if send_profile else None
                packets.append(Packet(i, k, prof, payload))
            for packet, ok in channel.transmit(k, packets):
                if ok:
                    stores[packet.sender + 1].receive(packet)
                    fresh[packet.sender + 1] = True

        # 3. plan (all from the step-start snapshot)
        results = [None] * n
        v_ref = [config.leader_reference(t + j * t_s) for j in range(N + 1)]
        u0, accel = leader.plan(states[0], v_ref, u_prev[0])
        results[0] = (u0, accel, None)
        for i in range(1, n):
            if collided and gaps[i] <= 0:
                p = params[i]
                results[i] = (p.u_min, np.full(N, p.u_min), None)
                continue
            res = followers[i].plan(errs[i], states[i].v, stores[i], k, u_prev[i], fresh[i])
            results[i] = (res.u, res.accel_profile, res)

        # 4. log
        for i in range(n):
            u, _, res = results[i]
            s = states[i]
            trace.append(TraceRecord(
                k, t, i, s.x, s.v, s.a, u,
                gaps[i] if i else math.inf, errs[i].gap_error if i else 0.0,
                res.source.value if res else ("leader" if i == 0 else "collided"),
                res.xi_E0 if res else 0, res.nodes if res else 0,
                res.status if res else ("optimal" if i == 0 else "collided")))
            if res is not None:
                diagnostics.append({"step": k, "vehicle": i, "policy": policy.value,
                                    "source": res.source.value, "xi_E0": res.xi_E0,
                                    "objective": repr(res.objective), "nodes": res.nodes,
                                    "solve_time": f"{res.solve_time:.6f}", "status": res.status,
                                    "safety_event": int(res.safety_event)})
        if collided and config.halt_on_collision:
            break

        # 5. advance plants
        for i in range(n):
            u, accel, _ = results[i]
            states[i] = step_plant(states[i], u, params[i], t_s)
            # a vehicle held at standstill carries no braking demand into the next step
            u_prev[i] = max(u, 0.0) if states[i].v == 0.0 else u
            history[i].append(((k + 1) * t_s, states[i].v))
            if len(history[i]) > gpmod.WINDOW_SIZE:
                history[i].popleft()
            profiles[i] = np.asarray(accel, dtype=float)[:N]

    metrics = compute_metrics(trace, t_s, config.leader_reference, diagnostics,
                              lookahead=(N + 1) * t_s)
    return SimResult(config, trace, diagnostics, metrics)


def compute_metrics(trace, t_s=0.1, reference: LeaderReference = LeaderReference(),
                    diagnostics=None, speed_tol=0.1, lookahead=0.0) -> Metrics:
    """Summary statistics of a run; collision iff any follower gap <= 0.

    Settling is judged on each phase up to ``lookahead`` seconds before the
    next reference switch, since a predictive leader starts reacting once the
    switch enters its horizon.
    """
    if not trace:
        raise ValueError("empty trace")
    steps = max(r.step for r in trace) + 1
    vehicles = sorted({r.vehicle for r in trace})
    followers = [i for i in vehicles if i != 0]
    by_vehicle = {i: [r for r in trace if r.vehicle == i] for i in vehicles}

    crash = next((r for r in trace if r.vehicle != 0 and r.gap <= 0), None)
    gaps = [r.gap for r in trace if r.vehicle != 0]
    min_gap = min(gaps) if gaps else math.inf

    bounds = [0.0, *reference.times, steps * t_s]
    phases = [(bounds[j], bounds[j + 1], reference.speeds[j]) for j in range(len(bounds) - 1)
              if bounds[j] < steps * t_s]

    activations, active_steps = 0, 0
    by_phase = [0] * len(phases)
    for i in followers:
        prev = 0
        for r in by_vehicle[i]:
            if r.xi_E0 and not prev:
                activations += 1
                for j, (lo, hi, _) in enumerate(phases):
                    if lo <= r.t < hi:
                        by_phase[j] += 1
            active_steps += r.xi_E0
            prev = r.xi_E0

    rms = {i: math.sqrt(sum(r.gap_error ** 2 for r in by_vehicle[i]) / len(by_vehicle[i]))
           for i in followers}

    leader_v = {r.step: r.v for r in by_vehicle.get(0, [])}
    settling = {}
    end_err, speed_over, gap_over = [], [], []
    for j, (lo, hi, v_ref) in enumerate(phases):
        if j < len(phases) - 1 or hi < steps * t_s:
            hi = max(lo + t_s, hi - lookahead)
        phase_recs = {i: [r for r in by_vehicle[i] if lo <= r.t < hi - 1e-9] for i in vehicles}
        for i in followers:
            recs = phase_recs[i]
            settled_at = None
            for r in recs:
                ok = abs(r.v - leader_v.get(r.step, r.v)) < speed_tol
                if ok and settled_at is None:
                    settled_at = r.t
                elif not ok:
                    settled_at = None
            settling[f"{i}@{lo:g}"] = None if settled_at is None else settled_at - lo
        last = [phase_recs[i][-1] for i in followers if phase_recs[i]]
        end_err.append(max((abs(r.gap_error) for r in last), default=0.0))
        recs = [r for i in followers for r in phase_recs[i]]
        speed_over.append(max((r.v - v_ref for r in recs), default=0.0))
        gap_over.append(max((abs(r.gap_error) for r in recs), default=0.0))

    safety = budget = 0
    for d in diagnostics or []:
        safety += int(d["safety_event"])
        budget += int(d["status"] == "budget")
    return Metrics(
        collision=crash is not None,
        collision_time=crash.t if crash else None,
        collision_vehicle=crash.vehicle if crash else None,
        min_gap=min_gap,
        emergency_activations=activations,
        emergency_duration=active_steps * t_s,
        emergency_by_phase=by_phase,
        rms_gap_error=rms,
        settling_time=settling,
        phase_end_gap_error=end_err,
        phase_speed_overshoot=speed_over,
        phase_gap_overshoot=gap_over,
        safety_events=safety,
        budget_warnings=budget,
        steps=steps,
    )
