"""Longitudinal vehicle plant, constant time-headway spacing and error-state model."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


class CollisionError(ValueError):
    """Raised when a follower overlaps its predecessor (gap <= 0)."""

    def __init__(self, gap):
        super().__init__(f"vehicles overlap: gap {gap:.4f} m <= 0")
        self.gap = gap


@dataclass(frozen=True)
class VehicleParams:
    """Physical and comfort parameters of one vehicle.

    Defaults are the case-study values; ``v_max`` is an engineering choice
    above the 27 m/s cruise speed.
    """

    length: float = 5.0
    standstill_gap: float = 2.0
    tau: float = 1.0
    f: float = 10.0
    a_min: float = -4.0
    a_max: float = 3.0
    u_min: float = -4.0
    u_max: float = 3.0
    v_max: float = 30.0
    v_lo: float = 1.0
    d_under: float = 1.0

    def __post_init__(self):
        if not self.a_min < 0 < self.a_max:
            raise ValueError("need a_min < 0 < a_max")
        if not self.u_min < 0 < self.u_max:
            raise ValueError("need u_min < 0 < u_max")
        for name in ("tau", "length", "standstill_gap", "f", "v_lo", "d_under", "v_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def with_(self, **changes) -> "VehicleParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class KinematicState:
    x: float  # rear bumper position
    v: float
    a: float


@dataclass(frozen=True)
class ErrorState:
    gap_error: float
    speed_error: float
    accel: float

    def as_array(self) -> np.ndarray:
        return np.array([self.gap_error, self.speed_error, self.accel])


@dataclass(frozen=True)
class DiscreteSystem:
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    E: np.ndarray
    t_s: float


def desired_gap(v, params: VehicleParams):
    """Constant time-headway spacing ``tau * v + d_s``."""
    return params.tau * v + params.standstill_gap


def gap(ego: KinematicState, pred: KinematicState, pred_len: float) -> float:
    return pred.x - ego.x - pred_len


def error_state(ego: KinematicState, pred: KinematicState, pred_len: float,
                params: VehicleParams, strict: bool = True) -> ErrorState:
    """Gap error, speed error and own acceleration of ``ego`` behind ``pred``.

    With ``strict`` an overlapping pair raises :class:`CollisionError`.
    """
    d = gap(ego, pred, pred_len)
    if strict and d <= 0:
        raise CollisionError(d)
    return ErrorState(d - desired_gap(ego.v, params), pred.v - ego.v, ego.a)


def continuous_matrices(params: VehicleParams):
    A = np.array([[0.0, 1.0, -params.tau],
                  [0.0, 0.0, -1.0],
                  [0.0, 0.0, -params.f]])
    B = np.array([0.0, 0.0, params.f])
    D = np.array([0.0, 1.0, 0.0])
    return A, B, D


def discrete_system(params: VehicleParams, t_s: float) -> DiscreteSystem:
    """Forward-Euler discretization of the error dynamics.

    The uncertainty column ``E`` injects a speed offset directly (no ``t_s``
    factor).
    """
    if t_s < 0 or t_s * params.f > 1.0:
        raise ValueError(f"invalid sampling time t_s={t_s} (need 0 <= t_s*f <= 1)")
    A, B, D = continuous_matrices(params)
    return DiscreteSystem(A=np.eye(3) + t_s * A, B=t_s * B, D=t_s * D,
                          E=np.array([0.0, 1.0, 0.0]), t_s=t_s)


def step_plant(state: KinematicState, u: float, params: VehicleParams,
               t_s: float) -> KinematicState:
    """Advance one vehicle by one forward-Euler step.

    Speed is clamped at zero and acceleration at the physical bounds; a
    stopped vehicle cannot keep a negative acceleration.
    """
    x = state.x + t_s * state.v
    v = state.v + t_s * state.a
    a = state.a + t_s * (-params.f * state.a + params.f * u)
    a = min(max(a, params.a_min), params.a_max)
    if v <= 0.0:
        v = 0.0
        a = max(a, 0.0)
    return KinematicState(x, v, a)
