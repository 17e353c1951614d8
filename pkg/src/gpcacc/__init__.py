"""Longitudinal CACC platoon simulator with hybrid stochastic MPC and GP forecasting."""
from .comms import Channel, ChannelConfig, Packet
from .controller import (ControllerConfig, FollowerController, LeaderController, Policy,
                         PredecessorStore, Source)
from .dynamics import (CollisionError, DiscreteSystem, ErrorState, KinematicState, VehicleParams,
                       desired_gap, discrete_system, error_state, step_plant)
from .gp import GaussianProcessSpeedModel, GpHyperParams, discretize
from .mld import MldProgram, MpcWeights, PredecessorPlan, build, validate
from .miqp import enumerate_solve, solve_miqp, solve_qp
from .sim import LeaderReference, ScenarioConfig, compute_metrics, leader_reference, run

__version__ = "0.1.0"
