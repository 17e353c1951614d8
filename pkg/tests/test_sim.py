import math

import numpy as np
import pytest

from gpcacc.dynamics import VehicleParams, desired_gap
from gpcacc.sim import (ConfigError, LeaderReference, ScenarioConfig, TraceRecord, compute_metrics,
                        initial_formation, leader_reference, run)


def short(**kw):
    base = dict(n_vehicles=3, duration=2.0, leader_reference={"times": [], "speeds": [20.0]},
                initial_speed=20.0)
    base.update(kw)
    return ScenarioConfig.from_dict(base)


def rec(step, vehicle, gap=10.0, gap_error=0.0, v=20.0, xi=0, t_s=0.1):
    return TraceRecord(step, step * t_s, vehicle, 0.0, v, 0.0, 0.0, gap, gap_error, "gp", xi, 1, "optimal")


@pytest.mark.parametrize("t,v", [(0.0, 27.0), (14.9, 27.0), (15.0, 0.0), (29.99, 0.0), (30.0, 25.0),
                                 (59.9, 25.0)])
def test_leader_reference(t, v):
    assert leader_reference(t) == v


def test_leader_reference_rejects_negative_time():
    with pytest.raises(ValueError):
        LeaderReference()(-0.1)


def test_initial_formation_at_desired_gaps():
    params = [VehicleParams(tau=0.7)] * 3
    states = initial_formation(params, 27.0)
    for a, b in zip(states, states[1:]):
        assert a.x - b.x - 5.0 == pytest.approx(desired_gap(27.0, params[0]))


@pytest.mark.parametrize("policy", ["dhmpc", "dhsmpc", "dh-dhsmpc"])
def test_equilibrium_platoon_stays_put(policy):
    res = run(short(policy=policy))
    assert not res.metrics.collision
    for r in res.trace:
        assert abs(r.v - 20.0) < 1e-3
        if r.vehicle:
            assert abs(r.gap_error) < 1e-3
    assert res.metrics.safety_events == 0 and res.metrics.emergency_activations == 0


def test_trace_gap_is_consistent_with_positions():
    res = run(short(duration=1.0, leader_reference={"times": [0.5], "speeds": [20.0, 15.0]}))
    by_step = {}
    for r in res.trace:
        by_step.setdefault(r.step, {})[r.vehicle] = r
    for recs in by_step.values():
        for i in (1, 2):
            assert recs[i].gap == pytest.approx(recs[i - 1].x - recs[i].x - 5.0, abs=1e-9)


def test_runs_are_byte_identical():
    cfg = short(policy="dh-dhsmpc", channel={"t_c": 0.5, "p_success": 0.6}, seed=4,
                leader_reference={"times": [0.5], "speeds": [20.0, 18.0]})
    a, b = run(cfg), run(cfg)
    assert a.trace_csv() == b.trace_csv()
    assert a.metrics.to_text() == b.metrics.to_text()


def test_outputs_written(tmp_path):
    res = run(short(duration=0.3))
    res.write(tmp_path / "out")
    lines = (tmp_path / "out" / "trace.csv").read_text().splitlines()
    assert lines[0].startswith("step,t,vehicle")
    assert len(lines) == 1 + 3 * 3
    assert "collision: False" in (tmp_path / "out" / "metrics.txt").read_text()
    assert (tmp_path / "out" / "diagnostics.csv").exists()


def test_metrics_synthetic_collision():
    trace = [rec(0, 0), rec(0, 1, gap=3.0), rec(1, 0), rec(1, 1, gap=-0.2)]
    m = compute_metrics(trace, reference=LeaderReference((), (20.0,)))
    assert m.collision and m.collision_time == pytest.approx(0.1) and m.collision_vehicle == 1
    assert m.min_gap == pytest.approx(-0.2)


def test_metrics_rms_and_emergencies():
    errs = [0.0, 1.0, -2.0, 2.0]
    xis = [0, 1, 1, 0]
    trace = []
    for k, (e, xi) in enumerate(zip(errs, xis)):
        trace += [rec(k, 0), rec(k, 1, gap_error=e, xi=xi)]
    m = compute_metrics(trace, reference=LeaderReference((), (20.0,)))
    assert m.rms_gap_error[1] == pytest.approx(math.sqrt(9 / 4))
    assert m.emergency_activations == 1
    assert m.emergency_duration == pytest.approx(0.2)
    assert not m.collision


def test_metrics_empty_trace():
    with pytest.raises(ValueError):
        compute_metrics([])


@pytest.mark.parametrize("bad", [dict(policy="pid"), dict(bogus=1), dict(duration=1.05),
                                 dict(channel={"t_c": 0.25}), dict(vehicle={"tau": -1.0}),
                                 dict(n_vehicles=0), dict(vehicles=[{}])])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        short(**bad)


def test_config_roundtrip_and_seed_override():
    cfg = short(seed=11, channel={"t_c": 1.0, "p_success": 0.75, "seed": 2})
    assert cfg.channel.seed == 11
    again = ScenarioConfig.from_dict(cfg.to_dict())
    assert again == cfg


def test_per_vehicle_overrides():
    cfg = short(vehicles=[{}, {"tau": 1.2}, {"f": 5.0}])
    params = cfg.params_list()
    assert params[1].tau == 1.2 and params[2].f == 5.0 and params[0] == cfg.vehicle


def test_load_yaml(tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text("policy: dhmpc\nvehicle:\n  tau: 0.7\nchannel:\n  t_c: 1.0\n  p_success: 0.75\n")
    cfg = ScenarioConfig.load(path)
    assert cfg.policy == "dhmpc" and cfg.vehicle.tau == 0.7 and cfg.channel.t_c == 1.0
    assert np.isclose(cfg.channel.p_success, 0.75)
