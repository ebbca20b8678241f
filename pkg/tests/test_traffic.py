import itertools
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from arenasim.errors import ContractError, SaturationError, ValidationError
from arenasim.traffic import (
    DEFAULT_LENGTH,
    DEFAULT_WIDTH,
    EGO_ID,
    AgentPlan,
    IDMParams,
    ManeuverOption,
    TrafficConfig,
    VehicleState,
    WorldState,
    decide_maneuvers,
    detect_collisions,
    idm_accel,
    interpolate_agent_plan,
    joint_utility,
    plan_vehicle,
    set_ego_mode,
    solve_joint,
    spawn_background_traffic,
    step,
)
from oracles import idm_follow_stopped, straight_road

ROAD = straight_road(1000.0, oneway="yes")
LANE = "10:0:f0"


def world_with(*vehicles, mode="open_loop"):
    """Ego parked at the lane start plus the given background vehicles."""
    ego = VehicleState(EGO_ID, *ROAD.lanes[LANE].pose(0.0), lane_id=LANE, role="ego")
    vs = {EGO_ID: ego}
    for v in vehicles:
        vs[v.id] = v
    return WorldState(tick=0, vehicles=vs, ego_mode=mode)


def on_lane(vid, station, speed):
    x, y, yaw = ROAD.lanes[LANE].pose(station)
    return VehicleState(vid, x, y, yaw, speed=speed, lane_id=LANE, station=station)


def bumper_gaps(world):
    bg = sorted(world.background(), key=lambda v: v.station)
    return [b.station - a.station - (a.length + b.length) / 2 for a, b in zip(bg, bg[1:]) if a.lane_id == b.lane_id]


# ---------------------------------------------------------------------------
# Spawning


def test_zero_density_spawns_ego_only():
    w = spawn_background_traffic(ROAD, TrafficConfig(spawn_density=0.0))
    assert list(w.vehicles) == [EGO_ID]


def test_spawn_count_and_spacing():
    cfg = TrafficConfig(spawn_density=10.0, seed=4)
    w = spawn_background_traffic(ROAD, cfg)
    assert len(w.background()) == 10
    assert min(bumper_gaps(w)) >= cfg.idm.min_gap - 1e-9
    assert [v.id for v in sorted(w.background(), key=lambda v: v.id)] == [f"bg{i:04d}" for i in range(1, 11)]


def test_spawn_is_deterministic_per_seed():
    a = spawn_background_traffic(ROAD, TrafficConfig(spawn_density=10.0, seed=7))
    b = spawn_background_traffic(ROAD, TrafficConfig(spawn_density=10.0, seed=7))
    c = spawn_background_traffic(ROAD, TrafficConfig(spawn_density=10.0, seed=8))
    assert a.to_record() == b.to_record()
    assert a.to_record() != c.to_record()


def test_spawn_saturation():
    with pytest.raises(SaturationError) as exc:
        spawn_background_traffic(ROAD, TrafficConfig(spawn_density=1000.0))
    assert 0 < exc.value.achievable < 1000


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 60.0), st.integers(0, 2**32))
def test_spawned_vehicles_never_overlap(density, seed):
    g = straight_road(600.0, highway="secondary", lanes="4")
    w = spawn_background_traffic(g, TrafficConfig(spawn_density=density, seed=seed))
    assert detect_collisions(w) == []
    for v in w.background():
        lane = g.lanes[v.lane_id]
        assert not lane.is_connector
        assert (v.length / 2) <= v.station <= lane.length - v.length / 2
    json.dumps(w.to_record())


@pytest.mark.parametrize(
    "kwargs",
    [
        {"cooperation_factor": 1.5},
        {"spawn_density": -1.0},
        {"seed": -1},
        {"idm": IDMParams(max_accel=0.0)},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ValidationError):
        TrafficConfig(**kwargs).validate()


# ---------------------------------------------------------------------------
# IDM


@given(st.floats(0, 30), st.floats(1, 30), st.floats(0.1, 200), st.floats(-20, 20))
def test_idm_matches_closed_form(v, v0, gap, dv):
    p = IDMParams()
    s_star = p.min_gap + max(0.0, v * p.time_headway + v * dv / (2 * math.sqrt(p.max_accel * p.comfort_decel)))
    expected = p.max_accel * (1 - (v / v0) ** 4 - (s_star / gap) ** 2)
    assert idm_accel(v, v0, gap, dv, p) == pytest.approx(expected, rel=1e-12, abs=1e-12)


@given(st.floats(0, 13.9))
def test_free_road_acceleration(v):
    p = IDMParams()
    assert idm_accel(v, 13.9, None, 0.0, p) == pytest.approx(p.max_accel * (1 - (v / 13.9) ** 4))


def test_free_road_plan_follows_idm():
    veh = on_lane("bg0001", 300.0, 5.0)
    cfg = TrafficConfig()
    traj = plan_vehicle(world_with(veh), veh, None, ROAD, cfg)
    v0 = min(cfg.idm.desired_speed, ROAD.lanes[LANE].speed_limit)
    assert traj.a[0] == pytest.approx(cfg.idm.max_accel * (1 - (5.0 / v0) ** 4), rel=1e-9)
    assert len(traj) == 31 and np.all(np.diff(traj.t) == pytest.approx(0.1))


def test_stationary_vehicle_with_zero_desired_speed_stays():
    cfg = TrafficConfig(idm=IDMParams(desired_speed=0.0))
    veh = on_lane("bg0001", 300.0, 0.0)
    traj = plan_vehicle(world_with(veh), veh, None, ROAD, cfg)
    assert np.allclose(traj.x, veh.x) and np.allclose(traj.y, veh.y) and np.all(traj.v == 0)


def test_follower_plan_matches_forward_integration():
    cfg = TrafficConfig()
    follower = on_lane("bg0001", 300.0, 6.0)
    leader = on_lane("bg0002", 300.0 + DEFAULT_LENGTH + 40.0, 0.0)
    traj = plan_vehicle(world_with(follower, leader), follower, None, ROAD, cfg)
    gaps = leader.station - traj.station - DEFAULT_LENGTH
    ref = idm_follow_stopped(6.0, 40.0, replace(cfg.idm, desired_speed=min(cfg.idm.desired_speed, ROAD.lanes[LANE].speed_limit)))
    assert np.allclose(gaps, ref, atol=1e-6)


@pytest.mark.parametrize("v0", [0.0, 1.0, 2.0, 3.0])
def test_stopped_leader_five_metres_ahead_keeps_min_gap(v0):
    # from 5 m the minimum gap is reachable at max_accel braking for v0 <= sqrt(2 * 2 * 3)
    cfg = TrafficConfig()
    follower = on_lane("bg0001", 300.0, v0)
    leader = on_lane("bg0002", 300.0 + DEFAULT_LENGTH + 5.0, 0.0)
    w = world_with(follower, leader)
    traj = plan_vehicle(w, follower, None, ROAD, cfg)
    assert not traj.degraded
    assert np.all(leader.station - traj.station - DEFAULT_LENGTH >= cfg.idm.min_gap - 1e-9)
    assert np.all(np.abs(traj.a) <= cfg.idm.max_accel + 1e-9)
    for _ in range(100):
        w = step(w, 0.1, ROAD, cfg)
        w.vehicles["bg0002"] = leader  # hold the leader still
        gap = w.vehicles["bg0002"].station - w.vehicles["bg0001"].station - DEFAULT_LENGTH
        assert gap >= cfg.idm.min_gap - 1e-9
    # IDM approaches the minimum gap asymptotically: creeping, not exactly stopped
    assert w.vehicles["bg0001"].speed < 0.05
    assert gap < cfg.idm.min_gap + 0.5
    assert w.collisions == []


def test_infeasible_approach_falls_back_to_emergency_brake():
    cfg = TrafficConfig()
    follower = on_lane("bg0001", 300.0, 8.0)
    leader = on_lane("bg0002", 300.0 + DEFAULT_LENGTH + 5.0, 0.0)
    traj = plan_vehicle(world_with(follower, leader), follower, None, ROAD, cfg)
    assert traj.degraded and traj.kind == "emergency-brake"
    assert traj.a[0] == pytest.approx(-cfg.idm.comfort_decel * 1.5)


# ---------------------------------------------------------------------------
# Maneuver decisions


def test_lone_vehicle_keeps_lane_at_desired_speed():
    veh = on_lane("bg0001", 300.0, 10.0)
    cfg = TrafficConfig()
    m = decide_maneuvers(world_with(veh), ROAD, cfg)
    assert m["bg0001"].action == "keep-lane"
    assert m["bg0001"].target_speed == pytest.approx(min(cfg.idm.desired_speed, ROAD.lanes[LANE].speed_limit))


def test_slow_leader_triggers_lane_change_on_multilane_road():
    g = straight_road(1000.0, highway="secondary", lanes="4")
    fwd = sorted(lid for lid in g.lanes if ":f" in lid)
    lane = g.lanes[fwd[0]]
    mk = lambda vid, s, v: VehicleState(vid, *lane.pose(s), speed=v, lane_id=lane.id, station=s)
    ego = VehicleState(EGO_ID, *g.lanes[fwd[1]].pose(5.0), lane_id=fwd[1], role="ego", station=5.0)
    w = WorldState(0, {EGO_ID: ego, "bg0001": mk("bg0001", 300, 12.0), "bg0002": mk("bg0002", 320, 2.0)}, ego_mode="open_loop")
    m = decide_maneuvers(w, g, TrafficConfig())
    assert m["bg0001"].action.startswith("lane-change")
    assert m["bg0001"].target_lane == fwd[1]


def brute_force_joint(options, coop):
    ids = sorted(options)
    best = -math.inf
    for combo in itertools.product(*(options[v] for v in ids)):
        gaps = [o.gap for o in combo if o.gap]
        if len(gaps) == len(set(gaps)):
            best = max(best, sum(o.utility(coop) for o in combo))
    return best


option_sets = st.dictionaries(
    st.sampled_from(["bg0001", "bg0002", "bg0003"]),
    st.lists(
        st.tuples(st.sampled_from(["lane-change-left", "lane-change-right"]), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2)),
        max_size=2,
    ),
    min_size=3,
    max_size=3,
)


def build_options(raw):
    return {
        vid: [ManeuverOption("keep-lane", "L0", 0.0, 0.0, ())]
        + [ManeuverOption(a, f"L{g}", own, oth, (f"L{g}", "lead", "follow")) for a, own, oth, g in changes]
        for vid, changes in raw.items()
    }


@settings(max_examples=200, suppress_health_check=[HealthCheck.too_slow])
@given(option_sets, st.floats(0, 1))
def test_joint_decision_matches_exhaustive_enumeration(raw, coop):
    opts = build_options(raw)
    close = {vid: (float(i), 0.0) for i, vid in enumerate(sorted(opts))}
    choice = solve_joint(opts, coop, close)
    assert joint_utility(choice, coop) == pytest.approx(brute_force_joint(opts, coop), abs=1e-9)
    gaps = [o.gap for o in choice.values() if o.gap]
    assert len(gaps) == len(set(gaps))


@settings(max_examples=200)
@given(option_sets)
def test_full_cooperation_never_worse_for_everyone(raw):
    opts = build_options(raw)
    close = {vid: (float(i), 0.0) for i, vid in enumerate(sorted(opts))}
    selfish = solve_joint(opts, 0.0, close)
    coop = solve_joint(opts, 1.0, close)
    assert joint_utility(coop, 1.0) >= joint_utility(selfish, 1.0) - 1e-12
    assert brute_force_joint(opts, 1.0) == pytest.approx(joint_utility(coop, 1.0), abs=1e-9)


def test_tie_goes_to_lower_id():
    gap = ("L1", None, None)
    opts = {
        vid: [ManeuverOption("keep-lane", "L0", 0.0, 0.0, ()), ManeuverOption("lane-change-left", "L1", 1.0, 0.0, gap)]
        for vid in ("bg0002", "bg0001")
    }
    choice = solve_joint(opts, 0.5, {"bg0001": (0.0, 0.0), "bg0002": (5.0, 0.0)})
    assert choice["bg0001"].action == "lane-change-left"
    assert choice["bg0002"].action == "keep-lane"


def test_distant_vehicles_decide_independently():
    gap = ("L1", None, None)
    opts = {
        vid: [ManeuverOption("keep-lane", "L0", 0.0, 0.0, ()), ManeuverOption("lane-change-left", "L1", 1.0, 0.0, gap)]
        for vid in ("bg0001", "bg0002")
    }
    choice = solve_joint(opts, 0.5, {"bg0001": (0.0, 0.0), "bg0002": (500.0, 0.0)})
    assert all(o.action == "lane-change-left" for o in choice.values())


# ---------------------------------------------------------------------------
# Stepping


def test_zero_velocity_world_is_static():
    cfg = TrafficConfig(idm=IDMParams(desired_speed=0.0))
    w0 = world_with(on_lane("bg0001", 300.0, 0.0), on_lane("bg0002", 500.0, 0.0))
    w1 = step(w0, 0.1, ROAD, cfg)
    for vid, v in w0.vehicles.items():
        assert w1.vehicles[vid].pose == pytest.approx(v.pose)
    assert w1.tick == 1 and w1.sim_time == pytest.approx(0.1)


def test_closed_loop_ego_follows_plan():
    cfg = TrafficConfig()
    w = world_with(mode="closed_loop")
    plan = AgentPlan(np.array([[5.0 * k, 0.0, 0.0] for k in range(1, 7)]))
    w = set_ego_mode(w, "closed_loop", plan)
    x0 = w.ego.x
    w1 = step(w, 0.1, ROAD, cfg)
    assert w1.ego.x - x0 == pytest.approx(1.0, abs=1e-9)
    assert w1.ego.speed == pytest.approx(10.0)


def test_closed_loop_without_plan_is_contract_error():
    with pytest.raises(ContractError):
        step(world_with(mode="closed_loop"), 0.1, ROAD, TrafficConfig())


def test_step_rejects_other_dt():
    with pytest.raises(ValidationError):
        step(world_with(), 0.05, ROAD, TrafficConfig())


def test_vehicle_leaving_dead_end_is_despawned():
    cfg = TrafficConfig(idm=IDMParams(desired_speed=0.0))
    lane = ROAD.lanes[LANE]
    veh = on_lane("bg0001", lane.length - 0.01, 0.0)
    veh = replace(veh, speed=5.0)
    cfg = TrafficConfig()
    w = step(world_with(veh), 0.1, ROAD, cfg)
    assert "bg0001" not in w.vehicles and w.despawned == ["bg0001"]


def test_mode_switch_mid_episode_rejected():
    w = world_with(on_lane("bg0001", 300.0, 5.0))
    w = step(w, 0.1, ROAD, TrafficConfig())
    with pytest.raises(ContractError):
        set_ego_mode(w, "closed_loop")
    assert set_ego_mode(w, "open_loop").ego_mode == "open_loop"


def test_unknown_mode_rejected():
    with pytest.raises(ValidationError):
        set_ego_mode(world_with(), "hybrid")


# ---------------------------------------------------------------------------
# Collisions


def test_identical_boxes_penetrate_by_min_side():
    a = on_lane("bg0001", 300.0, 0.0)
    w = world_with(a, replace(a, id="bg0002"))
    ev = [e for e in detect_collisions(w) if EGO_ID not in e.ids]
    assert len(ev) == 1 and ev[0].penetration == pytest.approx(min(DEFAULT_LENGTH, DEFAULT_WIDTH))
    assert ev[0].ids == ("bg0001", "bg0002")


def test_boxes_ten_metres_apart_do_not_collide():
    w = world_with(on_lane("bg0001", 300.0, 0.0), on_lane("bg0002", 310.0, 0.0))
    assert detect_collisions(w) == []


# ---------------------------------------------------------------------------
# Agent plan interpolation


def test_interpolation_constant_speed():
    plan = AgentPlan(np.array([[1.0 * k, 0.0, 0.0] for k in range(1, 7)]))
    traj = interpolate_agent_plan(plan)
    assert len(traj) == 31
    assert np.allclose(traj.x, 0.2 * np.arange(31), atol=1e-12)
    assert np.allclose(traj.y, 0.0) and np.allclose(traj.yaw, 0.0)


@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(-3, 3)), min_size=6, max_size=6))
def test_interpolation_keeps_knots_and_is_linear(wps):
    wp = np.array(wps)
    traj = interpolate_agent_plan(AgentPlan(wp, issued_at=2.5))
    assert np.array_equal(np.column_stack([traj.x, traj.y, traj.yaw])[5::5], wp)
    assert traj.t[0] == 2.5 and traj.t[-1] == pytest.approx(5.5)
    knots = np.vstack([[0.0, 0.0], wp[:, :2]])
    tk = np.arange(7) * 0.5
    assert np.allclose(traj.x, np.interp(np.arange(31) * 0.1, tk, knots[:, 0]), atol=1e-9)
    assert np.allclose(traj.y, np.interp(np.arange(31) * 0.1, tk, knots[:, 1]), atol=1e-9)


def test_interpolation_rejects_bad_plans():
    with pytest.raises(ValidationError):
        interpolate_agent_plan(AgentPlan(np.zeros((5, 3))))
    bad = np.zeros((6, 3))
    bad[2, 0] = np.nan
    with pytest.raises(ValidationError):
        interpolate_agent_plan(AgentPlan(bad))
