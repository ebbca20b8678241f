"""Driving-agent wire protocol and reference agents.

An agent receives an :class:`AgentObservation` (camera images, ego status and
a route hint) and answers with an :class:`~arenasim.traffic.AgentPlan` of six
ego-frame waypoints. A remote agent implements ``POST /plan``.

Built-in agents:

* ``rule_based`` - privileged planner with full world access: pure pursuit on
  the route reference path plus IDM speed control.
* ``constant_velocity`` - keeps the current speed straight ahead.
* ``replay`` - returns the plans recorded in an episode log, in order.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import geometry as geo
from . import traffic as tr
from .dreamer import _images_doc, _images_from_doc, _join, canonical_json, http_post, parse_json
from .errors import ContractViolation, ProtocolError, ValidationError
from .roadnet import RoadGraph, Route

PROTOCOL_VERSION = "1.0"
BUILTIN_AGENTS = ("rule_based", "replay", "constant_velocity", "hard_left")
COMMAND_LOOKAHEAD = 20.0
RECOVERY_DISTANCE = 10.0
WHEELBASE = 2.8
MAX_CURVATURE = 1.0 / 4.5
MIN_LOOKAHEAD = 4.0
LOOKAHEAD_TIME = 0.8


@dataclass
class AgentObservation:
    frame_id: int
    images: dict[str, np.ndarray]
    ego_status: tuple[float, float, float]  # speed, accel, yaw rate
    command: tuple[float, float]  # next route goal point, ego frame
    timestamp: float

    def validate(self, cameras=None) -> "AgentObservation":
        nums = [*self.ego_status, *self.command, self.timestamp]
        if not all(math.isfinite(v) for v in nums):
            raise ValidationError("observation numerics must be finite")
        if cameras is not None and set(self.images) != set(cameras):
            raise ValidationError("observation image set is incomplete")
        return self


def encode_observation(obs: AgentObservation) -> bytes:
    return canonical_json(
        {
            "protocol_version": PROTOCOL_VERSION,
            "frame_id": obs.frame_id,
            "images": _images_doc(obs.images),
            "ego_status": {"speed": float(obs.ego_status[0]), "accel": float(obs.ego_status[1]), "yaw_rate": float(obs.ego_status[2])},
            "command": [float(obs.command[0]), float(obs.command[1])],
            "timestamp": float(obs.timestamp),
        }
    )


def decode_observation(body: bytes) -> AgentObservation:
    doc = parse_json(body)
    try:
        st = doc["ego_status"]
        obs = AgentObservation(
            int(doc["frame_id"]),
            _images_from_doc(doc["images"]),
            (float(st["speed"]), float(st["accel"]), float(st["yaw_rate"])),
            (float(doc["command"][0]), float(doc["command"][1])),
            float(doc["timestamp"]),
        )
    except KeyError as exc:
        raise ProtocolError(f"observation is missing field {exc}") from exc
    except (TypeError, ValueError, IndexError) as exc:
        raise ProtocolError(f"malformed observation: {exc}") from exc
    try:
        return obs.validate()
    except ValidationError as exc:
        raise ProtocolError(str(exc)) from exc


def encode_plan(plan: tr.AgentPlan, frame_id: int | None = None) -> bytes:
    doc = {
        "protocol_version": PROTOCOL_VERSION,
        "waypoints": [[float(v) for v in wp] for wp in plan.waypoints],
        "issued_at": float(plan.issued_at),
    }
    if frame_id is not None:
        doc["frame_id"] = frame_id
    return canonical_json(doc)


def decode_plan(body: bytes) -> tr.AgentPlan:
    """Parse a plan body. Wrong waypoint counts are contract violations."""
    doc = parse_json(body)
    try:
        wps = doc["waypoints"]
        issued = float(doc["issued_at"])
        if not isinstance(wps, list) or not all(isinstance(w, list) and len(w) == 3 for w in wps):
            raise ProtocolError("waypoints must be a list of [x, y, yaw] triples")
        arr = np.array(wps, dtype=float).reshape(-1, 3)
    except KeyError as exc:
        raise ProtocolError(f"plan is missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed plan: {exc}") from exc
    if len(arr) != 6:
        raise ContractViolation(f"plan has {len(arr)} waypoints, expected 6")
    plan = tr.AgentPlan(arr, issued)
    try:
        return plan.validate()
    except ValidationError as exc:
        raise ContractViolation(str(exc)) from exc


# ---------------------------------------------------------------------------
# Bindings


@dataclass(frozen=True)
class AgentBinding:
    kind: str = "rule_based"
    endpoint: str | None = None
    timeout_ms: float = 30000.0

    def validate(self) -> "AgentBinding":
        if self.kind not in BUILTIN_AGENTS + ("remote",):
            raise ValidationError(f"unknown agent kind {self.kind!r}")
        if (self.kind == "remote") != bool(self.endpoint):
            raise ValidationError("endpoint is required exactly for remote agents")
        if not self.timeout_ms > 0:
            raise ValidationError("timeout_ms must be positive")
        return self


@dataclass
class AgentContext:
    """Privileged simulator state handed to built-in agents."""

    world: tr.WorldState
    graph: RoadGraph
    route: Route
    config: tr.TrafficConfig = field(default_factory=tr.TrafficConfig)


class Agent:
    degraded = False

    def plan(self, obs: AgentObservation, ctx: AgentContext | None) -> tr.AgentPlan:
        raise NotImplementedError


class ConstantVelocityAgent(Agent):
    def plan(self, obs, ctx=None):
        v = obs.ego_status[0]
        wp = np.array([[v * t, 0.0, 0.0] for t in tr.AgentPlan.TIMES])
        return tr.AgentPlan(wp, obs.timestamp)


class HardLeftAgent(Agent):
    """Adversarial policy that steers a tight left circle regardless of the road.

    Useful for checking that off-road termination fires.
    """

    def __init__(self, speed: float = 5.0, curvature: float = 1.0 / 8.0):
        self.speed = speed
        self.curvature = curvature

    def plan(self, obs, ctx=None):
        v = max(obs.ego_status[0], self.speed)
        k = self.curvature
        s = v * np.asarray(tr.AgentPlan.TIMES, dtype=float)
        wp = np.stack([np.sin(k * s) / k, (1.0 - np.cos(k * s)) / k, k * s], axis=1)
        return tr.AgentPlan(wp, obs.timestamp)


class RuleBasedAgent(Agent):
    def plan(self, obs, ctx):
        if ctx is None:
            raise ValidationError("rule_based agent needs the simulator context")
        plan = rule_based_plan(ctx.world, ctx.graph, ctx.route, ctx.config)
        self.degraded = plan_is_degraded(plan)
        return plan


class ReplayAgent(Agent):
    def __init__(self, plans: list[tr.AgentPlan]):
        self._plans = list(plans)
        self._i = 0

    def plan(self, obs, ctx=None):
        if self._i >= len(self._plans):
            raise ContractViolation("replay agent ran out of recorded plans")
        p = self._plans[self._i]
        self._i += 1
        return p


class RemoteAgent(Agent):
    def __init__(self, binding: AgentBinding):
        self.binding = binding.validate()
        self.last_latency_ms = 0.0

    def plan(self, obs, ctx=None):
        t0 = time.perf_counter()
        body = http_post(_join(self.binding.endpoint, "/plan"), encode_observation(obs), self.binding.timeout_ms / 1000.0)
        self.last_latency_ms = (time.perf_counter() - t0) * 1000.0
        return decode_plan(body)


def make_agent(binding: AgentBinding, recorded_plans: list[tr.AgentPlan] | None = None) -> Agent:
    binding.validate()
    if binding.kind == "rule_based":
        return RuleBasedAgent()
    if binding.kind == "constant_velocity":
        return ConstantVelocityAgent()
    if binding.kind == "hard_left":
        return HardLeftAgent()
    if binding.kind == "replay":
        if recorded_plans is None:
            raise ValidationError("replay agent needs recorded plans")
        return ReplayAgent(recorded_plans)
    return RemoteAgent(binding)


def request_plan(agent: Agent | AgentBinding, obs: AgentObservation, ctx: AgentContext | None = None) -> tr.AgentPlan:
    """Ask an agent for a plan and enforce the 6-waypoint contract."""
    if isinstance(agent, AgentBinding):
        agent = make_agent(agent)
    obs.validate()
    plan = agent.plan(obs, ctx)
    if len(plan.waypoints) != 6:
        raise ContractViolation(f"plan has {len(plan.waypoints)} waypoints, expected 6")
    try:
        return plan.validate()
    except ValidationError as exc:
        raise ContractViolation(str(exc)) from exc


# ---------------------------------------------------------------------------
# Rule-based planner


class _DegradedPlan(tr.AgentPlan):
    pass


def plan_is_degraded(plan: tr.AgentPlan) -> bool:
    return isinstance(plan, _DegradedPlan)


def route_station(world: tr.WorldState, route: Route) -> tuple[float, float]:
    """(station, lateral) of the ego on ``route``, tracked near the last progress."""
    ego = world.ego
    pts, s = tr.extended_route(route)
    if world.ego_route is route:
        pts, s = tr._window(pts, s, world.ego_progress - 5.0, world.ego_progress + 30.0)
    st, lat = tr.project_many(np.array([[ego.x, ego.y]]), pts, s)
    return float(st[0]), float(lat[0])


def route_command(world: tr.WorldState, route: Route) -> tuple[float, float]:
    """Route point :data:`COMMAND_LOOKAHEAD` m ahead, in the ego frame."""
    st, _ = route_station(world, route)
    target = route.point(min(route.total_length, st + COMMAND_LOOKAHEAD))
    local = geo.to_local(np.asarray(target, dtype=float), world.ego.pose)
    return float(local[0]), float(local[1])


def _pursuit(path_pts, path_s, pose, v_profile, ds_profile, sigma_start):
    """Roll out pure pursuit with a kinematic unicycle at 10 Hz.

    ``ds_profile`` holds the distance travelled in each step (taken from the
    speed planner so gap clamping carries over exactly); ``v_profile`` only
    sets the lookahead.
    """
    x, y, yaw = pose
    out = [(x, y, yaw)]
    sigma = sigma_start
    for k in range(tr.N_SAMPLES - 1):
        v = v_profile[k]
        ld = max(MIN_LOOKAHEAD, LOOKAHEAD_TIME * v + 2.0)
        pts, s = tr._window(path_pts, path_s, sigma - 2.0, sigma + 10.0)
        sigma = float(tr.project_many(np.array([[x, y]]), pts, s)[0][0])
        tx, ty = geo.point_at(path_pts, path_s, sigma + ld)
        alpha = math.atan2(ty - y, tx - x) - yaw
        alpha = math.atan2(math.sin(alpha), math.cos(alpha))
        kappa = max(-MAX_CURVATURE, min(MAX_CURVATURE, 2.0 * math.sin(alpha) / ld))
        ds = ds_profile[k]
        dyaw = kappa * ds
        x += ds * math.cos(yaw + 0.5 * dyaw)
        y += ds * math.sin(yaw + 0.5 * dyaw)
        yaw += dyaw
        out.append((x, y, yaw))
    return np.array(out)


def rule_based_plan(world: tr.WorldState, graph: RoadGraph, route: Route, config: tr.TrafficConfig | None = None) -> tr.AgentPlan:
    """Privileged reference plan (pure pursuit + IDM), six ego-frame waypoints.

    If the ego is more than :data:`RECOVERY_DISTANCE` from the route the plan
    steers straight back to the nearest route point and is flagged degraded
    (see :func:`plan_is_degraded`).
    """
    config = config or tr.TrafficConfig()
    p = config.idm
    ego = world.ego
    sigma0, lat = route_station(world, route)
    if abs(lat) > RECOVERY_DISTANCE:
        target = route.point(min(route.total_length, sigma0))
        local = geo.to_local(np.asarray(target, float), ego.pose)
        heading = math.atan2(local[1], local[0])
        dist = math.hypot(local[0], local[1])
        speed = min(max(ego.speed, 2.0), 5.0)
        wps = []
        for t in tr.AgentPlan.TIMES:
            d = min(dist, speed * t)
            wps.append([d * math.cos(heading), d * math.sin(heading), heading])
        return _DegradedPlan(np.array(wps), world.sim_time)

    sig, vel, _, _ = tr.ego_speed_plan(world, graph, route, sigma0, p)
    pts, s = tr.extended_route(route)
    traj = _pursuit(pts, s, ego.pose, vel, np.diff(sig), sigma0)
    local_xy = geo.to_local(traj[:, :2], ego.pose)
    local_yaw = np.asarray(geo.wrap_angle(traj[:, 2] - ego.yaw))
    idx = [5, 10, 15, 20, 25, 30]
    wps = np.column_stack([local_xy[idx], local_yaw[idx]])
    return tr.AgentPlan(wps, world.sim_time)


# ---------------------------------------------------------------------------
# Service


def make_agent_server(policy, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """HTTP agent service. ``policy(obs) -> AgentPlan`` (or a raw waypoint array)."""

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _send(self, code, body):
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            if self.path.rstrip("/") != "/plan":
                self._send(404, canonical_json({"error": "not found"}))
                return
            body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
            try:
                obs = decode_observation(body)
            except ProtocolError as exc:
                self._send(400, canonical_json({"error": str(exc)}))
                return
            out = policy(obs)
            if isinstance(out, tr.AgentPlan):
                wps, issued = out.waypoints, out.issued_at
            else:
                wps, issued = np.asarray(out, dtype=float), obs.timestamp
            doc = {"protocol_version": PROTOCOL_VERSION, "waypoints": [[float(v) for v in w] for w in wps], "issued_at": float(issued)}
            self._send(200, canonical_json(doc))

    return ThreadingHTTPServer((host, port), Handler)
