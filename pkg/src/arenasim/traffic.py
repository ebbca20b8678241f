"""Microscopic traffic engine.

Background vehicles follow lanes with an Intelligent Driver Model (IDM)
longitudinal controller. Every control tick (2 Hz) a joint maneuver decision is
taken for all background vehicles; every physics step (10 Hz) each vehicle
re-plans a 3 s trajectory from a small candidate set scored with the
configured trajectory weights and advances one step along it.

The joint decision is a cooperative gap-acceptance scheme. Each candidate
lane change of vehicle ``i`` has utility::

    u_i = (a_i(change) - a_i(keep) - CHANGE_THRESHOLD)
          + cooperation_factor * (gain of old follower + gain of new follower)

where the accelerations are IDM accelerations before and after the change.
Within interaction clusters (vehicles closer than :data:`INTERACTION_RADIUS`)
all joint assignments are enumerated and the one with the largest utility sum
is kept, subject to no two vehicles entering the same gap.

Junctions are managed with grants: a vehicle may enter a connector lane only
after it has been granted, and a grant is refused while a conflicting
connector is held or the ego is close to the junction.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import geometry as geo
from .errors import ContractError, SaturationError, ValidationError
from .roadnet import RoadGraph, Route

DT = 0.1
HORIZON = 3.0
N_SAMPLES = 31
CONTROL_PERIOD_TICKS = 5

DEFAULT_LENGTH = 4.6
DEFAULT_WIDTH = 1.8
DEFAULT_HEIGHT = 1.5

INTERACTION_RADIUS = 30.0
CHANGE_THRESHOLD = 0.1
MAX_JOINT_ASSIGNMENTS = 3**8
LANE_CHANGE_DURATIONS = (2.5, 3.5, 4.5)
HEADWAY_SCALES = (1.0, 1.4)
EMERGENCY_FACTOR = 1.5
OFF_ROAD_FRAMES = 5
EGO_JUNCTION_ZONE = 25.0
EGO_JUNCTION_TIME = 5.0
LOOKAHEAD = 80.0
EGO_CORRIDOR_MARGIN = 0.6
LATERAL_ACCEL_LIMIT = 2.0
SPAWN_EGO_CLEARANCE = 15.0

EGO_ID = "ego"
OFF_ROAD = "off-road"


@dataclass(frozen=True)
class IDMParams:
    desired_speed: float = 13.9
    time_headway: float = 1.5
    min_gap: float = 2.0
    max_accel: float = 2.0
    comfort_decel: float = 2.0

    def validate(self):
        for name, value in asdict(self).items():
            if not (value >= 0.0 and math.isfinite(value)):
                raise ValidationError(f"idm.{name} must be a finite non-negative number")
        if self.max_accel <= 0 or self.comfort_decel <= 0:
            raise ValidationError("idm.max_accel and idm.comfort_decel must be positive")


@dataclass(frozen=True)
class TrajectoryWeights:
    efficiency: float = 1.0
    comfort: float = 1.0
    safety: float = 1.0

    def validate(self):
        vals = (self.efficiency, self.comfort, self.safety)
        if any(v < 0 or not math.isfinite(v) for v in vals) or sum(vals) == 0:
            raise ValidationError("trajectory weights must be non-negative and not all zero")


@dataclass(frozen=True)
class TrafficConfig:
    cooperation_factor: float = 0.5
    trajectory_weights: TrajectoryWeights = field(default_factory=TrajectoryWeights)
    spawn_density: float = 8.0
    seed: int = 0
    idm: IDMParams = field(default_factory=IDMParams)

    def validate(self):
        if not 0.0 <= self.cooperation_factor <= 1.0:
            raise ValidationError("cooperation_factor must lie in [0, 1]")
        if self.spawn_density < 0:
            raise ValidationError("spawn_density must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        self.trajectory_weights.validate()
        self.idm.validate()
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrafficConfig":
        d = dict(d)
        if "trajectory_weights" in d:
            d["trajectory_weights"] = TrajectoryWeights(**d["trajectory_weights"])
        if "idm" in d:
            d["idm"] = IDMParams(**d["idm"])
        return cls(**d).validate()


@dataclass(frozen=True)
class LaneChange:
    d0: float
    t0: float
    duration: float

    def offset(self, t):
        tau = np.clip((np.asarray(t, dtype=float) - self.t0) / self.duration, 0.0, 1.0)
        return self.d0 * (1.0 - (10 * tau**3 - 15 * tau**4 + 6 * tau**5))


@dataclass(frozen=True)
class VehicleState:
    id: str
    x: float
    y: float
    yaw: float
    speed: float = 0.0
    accel: float = 0.0
    length: float = DEFAULT_LENGTH
    width: float = DEFAULT_WIDTH
    lane_id: str = OFF_ROAD
    role: str = "background"
    station: float = 0.0
    lane_change: LaneChange | None = None

    def __post_init__(self):
        if self.speed < 0:
            raise ValidationError(f"vehicle {self.id}: negative speed")
        if self.length <= 0 or self.width <= 0:
            raise ValidationError(f"vehicle {self.id}: footprint must be positive")

    @property
    def pose(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.yaw)

    def corners(self) -> np.ndarray:
        return geo.box_corners(self.x, self.y, self.yaw, self.length, self.width)

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "pose": [self.x, self.y, self.yaw],
            "speed": self.speed,
            "accel": self.accel,
            "footprint": [self.length, self.width],
            "lane_id": self.lane_id,
            "role": self.role,
            "station": self.station,
        }
        if self.lane_change is not None:
            rec["lane_change"] = [self.lane_change.d0, self.lane_change.t0, self.lane_change.duration]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "VehicleState":
        lc = rec.get("lane_change")
        return cls(
            id=rec["id"],
            x=rec["pose"][0],
            y=rec["pose"][1],
            yaw=rec["pose"][2],
            speed=rec["speed"],
            accel=rec["accel"],
            length=rec["footprint"][0],
            width=rec["footprint"][1],
            lane_id=rec["lane_id"],
            role=rec["role"],
            station=rec.get("station", 0.0),
            lane_change=LaneChange(*lc) if lc else None,
        )


@dataclass(frozen=True)
class Maneuver:
    action: str  # keep-lane | lane-change-left | lane-change-right
    target_speed: float
    target_lane: str


@dataclass(frozen=True)
class CollisionEvent:
    time: float
    ids: tuple[str, str]
    penetration: float

    def to_record(self) -> dict:
        return {"time": self.time, "ids": list(self.ids), "penetration": self.penetration}


@dataclass
class Trajectory:
    """A 10 Hz trajectory in the map frame."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    yaw: np.ndarray
    v: np.ndarray | None = None
    a: np.ndarray | None = None
    station: np.ndarray | None = None
    lateral: np.ndarray | None = None
    degraded: bool = False
    kind: str = ""
    score: float = 0.0

    def __len__(self):
        return len(self.t)

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])


@dataclass(frozen=True)
class AgentPlan:
    """Six ego-frame waypoints at t = 0.5, 1.0, ..., 3.0 s after ``issued_at``."""

    waypoints: np.ndarray
    issued_at: float = 0.0

    TIMES = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] not in (2, 3):
            raise ValidationError("waypoints must be an (N, 3) array of (x, y, yaw)")
        if wp.shape[1] == 2:
            wp = np.column_stack([wp, np.zeros(len(wp))])
        object.__setattr__(self, "waypoints", wp)

    def validate(self) -> "AgentPlan":
        if len(self.waypoints) != 6:
            raise ValidationError(f"plan has {len(self.waypoints)} waypoints, expected 6")
        if not np.all(np.isfinite(self.waypoints)) or not math.isfinite(self.issued_at):
            raise ValidationError("plan contains non-finite values")
        return self


@dataclass
class WorldState:
    tick: int
    vehicles: dict[str, VehicleState]
    ego_mode: str = "closed_loop"
    active_ego_plan: Trajectory | None = None
    recorded_plan: AgentPlan | None = None
    maneuvers: dict[str, Maneuver] = field(default_factory=dict)
    grants: dict[str, str] = field(default_factory=dict)
    collisions: list[CollisionEvent] = field(default_factory=list)
    despawned: list[str] = field(default_factory=list)
    degraded: list[str] = field(default_factory=list)
    off_road_count: int = 0
    ego_route: Route | None = None
    ego_progress: float = 0.0

    @property
    def sim_time(self) -> float:
        return self.tick / 10.0

    @property
    def ego(self) -> VehicleState:
        return self.vehicles[EGO_ID]

    def background(self) -> list[VehicleState]:
        return [v for k, v in self.vehicles.items() if k != EGO_ID]

    def copy(self) -> "WorldState":
        return replace(
            self,
            vehicles=dict(self.vehicles),
            maneuvers=dict(self.maneuvers),
            grants=dict(self.grants),
            collisions=list(self.collisions),
            despawned=list(self.despawned),
            degraded=list(self.degraded),
        )

    def to_record(self) -> dict:
        return {
            "sim_time": self.sim_time,
            "tick": self.tick,
            "vehicles": [self.vehicles[k].to_record() for k in sorted(self.vehicles)],
            "maneuvers": {k: [m.action, m.target_speed, m.target_lane] for k, m in sorted(self.maneuvers.items())},
            "grants": dict(sorted(self.grants.items())),
            "collisions": [c.to_record() for c in self.collisions],
            "despawned": list(self.despawned),
            "degraded": list(self.degraded),
            "ego_progress": self.ego_progress,
            "off_road_count": self.off_road_count,
        }


# ---------------------------------------------------------------------------
# IDM


def idm_accel(v: float, v0: float, gap: float | None, dv: float, p: IDMParams, headway_scale: float = 1.0) -> float:
    """Unclamped IDM acceleration.

    ``gap`` is the bumper-to-bumper distance to the leader (``None`` for a free
    road) and ``dv`` the approach rate ``v - v_leader``.
    """
    if v0 <= 0.0:
        free = -p.max_accel if v > 0 else 0.0
        if v <= 0 and gap is None:
            return 0.0
    else:
        free = p.max_accel * (1.0 - (v / v0) ** 4)
    if gap is None:
        return free
    s_star = p.min_gap + max(0.0, v * p.time_headway * headway_scale + v * dv / (2.0 * math.sqrt(p.max_accel * p.comfort_decel)))
    gap = max(gap, 1e-3)
    return free - p.max_accel * (s_star / gap) ** 2


# ---------------------------------------------------------------------------
# Lane paths


@dataclass
class LanePath:
    lanes: list[str]
    offsets: np.ndarray
    points: np.ndarray
    s: np.ndarray
    speed_limits: list[float]

    def locate(self, sigma: float) -> tuple[str, float]:
        i = int(np.searchsorted(self.offsets, sigma, side="right")) - 1
        i = min(max(i, 0), len(self.lanes) - 1)
        return self.lanes[i], sigma - self.offsets[i]

    def point(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        return np.column_stack([np.interp(sigma, self.s, self.points[:, 0]), np.interp(sigma, self.s, self.points[:, 1])])

    def normal_heading(self, sigma):
        idx = np.clip(np.searchsorted(self.s, sigma, side="right") - 1, 0, len(self.points) - 2)
        d = self.points[idx + 1] - self.points[idx]
        return np.arctan2(d[..., 1], d[..., 0])

    @property
    def end(self) -> float:
        return float(self.s[-1])


def _stable_hash(*parts) -> int:
    h = hashlib.sha256("|".join(map(str, parts)).encode()).digest()
    return int.from_bytes(h[:8], "big")


def choose_successor(graph: RoadGraph, lane_id: str, vehicle_id: str, seed: int) -> str | None:
    succ = graph.lanes[lane_id].successors
    if not succ:
        return None
    return succ[_stable_hash(seed, vehicle_id, lane_id) % len(succ)]


def lane_path(graph: RoadGraph, lane_id: str, vehicle_id: str, seed: int, ahead: float = LOOKAHEAD + 40.0) -> LanePath:
    cache = graph.__dict__.setdefault("_path_cache", {})
    key = (lane_id, vehicle_id, seed)
    if key in cache:
        return cache[key]
    lanes = [lane_id]
    pieces = [graph.lanes[lane_id].centerline]
    offsets = [0.0]
    total = graph.lanes[lane_id].length
    cur = lane_id
    while total < ahead + graph.lanes[lane_id].length:
        nxt = choose_successor(graph, cur, vehicle_id, seed)
        if nxt is None or nxt in lanes:
            break
        lanes.append(nxt)
        offsets.append(total)
        pieces.append(graph.lanes[nxt].centerline[1:])
        total += graph.lanes[nxt].length
        cur = nxt
    pts = np.vstack(pieces)
    s = geo.arclength(pts)
    # keep lane offsets consistent with the concatenated polyline
    offs = []
    acc = 0.0
    for lid in lanes:
        offs.append(acc)
        acc += graph.lanes[lid].length
    path = LanePath(lanes, np.array(offs), pts, s, [graph.lanes[l].speed_limit for l in lanes])
    if len(cache) > 20000:
        cache.clear()
    cache[key] = path
    return path


def project_many(points: np.ndarray, polyline: np.ndarray, s_cum: np.ndarray):
    """Vectorized projection of ``points`` (N, 2) onto a polyline.

    Returns (stations, signed laterals).
    """
    a = polyline[:-1]
    d = polyline[1:] - a
    L2 = np.einsum("ij,ij->i", d, d)
    L2 = np.where(L2 > 0, L2, 1.0)
    rel = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("nmk,mk->nm", rel, d) / L2, 0.0, 1.0)
    foot = a[None] + t[..., None] * d[None]
    diff = points[:, None, :] - foot
    dist2 = np.einsum("nmk,nmk->nm", diff, diff)
    idx = np.argmin(dist2, axis=1)
    rows = np.arange(len(points))
    st = s_cum[idx] + t[rows, idx] * (s_cum[idx + 1] - s_cum[idx])
    cross = d[idx, 0] * rel[rows, idx, 1] - d[idx, 1] * rel[rows, idx, 0]
    lat = np.where(cross < 0, -1.0, 1.0) * np.sqrt(dist2[rows, idx])
    return st, lat


def _window(path_pts, path_s, lo, hi):
    i0 = max(0, int(np.searchsorted(path_s, lo, side="right")) - 1)
    i1 = min(len(path_s), int(np.searchsorted(path_s, hi, side="left")) + 1)
    if i1 - i0 < 2:
        i0 = max(0, min(i0, len(path_s) - 2))
        i1 = i0 + 2
    return path_pts[i0:i1], path_s[i0:i1]


# ---------------------------------------------------------------------------
# Spawning


def _vehicle_on_lane(graph: RoadGraph, vid: str, lane_id: str, station: float, speed: float, role="background") -> VehicleState:
    x, y, yaw = graph.lanes[lane_id].pose(station)
    return VehicleState(vid, x, y, yaw, speed=speed, lane_id=lane_id, role=role, station=station)


def _ego_state(graph: RoadGraph, route: Route | None, ego_speed: float = 0.0) -> VehicleState:
    if route is None:
        lid = next(iter(graph.lanes))
        return _vehicle_on_lane(graph, EGO_ID, lid, 0.0, ego_speed, role="ego")
    p = route.point(0.0)
    yaw = route.heading(0.0)
    snap = graph.nearest_lane(p, heading=yaw) or graph.nearest_lane(p)
    lid, st = (snap[0], snap[1]) if snap else (OFF_ROAD, 0.0)
    return VehicleState(EGO_ID, float(p[0]), float(p[1]), yaw, speed=ego_speed, lane_id=lid, role="ego", station=st)


def spawn_background_traffic(
    graph: RoadGraph, config: TrafficConfig, route: Route | None = None, ego_speed: float = 0.0, mode: str = "closed_loop"
) -> WorldState:
    """Place the ego and background vehicles.

    Vehicles are spawned on road lanes only (never on junction connectors).
    Each lane keeps a margin of ``(length + min_gap) / 2`` at both ends and a
    clearance around the ego; the requested count ``round(density * km)`` is
    split over the usable intervals by largest remainder, and vehicles sit on
    evenly pitched slots jittered by the seeded generator without breaking the
    ``length + min_gap`` centre spacing.
    """
    config.validate()
    if not graph.lanes:
        raise ValidationError("graph has no lanes")
    ego = _ego_state(graph, route, ego_speed)
    vehicles = {EGO_ID: ego}
    world = WorldState(tick=0, vehicles=vehicles, ego_mode=mode, ego_route=route)
    if config.spawn_density <= 0:
        return world

    pitch_min = DEFAULT_LENGTH + config.idm.min_gap
    margin = pitch_min / 2.0
    intervals = []
    for lid, lane in graph.lanes.items():
        if lane.is_connector:
            continue
        segs = [(margin, lane.length - margin)]
        st, lat, dist = lane.project((ego.x, ego.y))
        if dist < lane.width:
            clear = pitch_min + SPAWN_EGO_CLEARANCE
            new = []
            for a, b in segs:
                if st - clear > a:
                    new.append((a, min(b, st - clear)))
                if st + clear < b:
                    new.append((max(a, st + clear), b))
            segs = new
        for a, b in segs:
            if b - a > 0:
                intervals.append((lid, a, b))
    total_len = sum(lane.length for lane in graph.lanes.values() if not lane.is_connector)
    count = int(math.floor(config.spawn_density * total_len / 1000.0 + 0.5))
    usable = sum(b - a for _, a, b in intervals)
    caps = [int(math.floor((b - a) / pitch_min)) + 1 if b - a >= 0 else 0 for _, a, b in intervals]
    achievable = sum(caps)
    if count > achievable:
        raise SaturationError(f"{count} vehicles requested but only {achievable} fit", achievable)
    if count == 0 or usable <= 0:
        return world

    # largest-remainder allocation, capped by slot capacity
    quotas = [count * (b - a) / usable for _, a, b in intervals]
    alloc = [min(int(q), c) for q, c in zip(quotas, caps)]
    order = sorted(range(len(intervals)), key=lambda i: (-(quotas[i] - int(quotas[i])), i))
    remaining = count - sum(alloc)
    while remaining > 0:
        progressed = False
        for i in order:
            if remaining == 0:
                break
            if alloc[i] < caps[i]:
                alloc[i] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise SaturationError(f"{count} vehicles requested but only {sum(alloc)} fit", sum(alloc))

    rng = np.random.default_rng(config.seed)
    n = 0
    for (lid, a, b), k in zip(intervals, alloc):
        if k == 0:
            continue
        lane = graph.lanes[lid]
        if k == 1:
            stations = [a + (b - a) * rng.uniform()]
        else:
            pitch = (b - a) / (k - 1) if k > 1 else 0.0
            slack = max(0.0, (pitch - pitch_min) / 2.0)
            base = a + pitch * np.arange(k)
            jitter = rng.uniform(-slack, slack, size=k)
            jitter[0] = abs(jitter[0])
            jitter[-1] = -abs(jitter[-1])
            stations = list(np.clip(base + jitter, a, b))
        for st in stations:
            n += 1
            vid = f"bg{n:04d}"
            # slow enough to stop before the lane end if the junction is busy
            room = max(0.0, lane.length - st - DEFAULT_LENGTH / 2.0 - 1.0)
            speed = min(min(config.idm.desired_speed, lane.speed_limit) * 0.6, math.sqrt(config.idm.comfort_decel * room))
            vehicles[vid] = _vehicle_on_lane(graph, vid, lid, float(st), speed)
    return world


# ---------------------------------------------------------------------------
# Neighbour queries


def _ahead_on_path(world: WorldState, graph, veh: VehicleState, path: LanePath, sigma0: float, d_now: float, config):
    """Nearest vehicle ahead on ``path``: (gap, leader speed along path, id)."""
    c, sn = math.cos(veh.yaw), math.sin(veh.yaw)
    others = []
    for o in world.vehicles.values():
        dx, dy = o.x - veh.x, o.y - veh.y
        if o.id != veh.id and abs(dx) < LOOKAHEAD and abs(dy) < LOOKAHEAD and dx * c + dy * sn > -veh.length:
            others.append(o)
    if not others:
        return None
    pts, s = _window(path.points, path.s, sigma0 - 5.0, sigma0 + LOOKAHEAD)
    xy = np.array([(o.x, o.y) for o in others])
    st, lat = project_many(xy, pts, s)
    best = None
    for o, sj, lj in zip(others, st, lat):
        if sj <= sigma0 or sj >= s[-1] - 1e-6 and sj - sigma0 > LOOKAHEAD:
            continue
        thr = (veh.width + o.width) / 2.0 + 0.3
        if abs(lj) > thr and abs(lj - d_now) > thr:
            continue
        gap = sj - sigma0 - (veh.length + o.length) / 2.0
        h = float(path.normal_heading(sj))
        vl = max(0.0, o.speed * math.cos(o.yaw - h))
        if best is None or (gap, o.id) < (best[0], best[2]):
            best = (gap, vl, o.id)
    return best


def _next_connector(graph: RoadGraph, path: LanePath, sigma0: float, horizon: float):
    for lid, off in zip(path.lanes, path.offsets):
        if off < sigma0 - 1e-9 and graph.lanes[lid].is_connector and off + graph.lanes[lid].length > sigma0:
            return None  # already inside a connector
        if off >= sigma0 - 1e-9 and graph.lanes[lid].is_connector:
            return (lid, float(off)) if off - sigma0 <= horizon else None
    return None


def _speed_target(path: LanePath, sigma0: float, p: IDMParams, horizon: float = 60.0) -> float:
    """Desired speed capped by current and upcoming lane speed limits."""
    v = p.desired_speed
    for lim, off in zip(path.speed_limits, path.offsets):
        if off > sigma0 + horizon:
            break
        dist = max(0.0, off - sigma0)
        v = min(v, math.sqrt(lim * lim + 2.0 * p.comfort_decel * 0.75 * dist))
    return v


# ---------------------------------------------------------------------------
# Decisions


def _lane_neighbors(world: WorldState, graph: RoadGraph, lane_id: str, station: float, exclude: str):
    """(leader, follower) on a lane as (station, vehicle) pairs.

    Vehicles are attributed to the lane recorded in their state.
    """
    cands = [(o.station, o) for o in world.vehicles.values() if o.lane_id == lane_id and o.id != exclude]
    leader = min(((st, o) for st, o in cands if st > station), default=None, key=lambda t: (t[0], t[1].id))
    follower = max(((st, o) for st, o in cands if st <= station), default=None, key=lambda t: (t[0], t[1].id))
    return leader, follower


def _pair_accel(follower: VehicleState, f_st: float, leader, v0: float, p: IDMParams) -> float:
    if leader is None:
        return idm_accel(follower.speed, v0, None, 0.0, p)
    l_st, lv = leader
    gap = l_st - f_st - (follower.length + lv.length) / 2.0
    return idm_accel(follower.speed, v0, gap, follower.speed - lv.speed, p)


@dataclass(frozen=True)
class ManeuverOption:
    action: str
    target_lane: str
    own_gain: float
    others_gain: float
    gap: tuple

    def utility(self, cooperation: float) -> float:
        if self.action == "keep-lane":
            return 0.0
        return self.own_gain - CHANGE_THRESHOLD + cooperation * self.others_gain


def maneuver_options(world: WorldState, graph: RoadGraph, config: TrafficConfig) -> dict[str, list[ManeuverOption]]:
    """Feasible maneuvers per background vehicle with their utility terms."""
    p = config.idm
    out: dict[str, list[ManeuverOption]] = {}
    for veh in sorted(world.background(), key=lambda v: v.id):
        opts = [ManeuverOption("keep-lane", veh.lane_id, 0.0, 0.0, ())]
        out[veh.id] = opts
        lane = graph.lanes.get(veh.lane_id)
        if lane is None or lane.is_connector or veh.lane_change is not None or veh.speed < 2.0:
            continue
        remaining = lane.length - veh.station
        if remaining < max(30.0, veh.speed * max(LANE_CHANGE_DURATIONS) + 10.0):
            continue
        v0 = min(p.desired_speed, lane.speed_limit)
        cur_leader, cur_follower = _lane_neighbors(world, graph, veh.lane_id, veh.station, veh.id)
        a_keep = _pair_accel(veh, veh.station, cur_leader, v0, p)
        for action, tgt in (("lane-change-left", lane.left_neighbor), ("lane-change-right", lane.right_neighbor)):
            if tgt is None:
                continue
            tl = graph.lanes[tgt]
            t_st = tl.project((veh.x, veh.y))[0]
            if tl.length - t_st < remaining - 5.0 and tl.length - t_st < 30.0:
                continue
            leader, follower = _lane_neighbors(world, graph, tgt, t_st, veh.id)
            if leader is not None and leader[0] - t_st - (veh.length + leader[1].length) / 2.0 < p.min_gap:
                continue
            if follower is not None and t_st - follower[0] - (veh.length + follower[1].length) / 2.0 < p.min_gap:
                continue
            a_new = _pair_accel(veh, t_st, leader, min(p.desired_speed, tl.speed_limit), p)
            others = 0.0
            if follower is not None:
                fv = follower[1]
                before = _pair_accel(fv, follower[0], leader, p.desired_speed, p)
                after = _pair_accel(fv, follower[0], (t_st, veh), p.desired_speed, p)
                if after < -p.comfort_decel:
                    continue
                others += after - before
            if cur_follower is not None:
                fv = cur_follower[1]
                before = _pair_accel(fv, cur_follower[0], (veh.station, veh), p.desired_speed, p)
                after = _pair_accel(fv, cur_follower[0], cur_leader, p.desired_speed, p)
                others += after - before
            gap_key = (tgt, leader[1].id if leader else None, follower[1].id if follower else None)
            opts.append(ManeuverOption(action, tgt, a_new - a_keep, others, gap_key))
    return out


def solve_joint(options: dict[str, list[ManeuverOption]], cooperation: float, positions: dict[str, tuple[float, float]]):
    """Pick one option per vehicle maximising the summed utility.

    Vehicles are grouped into clusters of mutual distance below
    :data:`INTERACTION_RADIUS`; each cluster is enumerated exhaustively (up to
    :data:`MAX_JOINT_ASSIGNMENTS`, greedily by id beyond that). Two lane
    changes into the same gap are never selected together. Ties prefer fewer
    lane changes, then lane changes by lower ids.
    """
    ids = sorted(options)
    choice = {vid: options[vid][0] for vid in ids}
    active = [vid for vid in ids if len(options[vid]) > 1]
    parent = {v: v for v in active}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for a, b in itertools.combinations(active, 2):
        pa, pb = positions[a], positions[b]
        if math.hypot(pa[0] - pb[0], pa[1] - pb[1]) < INTERACTION_RADIUS:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    clusters: dict[str, list[str]] = {}
    for v in active:
        clusters.setdefault(find(v), []).append(v)

    for members in clusters.values():
        members.sort()
        n_assign = math.prod(len(options[v]) for v in members)
        if n_assign > MAX_JOINT_ASSIGNMENTS:
            taken = set()
            for v in members:
                best = max(
                    (o for o in options[v] if not o.gap or o.gap not in taken),
                    key=lambda o: (round(o.utility(cooperation), 12), o.action == "keep-lane"),
                )
                if best.gap:
                    taken.add(best.gap)
                choice[v] = best
            continue
        best_key, best_combo = None, None
        for combo in itertools.product(*(options[v] for v in members)):
            gaps = [o.gap for o in combo if o.gap]
            if len(gaps) != len(set(gaps)):
                continue
            total = sum(o.utility(cooperation) for o in combo)
            flags = tuple(o.action != "keep-lane" for o in combo)
            key = (round(total, 12), -sum(flags), flags)
            if best_key is None or key > best_key:
                best_key, best_combo = key, combo
        for v, o in zip(members, best_combo):
            choice[v] = o
    return choice


def joint_utility(choice: dict[str, ManeuverOption], cooperation: float) -> float:
    return sum(o.utility(cooperation) for o in choice.values())


def decide_maneuvers(world: WorldState, graph: RoadGraph, config: TrafficConfig) -> dict[str, Maneuver]:
    """Joint keep-lane / lane-change assignment for all background vehicles."""
    opts = maneuver_options(world, graph, config)
    positions = {v.id: (v.x, v.y) for v in world.background()}
    choice = solve_joint(opts, config.cooperation_factor, positions)
    out = {}
    for vid in sorted(choice):
        o = choice[vid]
        lane = graph.lanes.get(o.target_lane)
        limit = lane.speed_limit if lane is not None else config.idm.desired_speed
        out[vid] = Maneuver(o.action, min(config.idm.desired_speed, limit), o.target_lane)
    return out


# ---------------------------------------------------------------------------
# Trajectory planning


def _rollout(v0_speed, sigma0, v_target, leader, stop_at, p: IDMParams, headway_scale=1.0, cap=None):
    """Integrate IDM at 10 Hz. Returns (sigma, v, a, min real gap, ok).

    ``cap`` is an optional ``(stations, speeds)`` braking envelope; the
    acceleration is limited so the speed stays under it.
    """
    sig = [float(sigma0)]
    vel = [float(v0_speed)]
    acc = []
    min_gap = math.inf
    ok = True
    a_lim = p.max_accel
    for k in range(N_SAMPLES - 1):
        t = k * DT
        s_k, v_k = sig[-1], vel[-1]
        gap, dv = None, 0.0
        if leader is not None:
            lg, lv = leader
            gap, dv = lg + lv * t - (s_k - sigma0), v_k - lv
        if stop_at is not None:
            g = stop_at - s_k
            if gap is None or g < gap:
                gap, dv = g, v_k
        a = idm_accel(v_k, v_target, gap, dv, p, headway_scale)
        if cap is not None:
            v_cap = float(np.interp(s_k + v_k * DT, cap[0], cap[1]))
            a = min(a, (v_cap - v_k) / DT)
        a = min(max(a, -a_lim), a_lim)
        v_next = v_k + a * DT
        if v_next < 0.0:
            ds = v_k * v_k / (2.0 * -a) if a < 0 else 0.0
            v_next = 0.0
            a = -v_k / DT
        else:
            ds = v_k * DT + 0.5 * a * DT * DT
        if leader is not None:
            # never close below the minimum gap to a real leader
            g_next = lg + lv * (t + DT) - (s_k + ds - sigma0)
            if g_next < p.min_gap and ds > 0:
                allowed = max(0.0, ds - (p.min_gap - g_next))
                a_req = 2.0 * (allowed - v_k * DT) / (DT * DT)
                if a_req < -a_lim - 1e-9:
                    ok = False
                ds = allowed
                v_next = max(0.0, 2.0 * allowed / DT - v_k)
                a = (v_next - v_k) / DT
            min_gap = min(min_gap, lg + lv * (t + DT) - (s_k + ds - sigma0))
        acc.append(a)
        sig.append(s_k + ds)
        vel.append(v_next)
    acc.append(acc[-1])
    acc = np.array(acc)
    if np.any(np.abs(acc) > a_lim + 1e-9):
        ok = False
    return np.array(sig), np.array(vel), acc, min_gap, ok


def _score(vel, acc, lat_acc, min_gap, v_target, p: IDMParams, w: TrajectoryWeights) -> float:
    eff = float(np.mean(vel)) / v_target if v_target > 0 else 1.0
    jerk = np.abs(np.diff(acc)) / DT
    comfort = 1.0 / (1.0 + float(np.mean(jerk)) / 10.0 + float(np.max(np.abs(lat_acc))) / 4.0)
    desired = p.min_gap + p.time_headway * float(vel[0])
    safety = 1.0 if not math.isfinite(min_gap) else min(1.0, max(0.0, min_gap) / max(desired, 1e-6))
    total = w.efficiency + w.comfort + w.safety
    return (w.efficiency * eff + w.comfort * comfort + w.safety * safety) / total


def _emit(path: LanePath, t_abs, sig, vel, acc, lat, veh: VehicleState, kind, score, degraded=False) -> Trajectory:
    base = path.point(sig)
    h = path.normal_heading(sig)
    x = base[:, 0] - np.sin(h) * lat
    y = base[:, 1] + np.cos(h) * lat
    yaw = np.empty(len(x))
    yaw[0] = veh.yaw
    for k in range(1, len(x)):
        dx, dy = x[k] - x[k - 1], y[k] - y[k - 1]
        yaw[k] = math.atan2(dy, dx) if dx * dx + dy * dy > 1e-8 else yaw[k - 1]
    return Trajectory(t_abs, x, y, yaw, vel, acc, sig, lat, degraded, kind, score)


def _emergency(path, t_abs, sigma0, veh, lat, p: IDMParams) -> Trajectory:
    decel = p.comfort_decel * EMERGENCY_FACTOR
    t = t_abs - t_abs[0]
    t_stop = veh.speed / decel
    tt = np.minimum(t, t_stop)
    sig = sigma0 + veh.speed * tt - 0.5 * decel * tt * tt
    vel = np.maximum(0.0, veh.speed - decel * t)
    acc = np.where(t < t_stop, -decel, 0.0)
    return _emit(path, t_abs, sig, vel, acc, lat, veh, "emergency-brake", 0.0, degraded=True)


def _vehicle_path(graph: RoadGraph, veh: VehicleState, config: TrafficConfig) -> LanePath:
    return lane_path(graph, veh.lane_id, veh.id, config.seed)


def plan_vehicle(world: WorldState, veh: VehicleState, maneuver: Maneuver | None, graph: RoadGraph, config: TrafficConfig) -> Trajectory:
    """Plan one background vehicle's 3 s trajectory (31 samples at 10 Hz)."""
    p = config.idm
    w = config.trajectory_weights
    t_abs = world.sim_time + DT * np.arange(N_SAMPLES)
    lane_id, sigma0 = veh.lane_id, veh.station
    lc = veh.lane_change
    lc_durations = [None]
    if maneuver is not None and maneuver.action != "keep-lane" and lc is None:
        tgt = graph.lanes[maneuver.target_lane]
        st, lat0, _ = tgt.project((veh.x, veh.y))
        lane_id, sigma0 = maneuver.target_lane, st
        lc_durations = list(LANE_CHANGE_DURATIONS)
    path = lane_path(graph, lane_id, veh.id, config.seed)
    d_now = 0.0
    if lc is not None:
        d_now = float(lc.offset(world.sim_time))
    elif lc_durations[0] is not None:
        d_now = float(graph.lanes[lane_id].project((veh.x, veh.y))[1])

    v_target = _speed_target(path, sigma0, p)
    leader = _ahead_on_path(world, graph, veh, path, sigma0, d_now, config)
    lead = None if leader is None else (leader[0], leader[1])

    stop_at = None
    conn = _next_connector(graph, path, sigma0, LOOKAHEAD)
    if conn is not None and world.grants.get(veh.id) != conn[0]:
        stop_at = conn[1] - veh.length / 2.0 - 0.5

    best = None
    for dur in lc_durations:
        if dur is None:
            cand_lc = lc
        else:
            cand_lc = LaneChange(d_now, world.sim_time, dur)
        lat = np.zeros(N_SAMPLES) if cand_lc is None else cand_lc.offset(t_abs)
        constrained = lead is not None or stop_at is not None
        scales = HEADWAY_SCALES if dur is None and lc is None and constrained else (1.0,)
        for hs in scales:
            sig, vel, acc, min_gap, ok = _rollout(veh.speed, sigma0, v_target, lead, stop_at, p, hs)
            if stop_at is not None and np.any(sig > stop_at + 1e-6 + max(0.0, sigma0 - stop_at)):
                ok = False
            lat_acc = np.gradient(np.gradient(lat, DT), DT) if cand_lc is not None else np.zeros(1)
            sc = _score(vel, acc, lat_acc, min_gap, max(v_target, 0.1), p, w)
            if not ok:
                continue
            if best is None or sc > best[0] + 1e-12:
                kind = "keep-lane" if dur is None else maneuver.action
                traj = _emit(path, t_abs, sig, vel, acc, lat, veh, kind, sc)
                traj.lane_change = cand_lc
                traj.path = path
                best = (sc, traj)
    if best is None:
        lat = np.zeros(N_SAMPLES) if lc is None else lc.offset(t_abs)
        traj = _emergency(path, t_abs, sigma0, veh, lat, p)
        traj.lane_change = lc
        traj.path = path
        return traj
    return best[1]


def plan_trajectories(world: WorldState, maneuvers: dict[str, Maneuver], graph: RoadGraph, config: TrafficConfig) -> dict[str, Trajectory]:
    """Plan every background vehicle for the next 3 s."""
    return {veh.id: plan_vehicle(world, veh, maneuvers.get(veh.id), graph, config) for veh in sorted(world.background(), key=lambda v: v.id)}


# ---------------------------------------------------------------------------
# Junction grants


def _connector_conflicts(graph: RoadGraph) -> dict[str, set[str]]:
    cache = graph.__dict__.get("_conflicts")
    if cache is not None:
        return cache
    from shapely.geometry import LineString

    conflicts: dict[str, set[str]] = {}
    for j in graph.junctions:
        lines = {c: LineString(graph.lanes[c].centerline) for c in j.connectors}
        for c in j.connectors:
            conflicts.setdefault(c, set())
        for a, b in itertools.combinations(j.connectors, 2):
            la, lb = graph.lanes[a], graph.lanes[b]
            if la.predecessors == lb.predecessors:
                continue
            if lines[a].distance(lines[b]) < 2.5:
                conflicts[a].add(b)
                conflicts[b].add(a)
    graph.__dict__["_conflicts"] = conflicts
    return conflicts


def _route_junctions(graph: RoadGraph, route: Route) -> dict[str, float]:
    """Junction id -> route station where the route passes its centre."""
    cache = route.__dict__.get("_junction_cache")
    if cache is not None:
        return cache
    out = {}
    for jid, j in graph.junction_by_id.items():
        st, lat = project_many(np.asarray([j.center], dtype=float), route.reference_path, route.s)
        if abs(float(lat[0])) < 15.0 and -1.0 < float(st[0]) < route.total_length + 1.0:
            out[jid] = float(st[0])
    route.__dict__["_junction_cache"] = out
    return out


def _ego_claims_junction(world: WorldState, graph: RoadGraph, jid: str) -> bool:
    """True while the ego is in, or within a few seconds of, junction ``jid``.

    With a route only junctions on the route count; without one the
    distance to the centre decides.
    """
    ego = world.ego
    zone = max(EGO_JUNCTION_ZONE, ego.speed * EGO_JUNCTION_TIME)
    if world.ego_route is None:
        c = graph.junction_by_id[jid].center
        return math.hypot(ego.x - c[0], ego.y - c[1]) < zone
    st = _route_junctions(graph, world.ego_route).get(jid)
    if st is None:
        return False
    return -20.0 < st - world.ego_progress < zone


def _ahead_of_ego(world: WorldState, veh: VehicleState) -> bool:
    """True when ``veh`` sits in the ego's lane corridor ahead of it.

    The ego queues behind such a vehicle anyway, so its junction claim must
    not hold it back (that would deadlock both).
    """
    route = world.ego_route
    if route is None:
        return False
    st, lat = project_many(np.asarray([[veh.x, veh.y]]), route.reference_path, route.s)
    return abs(float(lat[0])) < world.ego.width / 2.0 + EGO_CORRIDOR_MARGIN and float(st[0]) > world.ego_progress


def update_grants(world: WorldState, graph: RoadGraph, config: TrafficConfig) -> dict[str, str]:
    """Recompute junction entry grants (vehicle id -> connector id)."""
    conflicts = _connector_conflicts(graph)
    p = config.idm
    grants = {}
    requests = []
    for veh in world.background():
        lane = graph.lanes.get(veh.lane_id)
        if lane is None:
            continue
        if lane.is_connector:
            grants[veh.id] = veh.lane_id
            continue
        held = world.grants.get(veh.id)
        path = _vehicle_path(graph, veh, config)
        reach = veh.speed**2 / (2.0 * p.comfort_decel) + 20.0
        conn = _next_connector(graph, path, veh.station, reach)
        if conn is None:
            continue
        if held == conn[0]:
            grants[veh.id] = held
            continue
        requests.append((conn[1] - veh.station, veh.id, conn[0]))
    ego = world.vehicles.get(EGO_ID)
    for _, vid, conn in sorted(requests):
        jid = graph.junction_of_connector.get(conn)
        if ego is not None and jid is not None and _ego_claims_junction(world, graph, jid):
            if not _ahead_of_ego(world, world.vehicles[vid]):
                continue
        if any(g in conflicts.get(conn, ()) for g in grants.values()):
            continue
        grants[vid] = conn
    return dict(sorted(grants.items()))


# ---------------------------------------------------------------------------
# Collisions


def detect_collisions(world: WorldState) -> list[CollisionEvent]:
    """Pairs of vehicles whose footprints overlap (separating-axis test)."""
    vehs = [world.vehicles[k] for k in sorted(world.vehicles)]
    if len(vehs) < 2:
        return []
    xy = np.array([(v.x, v.y) for v in vehs])
    radius = np.array([math.hypot(v.length, v.width) / 2.0 for v in vehs])
    events = []
    corners = {}
    for i in range(len(vehs)):
        d = np.hypot(xy[i + 1 :, 0] - xy[i, 0], xy[i + 1 :, 1] - xy[i, 1])
        for j in np.flatnonzero(d <= radius[i] + radius[i + 1 :]) + i + 1:
            a, b = vehs[i], vehs[j]
            ca = corners.setdefault(a.id, a.corners())
            cb = corners.setdefault(b.id, b.corners())
            pen = geo.sat_penetration(ca, cb)
            if pen > 0:
                events.append(CollisionEvent(world.sim_time, (a.id, b.id), pen))
    return events


# ---------------------------------------------------------------------------
# Agent plans


def interpolate_agent_plan(plan: AgentPlan, current_pose=(0.0, 0.0, 0.0)) -> Trajectory:
    """Linear 10 Hz interpolation of a 6-waypoint plan (31 samples).

    The result lives in the same frame as the waypoints. Knots are copied
    verbatim; in-between yaw comes from forward differences of positions.
    """
    wp = np.asarray(plan.waypoints, dtype=float)
    if not np.all(np.isfinite(wp)) or not np.all(np.isfinite(current_pose)):
        raise ValidationError("plan contains non-finite values")
    if len(wp) != 6:
        raise ValidationError(f"plan has {len(wp)} waypoints, expected 6")
    knots = np.vstack([np.asarray(current_pose, dtype=float)[None, :3], wp])
    x = np.empty(N_SAMPLES)
    y = np.empty(N_SAMPLES)
    yaw = np.empty(N_SAMPLES)
    for i in range(N_SAMPLES):
        k, r = divmod(i, 5)
        if r == 0:
            x[i], y[i], yaw[i] = knots[k]
        else:
            f = r / 5.0
            x[i] = knots[k, 0] + (knots[k + 1, 0] - knots[k, 0]) * f
            y[i] = knots[k, 1] + (knots[k + 1, 1] - knots[k, 1]) * f
    for i in range(N_SAMPLES):
        if i % 5 == 0:
            continue
        dx, dy = x[i + 1] - x[i], y[i + 1] - y[i]
        yaw[i] = math.atan2(dy, dx) if dx * dx + dy * dy > 1e-12 else yaw[i - 1]
    t = plan.issued_at + DT * np.arange(N_SAMPLES)
    return Trajectory(t, x, y, yaw)


def trajectory_to_map(traj: Trajectory, pose) -> Trajectory:
    xy = geo.to_global(traj.xy, pose)
    yaw = np.asarray(geo.wrap_angle(traj.yaw + pose[2]))
    return Trajectory(traj.t.copy(), xy[:, 0].copy(), xy[:, 1].copy(), yaw, kind=traj.kind)


def set_ego_mode(world: WorldState, mode: str, plan: AgentPlan | None = None) -> WorldState:
    """Set the ego control mode and hand over an agent plan.

    In ``closed_loop`` the plan (ego frame at issue time) is interpolated and
    installed as the ego trajectory. In ``open_loop`` it is only recorded.
    The mode cannot change once the episode has advanced.
    """
    if mode not in ("open_loop", "closed_loop"):
        raise ValidationError(f"unknown ego mode {mode!r}")
    if mode != world.ego_mode and world.tick > 0:
        raise ContractError("switching ego mode mid-episode is not supported")
    new = world.copy()
    new.ego_mode = mode
    if plan is not None:
        plan.validate()
        new.recorded_plan = plan
        if mode == "closed_loop":
            local = interpolate_agent_plan(plan)
            new.active_ego_plan = trajectory_to_map(local, world.ego.pose)
            new.active_ego_plan.t = plan.issued_at + DT * np.arange(N_SAMPLES)
    return new


# ---------------------------------------------------------------------------
# Ego reference planner


def route_speed_limits(graph: RoadGraph, route: Route) -> tuple[np.ndarray, np.ndarray]:
    """Per-vertex speed limit along an (extended) route path."""
    cache = route.__dict__.get("_speed_cache")
    if cache is not None:
        return cache
    pts, s = extended_route(route)
    limits = np.full(len(pts), np.inf)
    for lid in route.lane_sequence:
        lane = graph.lanes[lid]
        near = np.zeros(len(pts), dtype=bool)
        if len(pts):
            _, lat = project_many(pts, lane.centerline, lane.s)
            st, _ = project_many(pts, lane.centerline, lane.s)
            near = (np.abs(lat) < 1.0) & (st > 1e-6) & (st < lane.length - 1e-6)
        limits[near] = np.minimum(limits[near], lane.speed_limit)
    # curvature limit from heading change over +-3 m
    h = np.unwrap(geo.headings(pts)) if len(pts) > 1 else np.zeros(len(pts))
    kappa = np.zeros(len(pts))
    for i in range(len(pts)):
        lo = np.searchsorted(s, s[i] - 3.0)
        hi = min(len(pts) - 1, np.searchsorted(s, s[i] + 3.0))
        if s[hi] - s[lo] > 1e-6:
            kappa[i] = abs(h[hi] - h[lo]) / (s[hi] - s[lo])
    curve = np.sqrt(LATERAL_ACCEL_LIMIT / np.maximum(kappa, 1e-6))
    limits = np.minimum(limits, curve)
    finite = np.isfinite(limits)
    if not finite.all():
        fill = float(np.min(limits[finite])) if finite.any() else 13.9
        limits[~finite] = max(fill, float(np.max(limits[finite])) if finite.any() else 13.9)
    route.__dict__["_speed_cache"] = (s, limits)
    return s, limits


def extended_route(route: Route, extra: float = 60.0):
    cache = route.__dict__.get("_ext_cache")
    if cache is not None:
        return cache
    pts = route.reference_path
    if route.total_length > 0:
        h = route.heading(route.total_length)
        tail = pts[-1] + np.outer(np.arange(1, int(extra / geo.SAMPLING_STEP) + 1) * geo.SAMPLING_STEP, [math.cos(h), math.sin(h)])
        pts = np.vstack([pts, tail])
    pts = geo.dedupe(pts)
    s = geo.arclength(pts)
    route.__dict__["_ext_cache"] = (pts, s)
    return pts, s


def route_speed_target(graph, route, sigma0: float, p: IDMParams, horizon=60.0) -> float:
    s, lim = route_speed_limits(graph, route)
    mask = (s >= sigma0) & (s <= sigma0 + horizon)
    v = p.desired_speed
    if mask.any():
        dist = s[mask] - sigma0
        v = min(v, float(np.min(np.sqrt(lim[mask] ** 2 + 2.0 * p.comfort_decel * 0.75 * dist))))
    return v


def ego_obstacles(world: WorldState, route: Route, sigma0: float, horizon: float = HORIZON):
    """Obstacles on the ego's route corridor.

    A vehicle occupies the corridor when any footprint corner lies within
    ``ego.width / 2 + EGO_CORRIDOR_MARGIN`` of the route path. Returns
    ``(leader, stop_at)``: the nearest vehicle occupying the corridor ahead now
    as ``(bumper gap, speed along path)``, and the route station (minus half
    the ego length and a 1 m buffer) where the first constant-velocity
    forecast enters it within ``horizon`` (``None`` if none).
    """
    ego = world.ego
    pts, s = extended_route(route)
    pts, s = _window(pts, s, sigma0 - 5.0, sigma0 + LOOKAHEAD)
    others = [o for o in world.background() if abs(o.x - ego.x) < LOOKAHEAD and abs(o.y - ego.y) < LOOKAHEAD]
    leader, stop_at = None, None
    if not others:
        return leader, stop_at
    half = ego.width / 2.0 + EGO_CORRIDOR_MARGIN
    front = ego.length / 2.0
    tk = np.arange(0, int(round(horizon / DT)) + 1) * DT
    seg_h = np.arctan2(np.diff(pts[:, 1]), np.diff(pts[:, 0]))
    for o in others:
        cx = o.x + o.speed * math.cos(o.yaw) * tk
        cy = o.y + o.speed * math.sin(o.yaw) * tk
        local = geo.box_corners(0.0, 0.0, o.yaw, o.length, o.width)
        corners = np.stack([cx[:, None] + local[None, :, 0], cy[:, None] + local[None, :, 1]], axis=-1).reshape(-1, 2)
        st, lat = project_many(corners, pts, s)
        st, lat = st.reshape(len(tk), 4), lat.reshape(len(tk), 4)
        occ = (np.abs(lat) < half) & (st > sigma0) & (st < s[-1] - 1e-6)
        hit = occ.any(axis=1)
        if hit[0]:
            near = float(st[0][occ[0]].min())
            gap = near - sigma0 - front
            h = float(np.interp(near, s[:-1], seg_h))
            vl = max(0.0, o.speed * math.cos(o.yaw - h))
            if leader is None or gap < leader[0]:
                leader = (gap, vl)
        elif hit.any():
            k = int(np.argmax(hit))
            cand = float(st[k][occ[k]].min()) - front - 1.0
            if cand > sigma0 + 0.5 and (stop_at is None or cand < stop_at):
                stop_at = cand
    return leader, stop_at


def route_speed_envelope(graph: RoadGraph, route: Route, p: IDMParams):
    """Braking envelope along the extended route.

    ``v(s) = min over s' >= s of sqrt(limit(s')**2 + 2 * b * (s' - s))`` with
    ``b = 0.75 * comfort_decel``: the fastest speed from which every later
    limit can still be met with comfortable braking.
    """
    key = ("_envelope", p.comfort_decel, p.desired_speed)
    cache = route.__dict__.get("_envelope_cache")
    if cache is not None and cache[0] == key:
        return cache[1]
    s, lim = route_speed_limits(graph, route)
    env = np.minimum(lim.copy(), p.desired_speed)
    b = 0.75 * p.comfort_decel
    for i in range(len(env) - 2, -1, -1):
        env[i] = min(env[i], math.sqrt(env[i + 1] ** 2 + 2.0 * b * (s[i + 1] - s[i])))
    route.__dict__["_envelope_cache"] = (key, (s, env))
    return s, env


def ego_speed_plan(world: WorldState, graph: RoadGraph, route: Route, sigma0: float, p: IDMParams):
    """IDM speed profile for the ego along ``route``: (sigma, v, a, ok)."""
    v_target = route_speed_target(graph, route, sigma0, p)
    leader, stop_at = ego_obstacles(world, route, sigma0)
    cap = route_speed_envelope(graph, route, p)
    sig, vel, acc, _, ok = _rollout(world.ego.speed, sigma0, v_target, leader, stop_at, p, cap=cap)
    return sig, vel, acc, ok


def ego_station(world: WorldState) -> float:
    return world.ego_progress


def plan_ego_reference(world: WorldState, graph: RoadGraph, config: TrafficConfig) -> Trajectory:
    """The engine's own ego plan: IDM along the route reference path."""
    route = world.ego_route
    if route is None:
        raise ContractError("world has no ego route")
    p = config.idm
    sigma0 = world.ego_progress
    sig, vel, acc, ok = ego_speed_plan(world, graph, route, sigma0, p)
    pts, s = extended_route(route)
    xy = np.column_stack([np.interp(sig, s, pts[:, 0]), np.interp(sig, s, pts[:, 1])])
    yaw = np.array([geo.heading_at(pts, s, q) for q in sig])
    t_abs = world.sim_time + DT * np.arange(N_SAMPLES)
    return Trajectory(t_abs, xy[:, 0], xy[:, 1], yaw, vel, acc, sig, np.zeros(N_SAMPLES), not ok, "ego-reference")


# ---------------------------------------------------------------------------
# Stepping


def _advance_background(world: WorldState, veh: VehicleState, traj: Trajectory, graph: RoadGraph, config):
    path: LanePath = traj.path
    sigma = float(traj.station[1])
    lat = float(traj.lateral[1])
    if sigma >= path.end - 1e-9 and not graph.lanes[path.lanes[-1]].successors:
        return None
    lane_id, st = path.locate(sigma)
    lc = traj.lane_change
    if lc is not None and world.sim_time + DT >= lc.t0 + lc.duration - 1e-9:
        lc = None
        lat = 0.0
    yaw = float(traj.yaw[1])
    speed = float(traj.v[1])
    accel = float(traj.a[0])
    return VehicleState(
        veh.id, float(traj.x[1]), float(traj.y[1]), yaw, speed=speed, accel=accel, length=veh.length,
        width=veh.width, lane_id=lane_id, role=veh.role, station=st, lane_change=lc,
    )


def _update_ego_lane(graph: RoadGraph, ego: VehicleState) -> VehicleState:
    snap = graph.nearest_lane((ego.x, ego.y), radius=3.0, heading=ego.yaw) or graph.nearest_lane((ego.x, ego.y))
    if snap is None or not bool(graph.on_drivable(ego.x, ego.y)):
        return replace(ego, lane_id=OFF_ROAD, station=0.0)
    return replace(ego, lane_id=snap[0], station=snap[1])


def step(world: WorldState, dt: float, graph: RoadGraph, config: TrafficConfig, maneuvers: dict[str, Maneuver] | None = None) -> WorldState:
    """Advance the world by one 0.1 s physics step."""
    if abs(dt - DT) > 1e-12:
        raise ValidationError("step only supports dt = 0.1 s")
    new = world.copy()
    new.despawned = []
    new.degraded = []

    if world.tick % CONTROL_PERIOD_TICKS == 0 or maneuvers is not None:
        new.maneuvers = maneuvers if maneuvers is not None else decide_maneuvers(world, graph, config)
    elif world.tick % CONTROL_PERIOD_TICKS != 0:
        new.maneuvers = {k: m for k, m in world.maneuvers.items() if k in world.vehicles and m.action == "keep-lane"}
    new.grants = update_grants(world, graph, config)
    planning = world.copy()
    planning.grants = new.grants

    # ego first: background vehicles react to realised states only
    ego = world.ego
    if world.ego_mode == "closed_loop":
        plan = world.active_ego_plan
        if plan is None:
            raise ContractError("closed-loop step requires an active ego plan")
        k = int(round((world.sim_time + DT - plan.t[0]) / DT))
        k = min(max(k, 1), len(plan.t) - 1)
        nx, ny, nyaw = float(plan.x[k]), float(plan.y[k]), float(plan.yaw[k])
        speed = math.hypot(nx - ego.x, ny - ego.y) / DT
        ego_new = replace(ego, x=nx, y=ny, yaw=nyaw, speed=speed, accel=(speed - ego.speed) / DT)
    else:
        ref = plan_ego_reference(world, graph, config) if world.ego_route is not None else None
        if ref is None:
            ego_new = ego
        else:
            ego_new = replace(
                ego, x=float(ref.x[1]), y=float(ref.y[1]), yaw=float(ref.yaw[1]), speed=float(ref.v[1]), accel=float(ref.a[0])
            )
    ego_new = _update_ego_lane(graph, ego_new)

    vehicles = {}
    for vid in sorted(world.vehicles):
        if vid == EGO_ID:
            vehicles[vid] = ego_new
            continue
        veh = world.vehicles[vid]
        traj = plan_vehicle(planning, veh, new.maneuvers.get(vid) if world.tick % CONTROL_PERIOD_TICKS == 0 else None, graph, config)
        if traj.degraded:
            new.degraded.append(vid)
        moved = _advance_background(world, veh, traj, graph, config)
        if moved is None:
            new.despawned.append(vid)
            new.grants.pop(vid, None)
            new.maneuvers.pop(vid, None)
        else:
            vehicles[vid] = moved
    new.vehicles = vehicles
    new.tick = world.tick + 1

    if world.ego_route is not None:
        pts, s = extended_route(world.ego_route)
        pts, s = _window(pts, s, world.ego_progress - 5.0, world.ego_progress + 30.0)
        st, _ = project_many(np.array([[ego_new.x, ego_new.y]]), pts, s)
        new.ego_progress = max(world.ego_progress, float(st[0]))
    inside = bool(graph.on_drivable(ego_new.x, ego_new.y))
    new.off_road_count = 0 if inside else world.off_road_count + 1
    new.collisions = detect_collisions(new)
    return new
