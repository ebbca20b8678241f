"""Driving scores: per-frame PDM sub-scores, episode PDMS, route completion and ADS.

Per frame the ego plan (3 s at 10 Hz, map frame) is scored against the
background vehicles forecast at constant velocity:

* ``nc`` - 0 if the ego footprint overlaps any forecast footprint. Overlap is
  tested on 100 Hz sub-samples: between plan samples the ego position moves
  linearly and its yaw turns along the shorter arc.
* ``dac`` - 0 if any ego footprint corner at any plan sample leaves the
  drivable area.
* ``ep`` - plan progress along the route relative to the engine's own ego
  planner over the same horizon.
* ``ttc`` - 0 if, at any plan sample, a vehicle ahead of the ego would be
  touched within ``t_ttc`` seconds with both holding their velocity. The
  touching time is solved exactly with the separating-axis test on boxes in
  uniform translation; a touch at exactly ``t_ttc`` counts.
* ``comfort`` - 0 if smoothed longitudinal or lateral acceleration or jerk
  exceeds its limit at any sample.

``pdms_t = nc * dac * (w_ep*ep + w_ttc*ttc + w_c*comfort) / (w_ep + w_ttc + w_c)``
and the episode PDMS is the mean over control frames (2 Hz).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import savgol_filter

from . import geometry as geo
from . import traffic as tr
from .errors import ValidationError
from .roadnet import RoadGraph, Route

TERMINATIONS = ("ROUTE_COMPLETE", "COLLISION", "OFF_ROAD", "AGENT_TIMEOUT", "RENDERER_FAILURE", "TIME_LIMIT", "ABORTED")
SUBSTEPS = 10
DEGENERATE_PROGRESS = 0.1
TOUCH_TOL = 1e-9
PREFILTER_RADIUS = 150.0


@dataclass(frozen=True)
class ScoreWeights:
    w_ep: float = 5.0
    w_ttc: float = 5.0
    w_c: float = 2.0

    def validate(self) -> "ScoreWeights":
        ws = (self.w_ep, self.w_ttc, self.w_c)
        if not all(math.isfinite(w) and w >= 0 for w in ws):
            raise ValidationError("score weights must be finite and nonnegative")
        if sum(ws) <= 0:
            raise ValidationError("score weights must not all be zero")
        return self


@dataclass(frozen=True)
class EvalThresholds:
    t_ttc: float = 1.0
    max_lon_accel: float = 2.4
    max_lat_accel: float = 4.9
    max_jerk: float = 8.0

    def validate(self) -> "EvalThresholds":
        if not all(math.isfinite(v) and v > 0 for v in asdict(self).values()):
            raise ValidationError("evaluation thresholds must be positive")
        return self


@dataclass(frozen=True)
class EvalConfig:
    weights: ScoreWeights = field(default_factory=ScoreWeights)
    thresholds: EvalThresholds = field(default_factory=EvalThresholds)

    def validate(self) -> "EvalConfig":
        self.weights.validate()
        self.thresholds.validate()
        return self

    def to_dict(self) -> dict:
        return {"weights": asdict(self.weights), "thresholds": asdict(self.thresholds)}

    @classmethod
    def from_dict(cls, doc: dict | None) -> "EvalConfig":
        doc = doc or {}
        return cls(ScoreWeights(**doc.get("weights", {})), EvalThresholds(**doc.get("thresholds", {}))).validate()


@dataclass(frozen=True)
class FrameScore:
    t: int
    nc: int
    dac: int
    ep: float
    ttc: int
    comfort: int
    pdms_t: float

    def to_dict(self) -> dict:
        return asdict(self)


def pdms_frame(nc, dac, ep, ttc, comfort, weights: ScoreWeights = ScoreWeights()) -> float:
    """Penalty product times normalized weighted average of the soft sub-scores."""
    weights.validate()
    for name, v in (("nc", nc), ("dac", dac), ("ep", ep), ("ttc", ttc), ("comfort", comfort)):
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"sub-score {name} = {v} outside [0, 1]")
    num = weights.w_ep * ep + weights.w_ttc * ttc + weights.w_c * comfort
    return float(nc * dac * num / (weights.w_ep + weights.w_ttc + weights.w_c))


def pdms_aggregate(frames) -> float:
    vals = [float(v) for v in frames]
    if not vals:
        raise ValidationError("cannot aggregate an empty frame list")
    return float(np.mean(vals))


ROUTE_MATCH_TOL = 8.0  # m; about two lane widths


def route_completion(route: Route, realized_path) -> float:
    """Fraction of the route covered by the furthest monotone progress point.

    Each realized point is projected onto a window of the route around the
    progress so far, so loops and self-overlapping routes cannot jump ahead.
    Points further than ``ROUTE_MATCH_TOL`` from that window contribute nothing.
    """
    if route.total_length <= 0:
        raise ValidationError("route has zero length")
    pts = np.asarray(realized_path, dtype=float).reshape(-1, 2)
    path, s = tr.extended_route(route)
    progress = 0.0
    for q in pts:
        wp, ws = tr._window(path, s, progress - 5.0, progress + 30.0)
        st, lat = tr.project_many(q[None, :], wp, ws)
        if abs(lat[0]) <= ROUTE_MATCH_TOL:
            progress = max(progress, float(st[0]))
    return float(min(1.0, max(0.0, progress / route.total_length)))


def ads(r_c: float, pdms: float) -> float:
    for name, v in (("route completion", r_c), ("pdms", pdms)):
        if not (math.isfinite(v) and 0.0 <= v <= 1.0):
            raise ValidationError(f"{name} = {v} outside [0, 1]")
    return float(r_c * pdms)


# ---------------------------------------------------------------------------
# Frame sub-scores


@dataclass
class FrameContext:
    """Everything a frame score depends on besides the plan itself."""

    background: list[tr.VehicleState]
    graph: RoadGraph | None
    reference: tr.Trajectory | None
    route: Route | None = None
    ego_station: float = 0.0
    ego_length: float = tr.DEFAULT_LENGTH
    ego_width: float = tr.DEFAULT_WIDTH


def sat_penetration_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized :func:`geometry.sat_penetration` for (M, 4, 2) box pairs."""
    best = np.full(len(a), np.inf)
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=1) - poly
        axes = np.stack([-edges[..., 1], edges[..., 0]], axis=-1)
        axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
        pa = np.einsum("mcd,mkd->mck", a, axes)
        pb = np.einsum("mcd,mkd->mck", b, axes)
        overlap = np.minimum(pa.max(axis=1), pb.max(axis=1)) - np.maximum(pa.min(axis=1), pb.min(axis=1))
        best = np.minimum(best, overlap.min(axis=1))
    return best


def _box_batch(x, y, yaw, length, width) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    gx = x[:, None] + local[None, :, 0] * c[:, None] - local[None, :, 1] * s[:, None]
    gy = y[:, None] + local[None, :, 0] * s[:, None] + local[None, :, 1] * c[:, None]
    return np.stack([gx, gy], axis=-1)


def time_to_touch(a: np.ndarray, b: np.ndarray, v_rel: np.ndarray, horizon: float) -> float:
    """Earliest t in [0, horizon] at which box ``b`` moving by ``v_rel * t`` touches ``a``.

    Both boxes keep their orientation. Returns ``inf`` if they never touch.
    """
    lo, hi = 0.0, horizon
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=0) - poly
        axes = np.column_stack([-edges[:, 1], edges[:, 0]])
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        pa = a @ axes.T
        pb = b @ axes.T
        rate = axes @ v_rel
        for k in range(len(axes)):
            a_lo, a_hi = pa[:, k].min(), pa[:, k].max()
            b_lo, b_hi = pb[:, k].min(), pb[:, k].max()
            # need b_lo + r t <= a_hi + tol and b_hi + r t >= a_lo - tol
            r = rate[k]
            for c0, sign in ((a_hi + TOUCH_TOL - b_lo, 1.0), (b_hi - a_lo + TOUCH_TOL, -1.0)):
                # sign * r * t <= c0
                rr = sign * r
                if abs(rr) < 1e-15:
                    if c0 < 0:
                        return math.inf
                elif rr > 0:
                    hi = min(hi, c0 / rr)
                else:
                    lo = max(lo, c0 / rr)
            if lo > hi:
                return math.inf
    return lo


def _plan_velocity(plan: tr.Trajectory) -> np.ndarray:
    xy = plan.xy
    v = np.zeros_like(xy)
    if len(xy) > 1:
        v[:-1] = np.diff(xy, axis=0) / tr.DT
        v[-1] = v[-2]
    return v


def _substeps(plan: tr.Trajectory):
    n = len(plan.t)
    f = np.arange(SUBSTEPS) / SUBSTEPS
    x0, x1 = plan.x[:-1, None], plan.x[1:, None]
    y0, y1 = plan.y[:-1, None], plan.y[1:, None]
    dyaw = np.asarray(geo.wrap_angle(plan.yaw[1:] - plan.yaw[:-1]))[:, None]
    xs = np.append((x0 + (x1 - x0) * f).ravel(), plan.x[-1])
    ys = np.append((y0 + (y1 - y0) * f).ravel(), plan.y[-1])
    yaws = np.append((plan.yaw[:-1, None] + dyaw * f).ravel(), plan.yaw[-1])
    ts = np.append((plan.t[:-1, None] + (plan.t[1:, None] - plan.t[:-1, None]) * f).ravel(), plan.t[n - 1])
    return ts, xs, ys, yaws


def _nearby(plan: tr.Trajectory, background, radius: float):
    cx, cy = float(plan.x[0]), float(plan.y[0])
    return [o for o in background if math.hypot(o.x - cx, o.y - cy) < radius]


def no_collision(plan: tr.Trajectory, ctx: FrameContext) -> int:
    ts, xs, ys, yaws = _substeps(plan)
    dt = ts - ts[0]
    ego = _box_batch(xs, ys, yaws, ctx.ego_length, ctx.ego_width)
    r_ego = math.hypot(ctx.ego_length, ctx.ego_width) / 2.0
    for o in _nearby(plan, ctx.background, PREFILTER_RADIUS):
        ox = o.x + o.speed * math.cos(o.yaw) * dt
        oy = o.y + o.speed * math.sin(o.yaw) * dt
        r = r_ego + math.hypot(o.length, o.width) / 2.0
        close = np.hypot(ox - xs, oy - ys) <= r
        if not close.any():
            continue
        idx = np.flatnonzero(close)
        ob = _box_batch(ox[idx], oy[idx], np.full(len(idx), o.yaw), o.length, o.width)
        if np.any(sat_penetration_batch(ego[idx], ob) > 0):
            return 0
    return 1


def drivable_compliance(plan: tr.Trajectory, ctx: FrameContext) -> int:
    if ctx.graph is None:
        return 1
    corners = _box_batch(plan.x, plan.y, plan.yaw, ctx.ego_length, ctx.ego_width).reshape(-1, 2)
    return int(bool(np.all(ctx.graph.on_drivable(corners[:, 0], corners[:, 1]))))


def ego_progress_ratio(plan: tr.Trajectory, ctx: FrameContext) -> float:
    if ctx.route is None or ctx.reference is None:
        return 1.0
    pts, s = tr.extended_route(ctx.route)
    wp, ws = tr._window(pts, s, ctx.ego_station - 5.0, ctx.ego_station + tr.LOOKAHEAD)
    st, _ = tr.project_many(plan.xy[-1:], wp, ws)
    plan_progress = float(st[0]) - ctx.ego_station
    ref_progress = float(ctx.reference.station[-1] - ctx.reference.station[0])
    if ref_progress < DEGENERATE_PROGRESS:
        return 1.0 if plan_progress >= 0.0 else 0.0
    return float(min(1.0, max(0.0, plan_progress / ref_progress)))


def min_time_to_collision(plan: tr.Trajectory, ctx: FrameContext, horizon: float) -> float:
    """Smallest time-to-touch against vehicles ahead, over all plan samples."""
    vel = _plan_velocity(plan)
    best = math.inf
    dt = plan.t - plan.t[0]
    others = _nearby(plan, ctx.background, PREFILTER_RADIUS)
    for k in range(len(plan.t)):
        ex, ey, eyaw = float(plan.x[k]), float(plan.y[k]), float(plan.yaw[k])
        hx, hy = math.cos(eyaw), math.sin(eyaw)
        ebox = geo.box_corners(ex, ey, eyaw, ctx.ego_length, ctx.ego_width)
        reach = math.hypot(*vel[k]) * horizon + ctx.ego_length + 10.0
        for o in others:
            ox = o.x + o.speed * math.cos(o.yaw) * dt[k]
            oy = o.y + o.speed * math.sin(o.yaw) * dt[k]
            if (ox - ex) * hx + (oy - ey) * hy <= 0:
                continue
            ov = np.array([o.speed * math.cos(o.yaw), o.speed * math.sin(o.yaw)])
            if math.hypot(ox - ex, oy - ey) > reach + float(np.hypot(*ov)) * horizon:
                continue
            obox = geo.box_corners(ox, oy, o.yaw, o.length, o.width)
            best = min(best, time_to_touch(ebox, obox, ov - vel[k], horizon))
    return best


def comfort_ok(plan: tr.Trajectory, th: EvalThresholds) -> int:
    n = len(plan.t)
    if n < 5:
        return 1
    win = min(15, n if n % 2 else n - 1)
    kw = dict(window_length=win, polyorder=2, delta=tr.DT, mode="interp")
    vx = savgol_filter(plan.x, deriv=1, **kw)
    vy = savgol_filter(plan.y, deriv=1, **kw)
    ax = savgol_filter(plan.x, deriv=2, **kw)
    ay = savgol_filter(plan.y, deriv=2, **kw)
    yaw = np.unwrap(plan.yaw)
    hx, hy = np.cos(yaw), np.sin(yaw)
    a_lon = ax * hx + ay * hy
    yaw_rate = savgol_filter(yaw, deriv=1, **kw)
    a_lat = np.hypot(vx, vy) * yaw_rate
    jerk = savgol_filter(a_lon, deriv=1, **kw)
    ok = (
        np.all(np.abs(a_lon) <= th.max_lon_accel)
        and np.all(np.abs(a_lat) <= th.max_lat_accel)
        and np.all(np.abs(jerk) <= th.max_jerk)
    )
    return int(bool(ok))


def compute_frame_subscores(plan: tr.Trajectory, ctx: FrameContext, config: EvalConfig = EvalConfig(), t: int = 0) -> FrameScore:
    """Score one 3 s / 10 Hz map-frame ego plan."""
    config.validate()
    if len(plan.t) != tr.N_SAMPLES:
        raise ValidationError(f"plan must have {tr.N_SAMPLES} samples at 10 Hz")
    th = config.thresholds
    nc = no_collision(plan, ctx)
    dac = drivable_compliance(plan, ctx)
    ep = ego_progress_ratio(plan, ctx)
    ttc = int(min_time_to_collision(plan, ctx, th.t_ttc) > th.t_ttc + TOUCH_TOL)
    comfort = comfort_ok(plan, th)
    return FrameScore(t, nc, dac, ep, ttc, comfort, pdms_frame(nc, dac, ep, ttc, comfort, config.weights))


def rescore(frames: list[FrameScore], weights: ScoreWeights) -> list[FrameScore]:
    """Recompute ``pdms_t`` from stored sub-scores under new weights."""
    return [FrameScore(f.t, f.nc, f.dac, f.ep, f.ttc, f.comfort, pdms_frame(f.nc, f.dac, f.ep, f.ttc, f.comfort, weights)) for f in frames]


@dataclass
class EvalReport:
    frame_scores: list[FrameScore]
    pdms: float
    route_completion: float
    ads: float
    termination: str
    config: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def build(cls, frames: list[FrameScore], r_c: float, termination: str, config: EvalConfig = EvalConfig()) -> "EvalReport":
        if termination not in TERMINATIONS:
            raise ValidationError(f"unknown termination {termination!r}")
        pdms = pdms_aggregate([f.pdms_t for f in frames]) if frames else 0.0
        return cls(frames, pdms, r_c, ads(r_c, pdms), termination, config)

    def to_document(self) -> dict:
        return {
            "pdms": self.pdms,
            "route_completion": self.route_completion,
            "ads": self.ads,
            "termination": self.termination,
            "config": self.config.to_dict(),
            "frame_scores": [f.to_dict() for f in self.frame_scores],
        }

    @classmethod
    def from_document(cls, doc: dict) -> "EvalReport":
        return cls(
            [FrameScore(**f) for f in doc["frame_scores"]],
            doc["pdms"],
            doc["route_completion"],
            doc["ads"],
            doc["termination"],
            EvalConfig.from_dict(doc.get("config")),
        )
