"""Episode runner: the 10 Hz physics / 2 Hz control loop, episode logs and the HTTP service.

Every 0.5 s of simulated time the loop extracts the layout, asks the renderer
for a frame (conditioned on the previous one), hands the images to the agent,
installs or records its plan and scores it. Between control ticks the world
takes five 0.1 s steps. Physics waits for both services, so results depend on
simulated time only.

Episode logs are newline-delimited JSON records chained by SHA-256: each
record stores the hash of its predecessor and its own hash over
``(seq, kind, prev, data)``. A closing ``index`` record summarizes the log.
"""

from __future__ import annotations

import hashlib
import json
import math
import queue
import re
import threading
from dataclasses import asdict, dataclass, field, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources

import jsonschema
import numpy as np
import yaml

from . import __version__
from . import agent as ag
from . import dreamer as dr
from . import layout as lay
from . import metrics as me
from . import traffic as tr
from .errors import (
    ArenaError,
    ConfigError,
    ContractViolation,
    IntegrityError,
    ProtocolError,
    TransportError,
    ValidationError,
)
from .maps import load_map
from .roadnet import Route, plan_route

LOG_FORMAT = "arenasim-episode"
LOG_VERSION = 1
GENESIS = "0" * 64
EXIT_CODES = {
    "ROUTE_COMPLETE": 0,
    "COLLISION": 10,
    "OFF_ROAD": 11,
    "AGENT_TIMEOUT": 12,
    "RENDERER_FAILURE": 13,
    "TIME_LIMIT": 14,
    "ABORTED": 15,
}


# ---------------------------------------------------------------------------
# Configuration


def config_schema() -> dict:
    return json.loads((resources.files("arenasim") / "fixtures" / "config.schema.json").read_text())


@dataclass(frozen=True)
class SimulationConfig:
    """Everything that determines an episode. ``seed`` also seeds the traffic."""

    map: str = "singapore-onenorth"
    route: str | tuple = "sing_route_1"
    traffic: tr.TrafficConfig = field(default_factory=tr.TrafficConfig)
    rig: tuple[str, ...] = lay.CAMERA_NAMES
    dreamer: dr.RendererBinding = field(default_factory=dr.RendererBinding)
    agent: ag.AgentBinding = field(default_factory=ag.AgentBinding)
    mode: str = "closed_loop"
    time_limit: float = 120.0
    eval: me.EvalConfig = field(default_factory=me.EvalConfig)
    prompt: str = "a city street in daylight"
    seed: int = 0
    log_images: bool = True

    def validate(self) -> "SimulationConfig":
        _semantic_check(self)
        return self

    def to_dict(self) -> dict:
        traffic = asdict(self.traffic)
        traffic.pop("seed")
        route = self.route if isinstance(self.route, str) else {"start": list(self.route[0]), "goal": list(self.route[1])}
        return {
            "map": self.map,
            "route": route,
            "traffic": traffic,
            "rig": list(self.rig),
            "dreamer": asdict(self.dreamer),
            "agent": asdict(self.agent),
            "mode": self.mode,
            "time_limit": self.time_limit,
            "eval": self.eval.to_dict(),
            "prompt": self.prompt,
            "seed": self.seed,
            "log_images": self.log_images,
        }

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(dr.canonical_json(self.to_dict())).hexdigest()

    @classmethod
    def from_dict(cls, doc: dict | None) -> "SimulationConfig":
        """Schema-validate and build; errors raise :class:`ConfigError` naming the field."""
        doc = {} if doc is None else doc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a mapping", field="<root>")
        try:
            jsonschema.validate(doc, config_schema())
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"invalid config: {exc.message}", field=_error_field(exc)) from exc
        base = cls()
        seed = int(doc.get("seed", base.seed))
        route = doc.get("route", base.route)
        if isinstance(route, dict):
            route = (tuple(route["start"]), tuple(route["goal"]))
        try:
            traffic = tr.TrafficConfig.from_dict({**doc.get("traffic", {}), "seed": seed})
        except ValidationError as exc:
            raise ConfigError(str(exc), field="traffic") from exc
        cfg = cls(
            map=doc.get("map", base.map),
            route=route,
            traffic=traffic,
            rig=tuple(doc.get("rig", base.rig)),
            dreamer=dr.RendererBinding(**doc["dreamer"]) if "dreamer" in doc else base.dreamer,
            agent=ag.AgentBinding(**doc["agent"]) if "agent" in doc else base.agent,
            mode=doc.get("mode", base.mode),
            time_limit=float(doc.get("time_limit", base.time_limit)),
            eval=_eval_from(doc.get("eval")),
            prompt=doc.get("prompt", base.prompt),
            seed=seed,
            log_images=bool(doc.get("log_images", base.log_images)),
        )
        return cfg.validate()

    def with_overrides(self, **kw) -> "SimulationConfig":
        """Copy with top-level fields replaced (``seed`` propagates to traffic)."""
        doc = self.to_dict()
        for k, v in kw.items():
            if v is not None:
                doc[k] = v
        return SimulationConfig.from_dict(doc)


def _eval_from(doc) -> me.EvalConfig:
    try:
        return me.EvalConfig.from_dict(doc)
    except ValidationError as exc:
        raise ConfigError(str(exc), field="eval.weights") from exc


def _error_field(exc: jsonschema.ValidationError) -> str:
    path = [str(p) for p in exc.absolute_path]
    if exc.validator == "required":
        m = re.match(r"'([^']+)'", exc.message)
        if m:
            path.append(m.group(1))
    elif exc.validator == "additionalProperties":
        m = re.search(r"\('([^']+)'", exc.message)
        if m:
            path.append(m.group(1))
    return ".".join(path) or "<root>"


def _semantic_check(cfg: SimulationConfig) -> None:
    if not (math.isfinite(cfg.time_limit) and cfg.time_limit > 0):
        raise ConfigError("time_limit must be positive", field="time_limit")
    if cfg.mode not in ("open_loop", "closed_loop"):
        raise ConfigError(f"unknown mode {cfg.mode!r}", field="mode")
    if not cfg.rig or any(n not in lay.CAMERA_NAMES for n in cfg.rig):
        raise ConfigError("rig must list known cameras", field="rig")
    for name, obj in (("dreamer", cfg.dreamer), ("agent", cfg.agent), ("traffic", cfg.traffic), ("eval", cfg.eval)):
        try:
            obj.validate()
        except ValidationError as exc:
            raise ConfigError(str(exc), field=name) from exc


def load_config(path: str) -> SimulationConfig:
    """Read a YAML (or JSON) config file."""
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}", field="<root>") from exc
    return SimulationConfig.from_dict(doc)


def default_config_yaml() -> str:
    """Full default config, used by ``arenasim init``."""
    return yaml.safe_dump(SimulationConfig().to_dict(), sort_keys=False)


# ---------------------------------------------------------------------------
# Episode log


def _record_hash(seq: int, kind: str, prev: str, data) -> str:
    return hashlib.sha256(dr.canonical_json({"seq": seq, "kind": kind, "prev": prev, "data": data})).hexdigest()


class EpisodeLog:
    """Append-only hash-chained record list, optionally mirrored to a file."""

    def __init__(self, path: str | None = None):
        self.records: list[dict] = []
        self.lines: list[bytes] = []
        self._fh = open(path, "wb") if path else None

    @property
    def head(self) -> str:
        return self.records[-1]["hash"] if self.records else GENESIS

    def append(self, kind: str, data: dict) -> dict:
        seq = len(self.records)
        prev = self.head
        rec = {"seq": seq, "kind": kind, "prev": prev, "data": data, "hash": _record_hash(seq, kind, prev, data)}
        line = dr.canonical_json(rec) + b"\n"
        self.records.append(rec)
        self.lines.append(line)
        if self._fh is not None:
            self._fh.write(line)
            self._fh.flush()
        return rec

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def to_bytes(self) -> bytes:
        return b"".join(self.lines)

    def write(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["kind"] == kind]

    @property
    def header(self) -> dict:
        return self.records[0]["data"]

    @property
    def termination(self) -> dict | None:
        t = self.of_kind("termination")
        return t[0]["data"] if t else None

    @classmethod
    def from_bytes(cls, blob: bytes, require_index: bool = True) -> "EpisodeLog":
        """Parse and verify a log; the first bad record raises :class:`IntegrityError`."""
        log = cls()
        prev = GENESIS
        lines = blob.split(b"\n")
        if lines and lines[-1] == b"":
            lines.pop()
        for i, line in enumerate(lines):
            try:
                rec = json.loads(line)
                seq, kind, rprev, data, h = rec["seq"], rec["kind"], rec["prev"], rec["data"], rec["hash"]
            except (ValueError, KeyError, TypeError) as exc:
                raise IntegrityError(f"record {i} is not a valid log record", record=i) from exc
            if seq != i or rprev != prev or _record_hash(seq, kind, rprev, data) != h:
                raise IntegrityError(f"record {i} fails hash-chain verification", record=i)
            if dr.canonical_json(rec) + b"\n" != line + b"\n":
                raise IntegrityError(f"record {i} is not canonically encoded", record=i)
            log.records.append(rec)
            log.lines.append(line + b"\n")
            prev = h
        if not log.records or log.records[0]["kind"] != "header":
            raise IntegrityError("log does not start with a header", record=0)
        if log.records[0]["data"].get("format") != LOG_FORMAT:
            raise IntegrityError("not an episode log", record=0)
        _check_structure(log, require_index)
        return log

    @classmethod
    def read(cls, path: str, require_index: bool = True) -> "EpisodeLog":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), require_index)


def _check_structure(log: EpisodeLog, require_index: bool) -> None:
    last_t = -math.inf
    frames = set()
    n_term = 0
    prev_resp = None
    for rec in log.records[1:]:
        kind, data, i = rec["kind"], rec["data"], rec["seq"]
        if kind == "frame":
            if data["sim_time"] < last_t:
                raise IntegrityError(f"record {i} goes back in time", record=i)
            last_t = data["sim_time"]
            frames.add(data["tick"])
        elif kind == "control":
            if data["tick"] not in frames:
                raise IntegrityError(f"record {i} references a missing frame", record=i)
            if data["reference_digest"] != (prev_resp["digest"] if prev_resp else None):
                raise IntegrityError(f"record {i} breaks the reference chain", record=i)
            if data["reference_frame_id"] != (prev_resp["frame_id"] if prev_resp else None):
                raise IntegrityError(f"record {i} references the wrong frame", record=i)
            prev_resp = data["response"]
        elif kind == "termination":
            n_term += 1
    if n_term > 1:
        raise IntegrityError("log has more than one termination record", record=len(log.records) - 1)
    if require_index:
        if log.records[-1]["kind"] != "index" or n_term != 1:
            raise IntegrityError("log is incomplete (no termination/index)", record=len(log.records) - 1)


# ---------------------------------------------------------------------------
# Running episodes


@dataclass
class EpisodeResult:
    log: EpisodeLog
    report: me.EvalReport
    episode_id: str

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.report.termination]


def resolve_route(config: SimulationConfig, graph) -> Route:
    if isinstance(config.route, str):
        bundle = load_map(config.map)
        if config.route not in bundle.routes:
            raise ConfigError(f"map {config.map!r} has no route {config.route!r}", field="route")
        spec = bundle.routes[config.route]
        return plan_route(graph, spec.start, spec.goal)
    return plan_route(graph, config.route[0], config.route[1])


def payload_digest(p: lay.ConditionPayload) -> str:
    """Hash over every field of a condition payload (raw array bytes)."""
    h = hashlib.sha256()
    meta = {
        "frame_id": p.frame_id,
        "bev_extent": p.bev_extent,
        "bev_resolution": p.bev_resolution,
        "bands": p.bands,
        "prompt": p.text_prompt,
        "reference_frame_id": p.reference_frame_id,
        "relative_pose": None if p.relative_pose is None else [float(v) for v in p.relative_pose],
        "radius": p.radius,
        "boxes": [b.to_dict() for b in p.boxes],
    }
    h.update(dr.canonical_json(meta))
    for c in p.cameras:
        h.update(c.camera.name.encode())
        for a in (c.camera.K, c.camera.R, c.camera.T, c.layout_canvas, c.cam_embedding):
            h.update(np.ascontiguousarray(a).tobytes())
    for e in p.box_embeddings:
        h.update(np.ascontiguousarray(e).tobytes())
    h.update(np.ascontiguousarray(p.bev_grid).tobytes())
    if p.rel_embedding is not None:
        h.update(np.ascontiguousarray(p.rel_embedding).tobytes())
    return h.hexdigest()


class _BindingDreamer:
    def __init__(self, binding: dr.RendererBinding):
        self.binding = binding

    def request_frame(self, req: dr.DreamRequest) -> dr.DreamResponse:
        return dr.request_frame(self.binding, req)


def _plan_doc(plan: tr.AgentPlan) -> dict:
    return {"waypoints": [[float(v) for v in w] for w in plan.waypoints], "issued_at": float(plan.issued_at)}


def _response_doc(resp: dr.DreamResponse, with_images: bool) -> dict:
    doc = {
        "frame_id": resp.frame_id,
        "digest": resp.digest,
        "renderer_tag": resp.renderer_tag,
        "latency_ms": float(resp.latency_ms),
        "image_digests": {k: dr.image_digest({k: v}) for k, v in sorted(resp.images.items())},
    }
    if with_images:
        doc["images"] = dr._images_doc(resp.images)
    return doc


def _terminate(world: tr.WorldState, route: Route, config: SimulationConfig):
    ego_hits = [c for c in world.collisions if tr.EGO_ID in c.ids]
    if ego_hits:
        other = [i for i in ego_hits[0].ids if i != tr.EGO_ID][0]
        return "COLLISION", f"ego collided with {other}"
    if world.off_road_count >= tr.OFF_ROAD_FRAMES:
        return "OFF_ROAD", f"ego outside the drivable area for {world.off_road_count} frames"
    if world.ego_progress >= route.total_length:
        return "ROUTE_COMPLETE", "route completed"
    if world.sim_time >= config.time_limit - 1e-9:
        return "TIME_LIMIT", f"time limit {config.time_limit:g} s reached"
    return None


def run_episode(
    config: SimulationConfig,
    agent: ag.Agent | None = None,
    dreamer=None,
    log_path: str | None = None,
    episode_id: str | None = None,
    progress=None,
) -> EpisodeResult:
    """Run one episode and score it.

    ``agent`` and ``dreamer`` override the configured bindings (any object
    with ``plan`` / ``request_frame``). Binding failures end the episode with
    the matching termination; any other interruption writes an ``ABORTED``
    termination before the exception propagates, so the log stays valid.
    """
    config.validate()
    episode_id = episode_id or "ep-" + config.config_hash[:12]
    bundle = load_map(config.map)
    graph = bundle.graph
    route = resolve_route(config, graph)
    tcfg = config.traffic
    rig = [c for c in lay.default_rig() if c.name in config.rig]
    agent = agent if agent is not None else ag.make_agent(config.agent)
    dreamer = dreamer if dreamer is not None else _BindingDreamer(config.dreamer)

    log = EpisodeLog(log_path)
    log.append(
        "header",
        {
            "format": LOG_FORMAT,
            "version": LOG_VERSION,
            "episode_id": episode_id,
            "config": config.to_dict(),
            "config_hash": config.config_hash,
            "seed": config.seed,
            "protocol_versions": {"dreamer": dr.PROTOCOL_VERSION, "agent": ag.PROTOCOL_VERSION},
            "route_length": route.total_length,
        },
    )
    frames: list[me.FrameScore] = []
    path = []
    termination = None
    try:
        world = tr.spawn_background_traffic(graph, tcfg, route=route, mode=config.mode)
        world = tr.set_ego_mode(world, config.mode)
        log.append("frame", world.to_record())
        path.append((world.ego.x, world.ego.y))
        prev_resp = None
        prev_pose = None
        yaw_rate = 0.0
        n_control = 0
        while termination is None:
            if world.tick % tr.CONTROL_PERIOD_TICKS == 0:
                out = _control_tick(world, graph, route, config, rig, agent, dreamer, episode_id, n_control, prev_resp, prev_pose, yaw_rate)
                if isinstance(out, tuple) and len(out) == 2 and isinstance(out[0], str):
                    termination = out
                    break
                world, record, resp, score = out
                log.append("control", record)
                frames.append(score)
                prev_resp, prev_pose = resp, world.ego.pose
                n_control += 1
            prev_yaw = world.ego.yaw
            world = tr.step(world, tr.DT, graph, tcfg)
            yaw_rate = float(tr.geo.wrap_angle(world.ego.yaw - prev_yaw)) / tr.DT
            log.append("frame", world.to_record())
            path.append((world.ego.x, world.ego.y))
            termination = _terminate(world, route, config)
            if progress is not None:
                progress(world)
    except BaseException as exc:
        _finish(log, "ABORTED", f"{type(exc).__name__}: {exc}", world_time(log), frames, path, route, config)
        log.close()
        raise
    kind, detail = termination
    report = _finish(log, kind, detail, world_time(log), frames, path, route, config)
    log.close()
    return EpisodeResult(log, report, episode_id)


def world_time(log: EpisodeLog) -> float:
    fr = log.of_kind("frame")
    return fr[-1]["data"]["sim_time"] if fr else 0.0


def _finish(log, kind, detail, t, frames, path, route, config) -> me.EvalReport:
    r_c = me.route_completion(route, np.array(path)) if path else 0.0
    report = me.EvalReport.build(frames, r_c, kind, config.eval)
    log.append("termination", {"kind": kind, "detail": detail, "time": t})
    log.append("report", report.to_document())
    counts = {}
    for r in log.records:
        counts[r["kind"]] = counts.get(r["kind"], 0) + 1
    log.append("index", {"counts": counts, "records": len(log.records) + 1, "head": log.head})
    return report


def _control_tick(world, graph, route, config, rig, agent, dreamer, episode_id, n, prev_resp, prev_pose, yaw_rate):
    ego = world.ego
    frame = lay.extract_layout(world, graph, frame_id=n)
    reference = (prev_resp.frame_id, prev_pose) if prev_resp is not None else None
    payload = lay.build_condition_payload(frame, rig, reference, config.prompt)
    req = dr.DreamRequest(payload, prev_resp.images if prev_resp is not None else None, episode_id)
    try:
        resp = dreamer.request_frame(req)
    except (TransportError, ProtocolError, ContractViolation) as exc:
        return "RENDERER_FAILURE", str(exc)

    command = ag.route_command(world, route)
    obs = ag.AgentObservation(n, resp.images, (float(ego.speed), float(ego.accel), float(yaw_rate)), command, world.sim_time)
    ctx = ag.AgentContext(world, graph, route, config.traffic)
    try:
        plan = ag.request_plan(agent, obs, ctx)
    except (TransportError, ProtocolError, ContractViolation) as exc:
        return "AGENT_TIMEOUT", str(exc)
    degraded = bool(getattr(agent, "degraded", False))
    world = tr.set_ego_mode(world, config.mode, plan)

    map_plan = tr.trajectory_to_map(tr.interpolate_agent_plan(plan), ego.pose)
    map_plan.t = world.sim_time + tr.DT * np.arange(tr.N_SAMPLES)
    ctx_eval = me.FrameContext(
        world.background(), graph, tr.plan_ego_reference(world, graph, config.traffic), route, world.ego_progress, ego.length, ego.width
    )
    score = me.compute_frame_subscores(map_plan, ctx_eval, config.eval, t=n)
    record = {
        "tick": world.tick,
        "frame_id": n,
        "payload_digest": payload_digest(payload),
        "reference_frame_id": payload.reference_frame_id,
        "reference_digest": dr.image_digest(req.reference_images) if req.reference_images is not None else None,
        "response": _response_doc(resp, config.log_images),
        "observation": {
            "frame_id": obs.frame_id,
            "ego_status": list(obs.ego_status),
            "command": list(obs.command),
            "timestamp": obs.timestamp,
            "images_digest": dr.image_digest(obs.images),
        },
        "plan": _plan_doc(plan),
        "plan_degraded": degraded,
        "score": score.to_dict(),
    }
    return world, record, resp, score


def run_open_loop(config: SimulationConfig, **kw) -> EpisodeResult:
    if config.mode != "open_loop":
        raise ConfigError("run_open_loop needs mode open_loop", field="mode")
    return run_episode(config, **kw)


# ---------------------------------------------------------------------------
# Replay


@dataclass
class ReplayResult:
    report: me.EvalReport
    rescored: bool
    matches: bool
    log: EpisodeLog


def recorded_plans(log: EpisodeLog) -> list[tr.AgentPlan]:
    return [tr.AgentPlan(np.array(r["data"]["plan"]["waypoints"], dtype=float), r["data"]["plan"]["issued_at"]) for r in log.of_kind("control")]


def recorded_responses(log: EpisodeLog) -> list[dr.DreamResponse]:
    out = []
    for r in log.of_kind("control"):
        resp = r["data"]["response"]
        if "images" not in resp:
            raise ValidationError("log was written without images; the renderer cannot be replayed")
        out.append(dr.DreamResponse(resp["frame_id"], dr._images_from_doc(resp["images"]), resp["latency_ms"], resp["renderer_tag"]))
    return out


def logged_scores(log: EpisodeLog) -> list[me.FrameScore]:
    return [me.FrameScore(**r["data"]["score"]) for r in log.of_kind("control")]


def replay_episode(log: EpisodeLog, eval_config: me.EvalConfig | None = None) -> ReplayResult:
    """Re-run a logged episode with the replay agent and replay renderer.

    The recomputed frame scores must equal the logged ones bit for bit. With a
    different ``eval_config`` the episode is scored again and flagged
    ``rescored``.
    """
    config = SimulationConfig.from_dict(log.header["config"])
    replayed = run_episode(
        config,
        agent=ag.ReplayAgent(recorded_plans(log)),
        dreamer=dr.ReplayDreamer(recorded_responses(log)),
        episode_id=log.header["episode_id"],
    )
    original = logged_scores(log)
    matches = [f.to_dict() for f in replayed.report.frame_scores] == [f.to_dict() for f in original]
    report = replayed.report
    rescored = False
    if eval_config is not None and eval_config != config.eval:
        rescored = True
        if eval_config.thresholds == config.eval.thresholds:
            frames = me.rescore(report.frame_scores, eval_config.weights)
            report = me.EvalReport.build(frames, report.route_completion, report.termination, eval_config)
        else:
            again = run_episode(
                replace(config, eval=eval_config),
                agent=ag.ReplayAgent(recorded_plans(log)),
                dreamer=dr.ReplayDreamer(recorded_responses(log)),
                episode_id=log.header["episode_id"],
            )
            report = again.report
    return ReplayResult(report, rescored, matches, replayed.log)


# ---------------------------------------------------------------------------
# Service


class EpisodeService:
    """FIFO episode queue served by one worker thread."""

    def __init__(self, defaults: SimulationConfig | None = None):
        self.defaults = defaults or SimulationConfig()
        self.episodes: dict[str, dict] = {}
        self._lock = threading.Lock()
        self._queue: queue.Queue = queue.Queue()
        self._counter = 0
        self._worker = threading.Thread(target=self._work, daemon=True)
        self._worker.start()

    def submit(self, doc: dict) -> str:
        merged = {**self.defaults.to_dict(), **(doc or {})}
        config = SimulationConfig.from_dict(merged)
        with self._lock:
            self._counter += 1
            eid = f"ep-{self._counter:06d}"
            self.episodes[eid] = {"id": eid, "status": "queued", "config": config, "log": None, "report": None, "error": None}
        self._queue.put(eid)
        return eid

    def _work(self):
        while True:
            eid = self._queue.get()
            if eid is None:
                return
            ep = self.episodes[eid]
            ep["status"] = "running"
            try:
                res = run_episode(ep["config"], episode_id=eid)
                with self._lock:
                    ep["log"] = res.log
                    ep["report"] = res.report
                    ep["status"] = res.report.termination
            except (ArenaError, ValueError) as exc:
                with self._lock:
                    ep["status"] = "failed"
                    ep["error"] = str(exc)

    def status(self, eid: str) -> dict | None:
        with self._lock:
            ep = self.episodes.get(eid)
            if ep is None:
                return None
            return {
                "id": eid,
                "status": ep["status"],
                "report": None if ep["report"] is None else ep["report"].to_document(),
                "error": ep["error"],
            }

    def log_bytes(self, eid: str) -> bytes | None:
        with self._lock:
            ep = self.episodes.get(eid)
            if ep is None or ep["log"] is None:
                return None
            return ep["log"].to_bytes()

    def shutdown(self):
        self._queue.put(None)


def make_service_server(host: str = "127.0.0.1", port: int = 0, defaults: SimulationConfig | None = None) -> ThreadingHTTPServer:
    service = EpisodeService(defaults)

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _send(self, code, body: bytes, ctype="application/json"):
            self.send_response(code)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _json(self, code, doc):
            self._send(code, dr.canonical_json(doc))

        def do_GET(self):
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            if parts == ["healthz"]:
                self._json(200, {"status": "ok", "version": __version__, "protocols": {"dreamer": dr.PROTOCOL_VERSION, "agent": ag.PROTOCOL_VERSION}})
            elif len(parts) == 2 and parts[0] == "episodes":
                st = service.status(parts[1])
                self._json(200, st) if st else self._json(404, {"error": "unknown episode"})
            elif len(parts) == 3 and parts[0] == "episodes" and parts[2] == "log":
                if service.status(parts[1]) is None:
                    self._json(404, {"error": "unknown episode"})
                    return
                blob = service.log_bytes(parts[1])
                if blob is None:
                    self._json(409, {"error": "episode has not finished"})
                else:
                    self._send(200, blob, "application/x-ndjson")
            else:
                self._json(404, {"error": "not found"})

        def do_POST(self):
            if self.path.rstrip("/") != "/episodes":
                self._json(404, {"error": "not found"})
                return
            body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
            try:
                doc = json.loads(body or b"{}")
            except ValueError:
                self._json(400, {"error": "body is not JSON"})
                return
            try:
                eid = service.submit(doc)
            except ConfigError as exc:
                self._json(422, {"error": str(exc), "field": exc.field})
                return
            self._json(202, {"id": eid, "status": "queued"})

    server = ThreadingHTTPServer((host, port), Handler)
    server.service = service
    return server
