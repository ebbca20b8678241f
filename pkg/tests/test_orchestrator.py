import json
import time
import urllib.error
import urllib.request

import numpy as np
import pytest
import yaml

from arenasim import agent as ag
from arenasim import dreamer as dr
from arenasim import traffic as tr
from arenasim.errors import ConfigError, IntegrityError, TransportError
from arenasim.metrics import EvalConfig, ScoreWeights
from arenasim.orchestrator import (
    EXIT_CODES,
    EpisodeLog,
    SimulationConfig,
    default_config_yaml,
    load_config,
    make_service_server,
    replay_episode,
    run_episode,
    run_open_loop,
)
from oracles import serving

TINY = {"map": "singapore-hollandvillage", "route": "sing_route_2", "time_limit": 2.0}


def tiny(**kw):
    return SimulationConfig.from_dict({**TINY, **kw})


class Flaky(ag.Agent):
    """Builtin rule-based agent that fails on call ``n`` with ``exc``."""

    def __init__(self, n, exc):
        self.inner, self.n, self.exc, self.calls = ag.make_agent(ag.AgentBinding()), n, exc, 0

    def plan(self, obs, ctx=None):
        self.calls += 1
        if self.calls == self.n:
            raise self.exc
        return self.inner.plan(obs, ctx)


# ---------------------------------------------------------------------------
# Loop structure


def test_cadence_five_steps_between_control_records(short_episode):
    _, res = short_episode
    kinds = [r["kind"] for r in res.log.records]
    assert kinds[0] == "header" and kinds[1] == "frame" and kinds[2] == "control"
    first_control = res.log.of_kind("control")[0]["data"]
    assert first_control["tick"] == 0 and res.log.of_kind("frame")[0]["data"]["sim_time"] == 0.0
    idx = [i for i, k in enumerate(kinds) if k == "control"]
    assert all(kinds[a:b].count("frame") == 5 for a, b in zip(idx, idx[1:]))
    ticks = [r["data"]["tick"] for r in res.log.of_kind("control")]
    assert ticks == list(range(0, 5 * len(ticks), 5))


def test_short_episode_hits_time_limit(short_episode):
    cfg, res = short_episode
    assert res.report.termination == "TIME_LIMIT" and res.exit_code == EXIT_CODES["TIME_LIMIT"]
    assert len(res.report.frame_scores) == 20
    times = [r["data"]["sim_time"] for r in res.log.of_kind("frame")]
    assert np.all(np.diff(times) > 0) and times[-1] == pytest.approx(cfg.time_limit)
    kinds = [r["kind"] for r in res.log.records]
    assert kinds[-3:] == ["termination", "report", "index"] and kinds.count("termination") == 1


def test_header_records_config_and_protocols(short_episode):
    cfg, res = short_episode
    h = res.log.header
    assert h["config_hash"] == cfg.config_hash and h["seed"] == cfg.seed
    assert h["protocol_versions"] == {"dreamer": dr.PROTOCOL_VERSION, "agent": ag.PROTOCOL_VERSION}
    assert SimulationConfig.from_dict(h["config"]) == cfg


def test_reference_chain_links_previous_response(short_episode):
    _, res = short_episode
    ctrl = [r["data"] for r in res.log.of_kind("control")]
    assert ctrl[0]["reference_frame_id"] is None and ctrl[0]["reference_digest"] is None
    for prev, cur in zip(ctrl, ctrl[1:]):
        assert cur["reference_frame_id"] == prev["response"]["frame_id"]
        assert cur["reference_digest"] == prev["response"]["digest"]


def test_report_matches_logged_scores(short_episode):
    _, res = short_episode
    rep = res.log.of_kind("report")[0]["data"]
    assert rep == res.report.to_document()
    assert rep["ads"] == pytest.approx(rep["route_completion"] * rep["pdms"])


def test_same_seed_gives_identical_logs():
    a = run_episode(tiny(seed=3))
    b = run_episode(tiny(seed=3))
    assert a.log.to_bytes() == b.log.to_bytes()
    c = run_episode(tiny(seed=4))
    assert c.log.to_bytes() != a.log.to_bytes()


# ---------------------------------------------------------------------------
# Failures and crash consistency


@pytest.mark.parametrize("n", [1, 2, 4])
def test_interrupted_episode_leaves_valid_log(tmp_path, n):
    path = tmp_path / "ep.ndjson"
    with pytest.raises(KeyboardInterrupt):
        run_episode(tiny(), agent=Flaky(n, KeyboardInterrupt()), log_path=str(path))
    log = EpisodeLog.read(str(path))
    assert log.termination["kind"] == "ABORTED" and "KeyboardInterrupt" in log.termination["detail"]
    assert len(log.of_kind("control")) == n - 1


def test_agent_transport_failure_terminates_episode(tmp_path):
    path = tmp_path / "ep.ndjson"
    res = run_episode(tiny(), agent=Flaky(3, TransportError("down")), log_path=str(path))
    assert res.report.termination == "AGENT_TIMEOUT" and res.exit_code == EXIT_CODES["AGENT_TIMEOUT"]
    assert EpisodeLog.read(str(path)).to_bytes() == res.log.to_bytes()
    assert len(res.log.of_kind("control")) == 2


def test_renderer_failure_terminates_episode():
    class Broken:
        def request_frame(self, req):
            raise TransportError("renderer offline")

    res = run_episode(tiny(), dreamer=Broken())
    assert res.report.termination == "RENDERER_FAILURE"
    assert res.report.route_completion == 0.0 and res.report.ads == 0.0


def test_unknown_route_is_config_error():
    with pytest.raises(ConfigError) as exc:
        run_episode(tiny(route="sing_route_9"))
    assert exc.value.field == "route"


# ---------------------------------------------------------------------------
# Log integrity


def test_log_roundtrip(short_episode):
    _, res = short_episode
    blob = res.log.to_bytes()
    assert EpisodeLog.from_bytes(blob).to_bytes() == blob


def test_flipped_byte_names_first_bad_record(short_episode):
    _, res = short_episode
    lines = res.log.to_bytes().split(b"\n")
    target = 7
    line = bytearray(lines[target])
    pos = line.index(b'"sim_time":') + len(b'"sim_time":')
    line[pos] = ord("9") if line[pos] != ord("9") else ord("8")
    lines[target] = bytes(line)
    with pytest.raises(IntegrityError) as exc:
        EpisodeLog.from_bytes(b"\n".join(lines))
    assert exc.value.record == target


def test_dropped_record_breaks_chain(short_episode):
    _, res = short_episode
    lines = res.log.to_bytes().split(b"\n")
    with pytest.raises(IntegrityError) as exc:
        EpisodeLog.from_bytes(b"\n".join(lines[:4] + lines[5:]))
    assert exc.value.record == 4


def test_truncated_log_needs_index(short_episode):
    _, res = short_episode
    partial = b"".join(res.log.lines[:30])
    with pytest.raises(IntegrityError):
        EpisodeLog.from_bytes(partial)
    assert len(EpisodeLog.from_bytes(partial, require_index=False).records) == 30


def test_rehashed_but_inconsistent_reference_is_caught(short_episode):
    _, res = short_episode
    from arenasim.orchestrator import GENESIS, _record_hash

    recs = [json.loads(line) for line in res.log.lines]
    second = [i for i, r in enumerate(recs) if r["kind"] == "control"][1]
    recs[second]["data"]["reference_digest"] = "f" * 64
    prev = GENESIS
    for r in recs:  # re-chain so only the structural check can notice
        r["prev"] = prev
        r["hash"] = prev = _record_hash(r["seq"], r["kind"], r["prev"], r["data"])
    blob = b"".join(dr.canonical_json(r) + b"\n" for r in recs)
    with pytest.raises(IntegrityError) as exc:
        EpisodeLog.from_bytes(blob)
    assert exc.value.record == second


# ---------------------------------------------------------------------------
# Replay


def test_replay_reproduces_scores(short_episode):
    _, res = short_episode
    out = replay_episode(res.log)
    assert out.matches and not out.rescored
    assert out.report.to_document() == res.report.to_document()
    assert out.log.to_bytes() == res.log.to_bytes()


def test_replay_with_new_weights_is_flagged(short_episode):
    _, res = short_episode
    out = replay_episode(res.log, EvalConfig(weights=ScoreWeights(1.0, 0.0, 0.0)))
    assert out.matches and out.rescored
    assert out.report.config.weights == ScoreWeights(1.0, 0.0, 0.0)


def test_replay_without_images_is_refused():
    res = run_episode(tiny(log_images=False))
    with pytest.raises(Exception, match="without images"):
        replay_episode(res.log)


# ---------------------------------------------------------------------------
# Open loop


def test_open_loop_world_is_agent_invariant(open_loop_pair):
    a, b = open_loop_pair
    assert [r["data"] for r in a.log.of_kind("frame")] == [r["data"] for r in b.log.of_kind("frame")]
    assert a.report.pdms > 0 and b.report.pdms != a.report.pdms


def test_open_and_closed_loop_diverge_after_spawn():
    closed = run_episode(tiny(agent={"kind": "hard_left"}, time_limit=3.0))
    opened = run_open_loop(tiny(agent={"kind": "hard_left"}, mode="open_loop", time_limit=3.0))
    f_c, f_o = closed.log.of_kind("frame"), opened.log.of_kind("frame")
    bg = lambda f: [v for v in f["data"]["vehicles"] if v["id"] != tr.EGO_ID]
    ego = lambda f: next(v for v in f["data"]["vehicles"] if v["id"] == tr.EGO_ID)
    assert bg(f_c[0]) == bg(f_o[0])
    gap = np.hypot(*(np.array(ego(f_c[-1])["pose"][:2]) - ego(f_o[-1])["pose"][:2]))
    assert gap > 1.0


def test_run_open_loop_requires_open_mode():
    with pytest.raises(ConfigError):
        run_open_loop(tiny())


# ---------------------------------------------------------------------------
# Configuration


@pytest.mark.parametrize(
    "doc, field",
    [
        ({"time_limit": -1}, "time_limit"),
        ({"mode": "sideways"}, "mode"),
        ({"seed": "x"}, "seed"),
        ({"colour": "red"}, "colour"),
        ({"agent": {"kind": "remote"}}, "agent"),
        ({"eval": {"weights": {"w_ep": 0, "w_ttc": 0, "w_c": 0}}}, "eval.weights"),
        ({"rig": ["ROOF"]}, "rig"),
    ],
)
def test_invalid_config_names_field(doc, field):
    with pytest.raises(ConfigError) as exc:
        SimulationConfig.from_dict(doc)
    assert exc.value.field.startswith(field)


def test_config_roundtrip_and_overrides():
    cfg = SimulationConfig()
    assert SimulationConfig.from_dict(cfg.to_dict()) == cfg
    seeded = cfg.with_overrides(seed=9)
    assert seeded.seed == 9 and seeded.traffic.seed == 9 and seeded.config_hash != cfg.config_hash


def test_default_yaml_loads_back(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(default_config_yaml())
    assert load_config(str(p)) == SimulationConfig()
    assert yaml.safe_load(default_config_yaml())["time_limit"] == 120.0
    p.write_text("map: [unclosed")
    with pytest.raises(ConfigError):
        load_config(str(p))


# ---------------------------------------------------------------------------
# Service


def _get(url):
    try:
        with urllib.request.urlopen(url, timeout=10) as r:
            return r.status, r.read()
    except urllib.error.HTTPError as e:
        return e.code, e.read()


def _post(url, doc):
    req = urllib.request.Request(url, json.dumps(doc).encode(), {"Content-Type": "application/json"})
    return _get(req)


def test_service_endpoints():
    server = make_service_server()
    with serving(server) as url:
        code, body = _get(url + "/healthz")
        assert code == 200 and json.loads(body)["status"] == "ok"
        code, body = _post(url + "/episodes", {"time_limit": -1})
        assert code == 422 and json.loads(body)["field"] == "time_limit"
        code, body = _post(url + "/episodes", TINY)
        assert code == 202
        eid = json.loads(body)["id"]
        deadline = time.time() + 120
        while time.time() < deadline:
            st = json.loads(_get(f"{url}/episodes/{eid}")[1])
            if st["status"] not in ("queued", "running"):
                break
            time.sleep(0.2)
        assert st["status"] == "TIME_LIMIT" and "ads" in st["report"]
        code, blob = _get(f"{url}/episodes/{eid}/log")
        assert code == 200 and EpisodeLog.from_bytes(blob).header["episode_id"] == eid
        assert _get(url + "/episodes/ep-999999")[0] == 404
        assert _get(url + "/nowhere")[0] == 404
    server.service.shutdown()


def test_service_runs_fifo():
    server = make_service_server()
    svc = server.service
    ids = [svc.submit({**TINY, "time_limit": 1.0, "seed": s}) for s in (1, 2)]
    deadline = time.time() + 120
    while time.time() < deadline and svc.status(ids[1])["status"] in ("queued", "running"):
        assert not (svc.status(ids[1])["status"] == "running" and svc.status(ids[0])["status"] in ("queued", "running"))
        time.sleep(0.05)
    assert [svc.status(i)["status"] for i in ids] == ["TIME_LIMIT", "TIME_LIMIT"]
    svc.shutdown()
    server.server_close()
