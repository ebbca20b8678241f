"""Shared fixtures and the acceptance summary.

Full episodes take tens of seconds each, so the closed-loop route suite and a
few other runs are computed once per session and shared between test files.
Tests tagged ``@pytest.mark.criterion(n, title)`` are summarised at the end of
the run as one PASS/FAIL line per acceptance criterion.
"""

from __future__ import annotations

import pytest

from arenasim.layout import extract_layout
from arenasim.maps import load_map
from arenasim.orchestrator import SimulationConfig, run_episode
from arenasim.roadnet import plan_route
from arenasim.traffic import TrafficConfig, spawn_background_traffic

SUITE_ROUTES = {
    "sing_route_1": "singapore-onenorth",
    "sing_route_2": "singapore-hollandvillage",
    "boston_route_1": "boston-seaport",
    "boston_route_2": "boston-seaport",
}

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        n, title = mark.args
        entry = _criteria.setdefault(n, {"title": title, "passed": 0, "failed": [], "time": 0.0})
        entry["time"] += rep.duration
        if rep.passed:
            entry["passed"] += 1
        elif not rep.skipped:
            entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        total = e["passed"] + len(e["failed"])
        status = "PASS" if not e["failed"] else "FAIL"
        line = f"criterion {n:>2}: {status}  {e['title']}  ({e['passed']}/{total} checks, {e['time']:.1f} s)"
        if e["failed"]:
            line += "  failing: " + ", ".join(e["failed"])
        tr.write_line(line)


@pytest.fixture(scope="session")
def suite_results():
    """Closed-loop rule-based episodes on the four standard routes (seed 0)."""
    out = {}
    for route, map_name in SUITE_ROUTES.items():
        cfg = SimulationConfig(map=map_name, route=route)
        out[route] = (cfg, run_episode(cfg))
    return out


@pytest.fixture(scope="session")
def short_episode():
    """A 10 s closed-loop episode on sing_route_2; quick to replay."""
    cfg = SimulationConfig(map="singapore-hollandvillage", route="sing_route_2", time_limit=10.0)
    return cfg, run_episode(cfg)


@pytest.fixture(scope="session")
def open_loop_pair():
    """Two open-loop runs that differ only in the agent binding."""
    base = {"map": "singapore-hollandvillage", "route": "sing_route_2", "mode": "open_loop"}
    a = run_episode(SimulationConfig.from_dict({**base, "agent": {"kind": "rule_based"}}))
    b = run_episode(SimulationConfig.from_dict({**base, "agent": {"kind": "constant_velocity"}}))
    return a, b


@pytest.fixture(scope="session")
def street_frame():
    """Layout around the ego at the start of sing_route_2 with dense traffic."""
    bundle = load_map("singapore-hollandvillage")
    spec = bundle.routes["sing_route_2"]
    route = plan_route(bundle.graph, spec.start, spec.goal)
    world = spawn_background_traffic(bundle.graph, TrafficConfig(spawn_density=30.0, seed=1), route)
    frame = extract_layout(world, bundle.graph)
    assert frame.boxes, "fixture should see at least one vehicle"
    return frame
