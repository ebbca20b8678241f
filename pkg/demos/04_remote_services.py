"""Renderer and agent as HTTP services, then a bit-exact replay.

Starts a renderer service and an agent service on localhost, runs a short
episode against them, and replays the resulting log offline. The agent
service here is a plain lane keeper that reads only the ego speed and the
route command, which is all a camera-free policy gets over the wire.

    python3 demos/04_remote_services.py
"""

import threading

import numpy as np

from arenasim.agent import make_agent_server
from arenasim.dreamer import make_dreamer_server
from arenasim.orchestrator import SimulationConfig, replay_episode, run_episode
from arenasim.traffic import AgentPlan


def lane_keeper(obs):
    """Steer toward the route command at the current speed (at least 3 m/s)."""
    speed = max(3.0, obs.ego_status[0])
    cx, cy = obs.command
    heading = np.arctan2(cy, cx)
    t = np.array(AgentPlan.TIMES)
    d = speed * t
    return np.column_stack([d * np.cos(heading), d * np.sin(heading), np.full(6, heading)])


servers = [make_dreamer_server(tag="remote-synthetic"), make_agent_server(lane_keeper)]
for s in servers:
    threading.Thread(target=s.serve_forever, daemon=True).start()
dream_url, agent_url = (f"http://127.0.0.1:{s.server_address[1]}" for s in servers)
print(f"renderer at {dream_url}, agent at {agent_url}")

config = SimulationConfig.from_dict(
    {
        "map": "singapore-hollandvillage",
        "route": "sing_route_2",
        "time_limit": 10.0,
        "dreamer": {"kind": "remote", "endpoint": dream_url},
        "agent": {"kind": "remote", "endpoint": agent_url},
    }
)
result = run_episode(config)
r = result.report
latency = [c["data"]["response"]["latency_ms"] for c in result.log.of_kind("control")]
print(f"episode: {r.termination}, PDMS {r.pdms:.3f}, RC {r.route_completion:.3f}, ADS {r.ads:.3f}")
print(f"renderer round trips: {len(latency)}, median latency {np.median(latency):.1f} ms")

for s in servers:
    s.shutdown()

# Replay needs neither service: plans and images come from the log.
replayed = replay_episode(result.log)
print(f"offline replay reproduces every frame score: {replayed.matches}")
