"""Regenerate the golden protocol messages under src/arenasim/fixtures/protocol/.

    python3 tools/build_protocol_fixtures.py

The messages are built from fixed inputs only, so rerunning the script must
leave the files unchanged; the acceptance suite checks both that and the
decode/encode identity on the shipped bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from arenasim import traffic as tr
from arenasim.agent import AgentObservation, encode_observation, encode_plan
from arenasim.dreamer import DreamRequest, RendererBinding, encode_request, encode_response, request_frame
from arenasim.layout import Box3D, LayoutFrame, build_condition_payload, default_rig

OUT = Path(__file__).resolve().parents[1] / "src" / "arenasim" / "fixtures" / "protocol"
FILES = {
    "dream_request": "dream_request.json",
    "dream_response": "dream_response.json",
    "agent_observation": "agent_observation.json",
    "agent_plan": "agent_plan.json",
}


def messages() -> dict[str, bytes]:
    """Encoded golden messages keyed by message name."""
    rig = default_rig()
    frame = LayoutFrame(
        3,
        (12.0, -4.0, 0.3),
        boxes=[
            Box3D("car", (10.0, 1.5, 0.8), (4.6, 1.8, 1.6), 0.1),
            Box3D("pedestrian", (6.0, -3.0, 0.9), (0.6, 0.6, 1.8), 1.2),
        ],
    )
    payload = build_condition_payload(frame, rig, reference_frame=(2, (8.0, -4.5, 0.28)), prompt="rainy dusk")
    reference = {c.name: np.full((224, 400, 3), 40 + 20 * i, np.uint8) for i, c in enumerate(rig)}
    req = DreamRequest(payload, reference, "ep-golden")
    resp = request_frame(RendererBinding(), req)
    obs = AgentObservation(3, resp.images, (5.0, 0.2, 0.01), (19.8, 0.6), 1.5)
    plan = tr.AgentPlan(np.array([[2.0 * k, 0.05 * k * k, 0.01 * k] for k in range(1, 7)]), 1.5)
    return {
        "dream_request": encode_request(req),
        "dream_response": encode_response(resp),
        "agent_observation": encode_observation(obs),
        "agent_plan": encode_plan(plan),
    }


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    for name, blob in messages().items():
        (OUT / FILES[name]).write_bytes(blob)
        print(f"{FILES[name]}: {len(blob)} bytes")


if __name__ == "__main__":
    main()
