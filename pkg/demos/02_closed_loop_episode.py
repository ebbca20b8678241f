"""One closed-loop episode, end to end.

The rule-based agent drives sing_route_2 while the synthetic renderer turns
each 2 Hz layout into six camera views. The script prints the sub-scores of
a few frames and the episode report, then writes the bird's-eye layout and
the rendered views of one control tick to demos/out/.

    python3 demos/02_closed_loop_episode.py
"""

from pathlib import Path

import numpy as np
from PIL import Image

from arenasim.layout import extract_layout, rasterize_bev
from arenasim.maps import load_map
from arenasim.orchestrator import SimulationConfig, recorded_responses, run_episode

OUT = Path(__file__).resolve().parent / "out"
OUT.mkdir(exist_ok=True)
SNAPSHOT_TICK = 100  # 10 s into the episode

config = SimulationConfig(map="singapore-hollandvillage", route="sing_route_2", seed=0)
graph = load_map(config.map).graph
snapshot = {}


def watch(world):
    if world.tick == SNAPSHOT_TICK:
        snapshot["layout"] = extract_layout(world, graph)


result = run_episode(config, progress=watch)
report = result.report

print(f"{'t':>3} {'NC':>3} {'DAC':>3} {'EP':>6} {'TTC':>3} {'C':>3} {'PDMS':>6}")
for f in report.frame_scores[::10]:
    print(f"{f.t:>3} {f.nc:>3} {f.dac:>3} {f.ep:>6.3f} {f.ttc:>3} {f.comfort:>3} {f.pdms_t:>6.3f}")
print(f"\n{len(report.frame_scores)} scored frames; termination {report.termination}")
print(f"PDMS {report.pdms:.4f}   RC {report.route_completion:.4f}   ADS {report.ads:.4f}")

# Bird's-eye layout at the snapshot: one colour per map layer, ego at the centre.
bev = rasterize_bev(snapshot["layout"])
palette = np.array([[255, 255, 255], [255, 200, 0], [0, 160, 255], [70, 70, 70]], dtype=np.uint8)
img = np.zeros(bev.shape[1:] + (3,), dtype=np.uint8)
for layer in (3, 0, 1, 2):  # drivable area first, lines on top
    img[bev[layer] > 0] = palette[layer]
Image.fromarray(img).save(OUT / "bev.png")

# The six views the agent saw at the same moment.
views = recorded_responses(result.log)[SNAPSHOT_TICK // 5].images
order = ["FRONT_LEFT", "FRONT", "FRONT_RIGHT", "BACK_RIGHT", "BACK", "BACK_LEFT"]
grid = np.vstack([np.hstack([views[n] for n in order[:3]]), np.hstack([views[n] for n in order[3:]])])
Image.fromarray(grid).save(OUT / "views.png")
result.log.write(str(OUT / "sing_route_2.log.ndjson"))
print(f"wrote {OUT / 'bev.png'}, {OUT / 'views.png'} and the episode log")
