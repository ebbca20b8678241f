"""Regenerate the bundled map fixtures under src/arenasim/fixtures/maps.

The maps are small synthetic street networks laid out in local meters around
real-world origins. Every route is planned and printed as a sanity check.

    python tools/build_fixture_maps.py
"""

from __future__ import annotations

import json
import math
import os

import numpy as np

from arenasim.maps import build_fixture, fixture_path, parse_fixture
from arenasim.roadnet import GeoOrigin, plan_route


def arc(cx, cy, r, a0, a1, n):
    """Points on a circular arc, angles in degrees, endpoints included."""
    return [(cx + r * math.cos(math.radians(a)), cy + r * math.sin(math.radians(a))) for a in np.linspace(a0, a1, n)]


class Builder:
    def __init__(self):
        self.nodes = {}
        self.ways = []
        self._next = 1

    def node(self, x, y, tags=None):
        for nid, spec in self.nodes.items():
            if math.hypot(spec[0] - x, spec[1] - y) < 0.5:
                if tags:
                    spec[2].update(tags)
                return nid
        nid = str(self._next)
        self._next += 1
        self.nodes[nid] = (float(x), float(y), dict(tags or {}))
        return nid

    def way(self, pts, **tags):
        refs = [self.node(*p) if len(p) == 2 else self.node(p[0], p[1], p[2]) for p in pts]
        self.ways.append((str(1000 + len(self.ways)), refs, tags))


CROSS = {"highway": "crossing"}


def boston_seaport():
    """Grid of avenues and cross streets with one curved connector."""
    b = Builder()
    b.way([(-300, 0), (-100, 0), (0, 0, CROSS), (100, 0), (300, 0), (500, 0)], highway="secondary", lanes="4", name="Seaport Blvd")
    b.way([(-300, 220), (-100, 220), (100, 220), (300, 220)], highway="tertiary", name="Congress St")
    b.way([(-100, -200), (-100, 0), (-100, 220)], highway="residential", name="Sleeper St")
    b.way([(100, -200), (100, 0), (100, 110, CROSS), (100, 220)], highway="residential", name="Fan Pier Blvd")
    b.way([(300, 0), (300, 220)], highway="residential", name="D St")
    b.way([(300, 220), *arc(300, 320, 100, -90, 0, 9)[1:], (400, 500)], highway="tertiary", name="Summer St")
    routes = {
        "boston_route_1": ((-290, -1.75), (101.75, 150)),
        "boston_route_2": ((-80, 218.25), (401.75, 420)),
    }
    return b, routes


def singapore_onenorth():
    """Arterial winding between two cross streets (radius >= 100 m), straight outside."""
    b = Builder()

    def wave(x):
        return 40.0 * math.sin(2.0 * math.pi * x / 400.0) if abs(x) <= 200 else 0.0

    b.way([(x, wave(x), CROSS) if x == -100 else (x, wave(x)) for x in range(-360, 361, 10)], highway="secondary", lanes="2", name="Fusionopolis Way")
    b.way([(0, -160), (0, 0), (0, 160)], highway="residential", name="Biopolis Dr")
    b.way([(-200, -150), (-200, 0), (-200, 150)], highway="residential", name="Portsdown Rd")
    routes = {"sing_route_1": ((-300, -1.75), (300, -1.75))}
    return b, routes


def singapore_hollandvillage():
    """Skewed four-way grid around a village centre."""
    b = Builder()
    skew = math.radians(12)

    def p(x, y):
        return (x + y * math.sin(skew), y * math.cos(skew))

    b.way([p(-250, 0), p(0, 0), p(250, 0)], highway="secondary", lanes="2", name="Holland Ave")
    b.way([p(-250, 180), p(0, 180), p(250, 180)], highway="residential", name="Lorong Liput")
    b.way([p(0, -150), p(0, 0), (*p(0, 90), CROSS), p(0, 180), p(0, 330)], highway="tertiary", name="Holland Rd")
    b.way([p(250, 0), p(250, 180)], highway="residential", name="Lorong Mambong")
    routes = {"sing_route_2": (p(-240, -1.75), p(1.75, 260))}
    return b, routes


def singapore_queenstown():
    """Arterial with a gentle S-bend and two side streets."""
    b = Builder()
    s_bend = arc(0, 150, 150, -90, -45, 6) + arc(212.13, -62.13, 150, 135, 90, 6)[1:]
    b.way([(-300, 0), (-150, 0), (-50, 0, CROSS), *s_bend, (400, 87.87), (500, 87.87)], highway="primary", lanes="2", name="Queensway")
    b.way([(-150, -200), (-150, 0), (-150, 200)], highway="residential", name="Dawson Rd")
    b.way([(400, 87.87), (400, 300)], highway="residential", name="Margaret Dr")
    routes = {"queenstown_route_1": ((-100, -1.75), (401.75, 220))}
    return b, routes


MAPS = {
    "boston-seaport": (GeoOrigin(42.3505, -71.0440), boston_seaport),
    "singapore-onenorth": (GeoOrigin(1.2990, 103.7870), singapore_onenorth),
    "singapore-hollandvillage": (GeoOrigin(1.3110, 103.7950), singapore_hollandvillage),
    "singapore-queenstown": (GeoOrigin(1.2940, 103.8060), singapore_queenstown),
}


def main():
    os.makedirs(os.path.dirname(fixture_path("x")), exist_ok=True)
    for name, (origin, make) in MAPS.items():
        b, routes = make()
        doc = build_fixture(name, origin, b.nodes, b.ways, routes)
        bundle = parse_fixture(doc)
        g = bundle.graph
        print(f"{name}: {len(g.lanes)} lanes, {len(g.junctions)} junctions, {len(g.crossings)} crossings")
        for rname, spec in bundle.routes.items():
            r = plan_route(g, spec.start, spec.goal)
            print(f"  {rname}: {r.total_length:.1f} m over {len(r.lane_sequence)} lanes")
        with open(fixture_path(name), "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")


if __name__ == "__main__":
    main()
