"""Map sources: OSM files and the bundled JSON map fixtures.

A map fixture is a versioned JSON document holding OSM-style nodes and ways
plus named routes::

    {
      "format": "arenasim-map",
      "version": 1,
      "name": "boston-seaport",
      "origin": {"latitude": 42.35, "longitude": -71.04},
      "nodes": [{"id": "1", "lat": 42.35, "lon": -71.04, "tags": {}}],
      "ways": [{"id": "10", "nodes": ["1", "2"], "tags": {"highway": "residential"}}],
      "routes": {"boston_route_1": {"start": [x, y], "goal": [x, y]}}
    }

Route endpoints are in local meters about ``origin``. The schema lives next
to the fixtures as ``map.schema.json``.
"""

from __future__ import annotations

import json
import math
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import jsonschema

from .errors import MapParseError
from .roadnet import GeoOrigin, RoadGraph, graph_from_elements, local_to_latlon, osm_origin, parse_osm

FIXTURE_FORMAT = "arenasim-map"
FIXTURE_VERSION = 1
FIXTURE_MAPS = ("boston-seaport", "singapore-onenorth", "singapore-hollandvillage", "singapore-queenstown")


@dataclass(frozen=True)
class RouteSpec:
    name: str
    start: tuple[float, float]
    goal: tuple[float, float]


@dataclass
class MapBundle:
    graph: RoadGraph
    routes: dict[str, RouteSpec]
    source: str


def _fixture_dir():
    return resources.files("arenasim") / "fixtures"


@lru_cache(maxsize=1)
def map_schema() -> dict:
    return json.loads((_fixture_dir() / "map.schema.json").read_text())


def fixture_path(name: str) -> str:
    return str(_fixture_dir() / "maps" / f"{name}.json")


def route_index() -> dict[str, str]:
    """Route name -> fixture map name for every bundled route."""
    out = {}
    for m in FIXTURE_MAPS:
        doc = json.loads(open(fixture_path(m)).read())
        for r in doc.get("routes", {}):
            out[r] = m
    return out


def parse_fixture(doc: dict | str) -> MapBundle:
    """Validate and build a map fixture document."""
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise MapParseError(f"malformed map fixture: {exc.msg}", line=exc.lineno) from exc
    try:
        jsonschema.validate(doc, map_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise MapParseError(f"map fixture invalid at {where}: {exc.message}") from exc
    origin = GeoOrigin(doc["origin"]["latitude"], doc["origin"]["longitude"])
    nodes = {n["id"]: (float(n["lat"]), float(n["lon"]), dict(n.get("tags", {}))) for n in doc["nodes"]}
    ways = [(w["id"], list(w["nodes"]), dict(w.get("tags", {}))) for w in doc["ways"]]
    graph = graph_from_elements(nodes, ways, origin, doc["name"])
    routes = {k: RouteSpec(k, tuple(v["start"]), tuple(v["goal"])) for k, v in doc.get("routes", {}).items()}
    return MapBundle(graph, routes, doc["name"])


_CACHE: dict[str, MapBundle] = {}


def load_map(source: str) -> MapBundle:
    """Load a bundled fixture by name, a fixture ``.json`` file or an ``.osm`` file.

    Bundles are cached per source; graphs are immutable so sharing is safe.
    """
    if source in _CACHE:
        return _CACHE[source]
    if source in FIXTURE_MAPS:
        with open(fixture_path(source)) as fh:
            bundle = parse_fixture(fh.read())
    elif source.endswith(".json"):
        with open(source) as fh:
            bundle = parse_fixture(fh.read())
    else:
        with open(source, "rb") as fh:
            text = fh.read()
        graph = parse_osm(text, osm_origin(text), name=os.path.basename(source))
        bundle = MapBundle(graph, {}, source)
    _CACHE[source] = bundle
    return bundle


def build_osm(nodes: dict, ways: list, origin: GeoOrigin) -> str:
    """Write OSM XML from nodes given in local meters.

    ``nodes`` maps id -> (east, north) or (east, north, tags); ``ways`` is a
    list of (id, refs, tags).
    """
    root = ET.Element("osm", version="0.6", generator="arenasim")
    for nid, spec in nodes.items():
        lat, lon = local_to_latlon(spec[0], spec[1], origin)
        el = ET.SubElement(root, "node", id=str(nid), lat=repr(float(lat)), lon=repr(float(lon)))
        for k, v in (spec[2] if len(spec) > 2 else {}).items():
            ET.SubElement(el, "tag", k=k, v=v)
    for wid, refs, tags in ways:
        el = ET.SubElement(root, "way", id=str(wid))
        for r in refs:
            ET.SubElement(el, "nd", ref=str(r))
        for k, v in tags.items():
            ET.SubElement(el, "tag", k=k, v=v)
    return ET.tostring(root, encoding="unicode")


def build_fixture(name: str, origin: GeoOrigin, nodes: dict, ways: list, routes: dict) -> dict:
    """Fixture document from local-meter nodes (see :func:`build_osm`)."""
    out_nodes = []
    for nid, spec in nodes.items():
        lat, lon = local_to_latlon(spec[0], spec[1], origin)
        out_nodes.append({"id": str(nid), "lat": float(lat), "lon": float(lon), "tags": dict(spec[2]) if len(spec) > 2 else {}})
    return {
        "format": FIXTURE_FORMAT,
        "version": FIXTURE_VERSION,
        "name": name,
        "origin": {"latitude": origin.latitude, "longitude": origin.longitude},
        "nodes": out_nodes,
        "ways": [{"id": str(w), "nodes": [str(r) for r in refs], "tags": dict(tags)} for w, refs, tags in ways],
        "routes": {k: {"start": [float(v[0][0]), float(v[0][1])], "goal": [float(v[1][0]), float(v[1][1])]} for k, v in routes.items()},
    }


def haversine(lat1, lon1, lat2, lon2, radius: float = 6371008.8) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * radius * math.asin(math.sqrt(a))
