"""Lane-level road graphs built from OpenStreetMap data.

The conversion rules are deliberately simple and fully documented here:

* Coordinates are projected to a local east/north frame about a
  :class:`GeoOrigin` with an equirectangular tangent-plane approximation.
* Every way tagged with a drivable ``highway`` value becomes a road. Ways are
  split at nodes they share with other roads; the split points are junctions.
* Lane counts and speeds come from :data:`TAG_DEFAULTS` unless the way carries
  ``lanes``, ``lanes:forward``, ``lanes:backward``, ``oneway``, ``maxspeed``
  or ``width`` tags.
* Traffic keeps right. Lane 0 of each direction is the innermost lane.
* Lanes are pulled back from junction nodes (:data:`JUNCTION_SETBACK`) and
  reconnected with cubic Hermite connector lanes.
* The drivable area is the union of every lane buffered by half its width,
  plus the convex hull of the lane ends at each junction.
"""

from __future__ import annotations

import math
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from heapq import heappop, heappush

import numpy as np
import shapely
from shapely.geometry import LineString, MultiPoint, Polygon, box
from shapely.ops import unary_union

from . import geometry as geo
from .errors import EmptyMapError, MapParseError, SnapError, TopologyError, UnreachableError, ValidationError

EARTH_RADIUS = 6371008.8

MAP_CATEGORIES = ("lane_boundary", "lane_divider", "ped_crossing", "drivable_area")

DEFAULT_LANE_WIDTH = 3.5

# highway value -> (lanes per direction, speed limit m/s)
TAG_DEFAULTS: dict[str, tuple[int, float]] = {
    "motorway": (2, 27.8),
    "trunk": (2, 22.2),
    "primary": (1, 16.7),
    "secondary": (1, 13.9),
    "tertiary": (1, 13.9),
    "unclassified": (1, 13.9),
    "residential": (1, 13.9),
    "living_street": (1, 5.6),
    "service": (1, 8.3),
    "motorway_link": (1, 16.7),
    "trunk_link": (1, 13.9),
    "primary_link": (1, 11.1),
    "secondary_link": (1, 11.1),
    "tertiary_link": (1, 11.1),
}

# node degree -> distance lanes are pulled back from the junction node (m)
JUNCTION_SETBACK = {2: 3.0, 3: 10.0}
TURN_SPEED_LIMIT = 8.3
STRAIGHT_ANGLE = math.radians(35.0)
UTURN_ANGLE = math.radians(150.0)
SNAP_RADIUS = 10.0
CROSSING_DEPTH = 4.0


@dataclass(frozen=True)
class GeoOrigin:
    latitude: float
    longitude: float

    def __post_init__(self):
        if not (-90.0 <= self.latitude <= 90.0) or not (-180.0 <= self.longitude <= 180.0):
            raise ValidationError(f"origin out of range: {self.latitude}, {self.longitude}")


def latlon_to_local(lat, lon, origin: GeoOrigin):
    """Project WGS84 degrees to local (east, north) meters about ``origin``."""
    lat0 = math.radians(origin.latitude)
    east = EARTH_RADIUS * np.radians(np.asarray(lon, dtype=float) - origin.longitude) * math.cos(lat0)
    north = EARTH_RADIUS * np.radians(np.asarray(lat, dtype=float) - origin.latitude)
    return east, north


def local_to_latlon(east, north, origin: GeoOrigin):
    lat0 = math.radians(origin.latitude)
    lat = origin.latitude + np.degrees(np.asarray(north, dtype=float) / EARTH_RADIUS)
    lon = origin.longitude + np.degrees(np.asarray(east, dtype=float) / (EARTH_RADIUS * math.cos(lat0)))
    return lat, lon


@dataclass
class Lane:
    id: str
    centerline: np.ndarray
    width: float = DEFAULT_LANE_WIDTH
    successors: list[str] = field(default_factory=list)
    predecessors: list[str] = field(default_factory=list)
    left_neighbor: str | None = None
    right_neighbor: str | None = None
    speed_limit: float = 13.9
    road_id: str = ""
    is_connector: bool = False

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=float)
        self.s = geo.arclength(self.centerline)
        self.bbox = np.concatenate([self.centerline.min(axis=0), self.centerline.max(axis=0)])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def point(self, station: float) -> np.ndarray:
        return geo.point_at(self.centerline, self.s, station)

    def heading(self, station: float) -> float:
        return geo.heading_at(self.centerline, self.s, station)

    def pose(self, station: float) -> tuple[float, float, float]:
        p = self.point(station)
        return (float(p[0]), float(p[1]), self.heading(station))

    def project(self, q) -> tuple[float, float, float]:
        return geo.project(self.centerline, self.s, q)


@dataclass
class Junction:
    id: str
    center: tuple[float, float]
    incoming: list[str]
    outgoing: list[str]
    connectors: list[str]


@dataclass
class Divider:
    category: str
    points: np.ndarray


@dataclass
class RoadGraph:
    lanes: dict[str, Lane]
    junctions: list[Junction]
    drivable_area: list[Polygon]
    dividers: list[Divider]
    crossings: list[np.ndarray]
    origin: GeoOrigin
    name: str = ""

    def __post_init__(self):
        self.drivable_union = unary_union(self.drivable_area) if self.drivable_area else Polygon()
        shapely.prepare(self.drivable_union)
        ids = sorted(self.lanes)
        self._lane_ids = ids
        self._bboxes = np.array([self.lanes[i].bbox for i in ids]).reshape(-1, 4)
        self.junction_of_connector = {c: j.id for j in self.junctions for c in j.connectors}
        self.junction_by_id = {j.id: j for j in self.junctions}

    def lanes_near(self, q, radius: float) -> list[str]:
        """Ids of lanes whose bounding box lies within ``radius`` of ``q``."""
        if not self._lane_ids:
            return []
        x, y = q[0], q[1]
        b = self._bboxes
        mask = (b[:, 0] - radius <= x) & (x <= b[:, 2] + radius) & (b[:, 1] - radius <= y) & (y <= b[:, 3] + radius)
        return [self._lane_ids[i] for i in np.flatnonzero(mask)]

    def nearest_lane(self, q, radius: float = SNAP_RADIUS, heading: float | None = None):
        """Closest lane to ``q`` within ``radius``.

        Returns ``(lane_id, station, lateral, distance)`` or ``None``. Road lanes
        win over connectors at equal distance; when ``heading`` is given, lanes
        pointing more than 90 degrees away are skipped.
        """
        best = None
        for lid in self.lanes_near(q, radius):
            lane = self.lanes[lid]
            st, lat, dist = lane.project(q)
            if dist > radius:
                continue
            if heading is not None and abs(geo.wrap_angle(lane.heading(st) - heading)) > math.pi / 2:
                continue
            key = (round(dist, 9), lane.is_connector, lid)
            if best is None or key < best[0]:
                best = (key, (lid, st, lat, dist))
        return None if best is None else best[1]

    def on_drivable(self, x, y) -> np.ndarray:
        return shapely.intersects_xy(self.drivable_union, x, y)


@dataclass
class Route:
    lane_sequence: list[str]
    reference_path: np.ndarray
    cost: float = 0.0

    def __post_init__(self):
        self.reference_path = np.asarray(self.reference_path, dtype=float)
        self.s = geo.arclength(self.reference_path)

    @property
    def total_length(self) -> float:
        return float(self.s[-1])

    def point(self, station: float) -> np.ndarray:
        return geo.point_at(self.reference_path, self.s, station)

    def heading(self, station: float) -> float:
        return geo.heading_at(self.reference_path, self.s, station)

    def project(self, q, around: float | None = None, behind: float = 5.0, ahead: float = 25.0):
        """Project ``q`` on the path, optionally within a station window."""
        if around is None or self.total_length == 0.0:
            return geo.project(self.reference_path, self.s, q)
        lo = max(0.0, around - behind)
        hi = min(self.total_length, around + ahead)
        i0 = max(0, int(np.searchsorted(self.s, lo, side="right")) - 1)
        i1 = min(len(self.s), int(np.searchsorted(self.s, hi, side="left")) + 1)
        if i1 - i0 < 2:
            i0, i1 = max(0, i1 - 2), max(2, i1)
        st, lat, dist = geo.project(self.reference_path[i0:i1], self.s[i0:i1], q)
        return st, lat, dist


# ---------------------------------------------------------------------------
# OSM ingestion


def _parse_speed(value: str | None) -> float | None:
    if not value:
        return None
    m = re.match(r"\s*([0-9.]+)\s*(mph|km/h|kmh)?", value)
    if not m:
        return None
    v = float(m.group(1))
    return v * 0.44704 if m.group(2) == "mph" else v / 3.6


def _parse_int(value: str | None) -> int | None:
    try:
        return int(value) if value is not None else None
    except ValueError:
        return None


def way_lane_spec(tags: dict[str, str]) -> tuple[int, int, float, float]:
    """Derive ``(forward lanes, backward lanes, lane width, speed)`` from tags."""
    per_dir, speed = TAG_DEFAULTS.get(tags.get("highway", ""), (1, 13.9))
    oneway = tags.get("oneway", "no")
    if tags.get("junction") == "roundabout" and oneway == "no":
        oneway = "yes"
    is_oneway = oneway in ("yes", "true", "1", "-1")
    total = _parse_int(tags.get("lanes"))
    fwd = _parse_int(tags.get("lanes:forward"))
    bwd = _parse_int(tags.get("lanes:backward"))
    if is_oneway:
        nf, nb = (total or fwd or per_dir), 0
    elif fwd is not None or bwd is not None:
        nf = fwd if fwd is not None else max(1, (total or 2 * per_dir) - (bwd or 0))
        nb = bwd if bwd is not None else max(1, (total or 2 * per_dir) - nf)
    elif total is not None:
        nf, nb = max(1, (total + 1) // 2), max(1, total // 2)
    else:
        nf = nb = per_dir
    nf, nb = max(nf, 0), max(nb, 0)
    width = DEFAULT_LANE_WIDTH
    road_width = _parse_speed_free_float(tags.get("width"))
    if road_width and nf + nb:
        width = road_width / (nf + nb)
    speed = _parse_speed(tags.get("maxspeed")) or speed
    if oneway == "-1":
        nf, nb = 0, nf
    return nf, nb, width, speed


def _parse_speed_free_float(value: str | None) -> float | None:
    if not value:
        return None
    m = re.match(r"\s*([0-9.]+)", value)
    return float(m.group(1)) if m else None


def _read_osm(osm_xml: str | bytes):
    if not osm_xml.strip():
        raise EmptyMapError("map file is empty")
    try:
        root = ET.fromstring(osm_xml)
    except ET.ParseError as exc:
        raise MapParseError(f"malformed OSM XML: {exc}", line=exc.position[0]) from exc
    if root.tag != "osm":
        raise MapParseError(f"root element is <{root.tag}>, expected <osm>")
    nodes: dict[str, tuple[float, float, dict]] = {}
    ways: list[tuple[str, list[str], dict]] = []
    for el in root:
        if el.tag == "node":
            tags = {t.get("k"): t.get("v") for t in el.findall("tag")}
            try:
                nodes[el.get("id")] = (float(el.get("lat")), float(el.get("lon")), tags)
            except (TypeError, ValueError) as exc:
                raise MapParseError(f"node {el.get('id')} has invalid coordinates") from exc
        elif el.tag == "way":
            refs = [nd.get("ref") for nd in el.findall("nd")]
            tags = {t.get("k"): t.get("v") for t in el.findall("tag")}
            ways.append((el.get("id"), refs, tags))
    bounds = root.find("bounds")
    return nodes, ways, bounds


def osm_origin(osm_xml: str | bytes) -> GeoOrigin:
    """Origin at the centre of ``<bounds>``, or the node centroid."""
    nodes, _, bounds = _read_osm(osm_xml)
    if bounds is not None:
        lat = (float(bounds.get("minlat")) + float(bounds.get("maxlat"))) / 2
        lon = (float(bounds.get("minlon")) + float(bounds.get("maxlon"))) / 2
        return GeoOrigin(lat, lon)
    if not nodes:
        raise EmptyMapError("map has no nodes")
    arr = np.array([(v[0], v[1]) for v in nodes.values()])
    return GeoOrigin(float(arr[:, 0].mean()), float(arr[:, 1].mean()))


def parse_osm(osm_xml: str | bytes, origin: GeoOrigin, name: str = "") -> RoadGraph:
    """Build a :class:`RoadGraph` from OSM XML v0.6 text."""
    nodes, ways, _ = _read_osm(osm_xml)
    return graph_from_elements(nodes, ways, origin, name)


def graph_from_elements(nodes: dict, ways: list, origin: GeoOrigin, name: str = "") -> RoadGraph:
    """Build a graph from already-read OSM elements.

    ``nodes`` maps id -> (lat, lon, tags); ``ways`` is a list of
    (id, node refs, tags).
    """
    roads = [(wid, refs, tags) for wid, refs, tags in ways if tags.get("highway") in TAG_DEFAULTS]
    if not roads:
        raise EmptyMapError("map contains no road ways")
    dangling = sorted({f"way {wid} -> node {r}" for wid, refs, _ in roads for r in refs if r not in nodes})
    if dangling:
        raise TopologyError("unresolved node references: " + ", ".join(dangling), ids=dangling)
    return _build_graph(nodes, roads, origin, name)


def _build_graph(nodes, roads, origin: GeoOrigin, name: str) -> RoadGraph:
    xy = {}
    for nid, (lat, lon, _) in nodes.items():
        e, n = latlon_to_local(lat, lon, origin)
        xy[nid] = (float(e), float(n))

    usage: dict[str, int] = {}
    for _, refs, _ in roads:
        for r in set(refs):
            usage[r] = usage.get(r, 0) + 1
        for r in (refs[0], refs[-1]):
            usage[r] = usage.get(r, 0) + 1

    # split ways into segments between shared nodes
    segments = []
    for wid, refs, tags in roads:
        refs = [r for i, r in enumerate(refs) if i == 0 or r != refs[i - 1]]
        if len(refs) < 2:
            continue
        start = 0
        k = 0
        for i in range(1, len(refs)):
            if i == len(refs) - 1 or usage[refs[i]] >= 2:
                segments.append((f"{wid}:{k}", refs[start : i + 1], tags))
                start = i
                k += 1

    degree: dict[str, int] = {}
    for _, refs, _ in segments:
        for r in (refs[0], refs[-1]):
            degree[r] = degree.get(r, 0) + 1

    lanes: dict[str, Lane] = {}
    dividers: list[Divider] = []
    crossings: list[np.ndarray] = []
    ends: dict[str, list] = {}
    starts: dict[str, list] = {}

    for seg_id, refs, tags in segments:
        nf, nb, width, speed = way_lane_spec(tags)
        pts = geo.dedupe(np.array([xy[r] for r in refs]))
        if len(pts) < 2:
            continue
        dense = geo.resample(pts, geo.SAMPLING_STEP / 2)
        s = geo.arclength(dense)
        length = s[-1]
        a_node, b_node = refs[0], refs[-1]
        sb_a = _setback(degree[a_node], length)
        sb_b = _setback(degree[b_node], length)
        if length - sb_a - sb_b < 1.0:
            continue
        core = geo.resample(geo.slice_polyline(dense, s, sb_a, length - sb_b))
        core_s = geo.arclength(core)

        groups = []
        if nb == 0:
            offsets = [((nf - 1) / 2.0 - i) * width for i in range(nf)]
            groups.append(("f", offsets, False))
            bounds = [(nf / 2.0) * width, -(nf / 2.0) * width]
            divs = [((nf - 1) / 2.0 - i - 0.5) * width for i in range(nf - 1)]
        elif nf == 0:
            offsets = [-((nb - 1) / 2.0 - i) * width for i in range(nb)]
            groups.append(("b", offsets, True))
            bounds = [(nb / 2.0) * width, -(nb / 2.0) * width]
            divs = [-((nb - 1) / 2.0 - i - 0.5) * width for i in range(nb - 1)]
        else:
            groups.append(("f", [-(i + 0.5) * width for i in range(nf)], False))
            groups.append(("b", [(i + 0.5) * width for i in range(nb)], True))
            bounds = [nb * width, -nf * width]
            divs = [0.0] + [-(i + 1) * width for i in range(nf - 1)] + [(i + 1) * width for i in range(nb - 1)]

        for tag, offsets, reverse in groups:
            ids = [f"{seg_id}:{tag}{i}" for i in range(len(offsets))]
            for i, off in enumerate(offsets):
                line = geo.offset_polyline(core, off) if off else core.copy()
                if reverse:
                    line = line[::-1].copy()
                lanes[ids[i]] = Lane(
                    id=ids[i],
                    centerline=geo.resample(line),
                    width=width,
                    speed_limit=speed,
                    road_id=seg_id,
                    left_neighbor=ids[i - 1] if i > 0 else None,
                    right_neighbor=ids[i + 1] if i + 1 < len(ids) else None,
                )
            head_node, tail_node = (b_node, a_node) if reverse else (a_node, b_node)
            starts.setdefault(head_node, []).append((seg_id, tag, ids))
            ends.setdefault(tail_node, []).append((seg_id, tag, ids))

        for off in bounds:
            dividers.append(Divider("lane_boundary", geo.offset_polyline(core, off)))
        for off in divs:
            dividers.append(Divider("lane_divider", geo.offset_polyline(core, off) if off else core.copy()))

        road_width = (nf + nb) * width
        for r in refs[1:-1]:
            if nodes[r][2].get("highway") == "crossing" or "crossing" in nodes[r][2]:
                st, _, _ = geo.project(core, core_s, xy[r])
                if 0.0 < st < core_s[-1]:
                    crossings.append(_crossing_polygon(core, core_s, st, road_width))

    junctions = _build_junctions(lanes, starts, ends, degree, xy)

    for lane in lanes.values():
        lane.successors.sort()
        lane.predecessors.sort()

    drivable = [
        LineString(lane.centerline).buffer(lane.width / 2.0, cap_style="round", join_style="round")
        for lane in lanes.values()
    ]
    for j in junctions:
        corners = []
        for lid in j.incoming + j.outgoing:
            lane = lanes[lid]
            st = lane.length if lid in j.incoming else 0.0
            x, y, h = lane.pose(st)
            n = np.array([-math.sin(h), math.cos(h)]) * lane.width / 2.0
            corners += [(x + n[0], y + n[1]), (x - n[0], y - n[1])]
        if len(corners) >= 3:
            hull = MultiPoint(corners).convex_hull
            if hull.area > 0:
                drivable.append(hull)
    union = unary_union(drivable)
    polys = list(union.geoms) if union.geom_type == "MultiPolygon" else [union]
    polys = [p for p in polys if not p.is_empty]

    return RoadGraph(
        lanes=dict(sorted(lanes.items())),
        junctions=junctions,
        drivable_area=polys,
        dividers=dividers,
        crossings=crossings,
        origin=origin,
        name=name,
    )


def _setback(deg: int, length: float) -> float:
    if deg <= 1:
        return 0.0
    return min(JUNCTION_SETBACK[2] if deg == 2 else JUNCTION_SETBACK[3], 0.4 * length)


def _crossing_polygon(core, core_s, station, road_width):
    p = geo.point_at(core, core_s, station)
    h = geo.heading_at(core, core_s, station)
    return geo.box_corners(p[0], p[1], h, CROSSING_DEPTH, road_width + 1.0)


def _build_junctions(lanes, starts, ends, degree, xy) -> list[Junction]:
    junctions = []
    for node in sorted(set(starts) | set(ends), key=str):
        deg = degree.get(node, 0)
        if deg < 2:
            continue
        incoming = ends.get(node, [])
        outgoing = starts.get(node, [])
        connectors = []
        for in_seg, in_tag, in_ids in incoming:
            for out_seg, out_tag, out_ids in outgoing:
                if in_seg == out_seg and in_tag != out_tag:
                    continue
                h_in = lanes[in_ids[0]].heading(lanes[in_ids[0]].length)
                h_out = lanes[out_ids[0]].heading(0.0)
                angle = float(geo.wrap_angle(h_out - h_in))
                if abs(angle) > UTURN_ANGLE:
                    continue
                n, m = len(in_ids), len(out_ids)
                if deg == 2 or abs(angle) <= STRAIGHT_ANGLE:
                    pairs = [(i, min(i, m - 1)) for i in range(n)] + [(n - 1, k) for k in range(n, m)]
                    turn = False
                elif angle > 0:
                    pairs, turn = [(0, 0)], True
                else:
                    pairs, turn = [(n - 1, m - 1)], True
                for i, k in pairs:
                    a, b = lanes[in_ids[i]], lanes[out_ids[k]]
                    p0, p1 = a.centerline[-1], b.centerline[0]
                    cid = f"J{node}:{a.id}>{b.id}"
                    if float(np.hypot(*(p1 - p0))) < 1e-6:
                        line = np.vstack([p0, p0 + 0.1 * np.array([math.cos(h_in), math.sin(h_in)])])
                    else:
                        line = geo.hermite(p0, a.heading(a.length), p1, b.heading(0.0))
                    speed = min(a.speed_limit, b.speed_limit)
                    if turn:
                        speed = min(speed, TURN_SPEED_LIMIT)
                    lanes[cid] = Lane(
                        id=cid,
                        centerline=line,
                        width=min(a.width, b.width),
                        successors=[b.id],
                        predecessors=[a.id],
                        speed_limit=speed,
                        road_id=f"J{node}",
                        is_connector=True,
                    )
                    a.successors.append(cid)
                    b.predecessors.append(cid)
                    connectors.append(cid)
        junctions.append(
            Junction(
                id=f"J{node}",
                center=xy[node],
                incoming=sorted(i for _, _, ids in incoming for i in ids),
                outgoing=sorted(i for _, _, ids in outgoing for i in ids),
                connectors=sorted(connectors),
            )
        )
    return junctions


# ---------------------------------------------------------------------------
# Invariants


def validate_graph(graph: RoadGraph, tolerance: float = 0.1) -> list[str]:
    """Return a list of human-readable invariant violations (empty if valid)."""
    problems = []
    for lid, lane in graph.lanes.items():
        if len(lane.centerline) < 2:
            problems.append(f"lane {lid}: fewer than 2 centerline points")
        elif np.any(np.hypot(*np.diff(lane.centerline, axis=0).T) <= 0):
            problems.append(f"lane {lid}: repeated centerline point")
        if lane.width <= 0:
            problems.append(f"lane {lid}: non-positive width")
        refs = lane.successors + lane.predecessors + [n for n in (lane.left_neighbor, lane.right_neighbor) if n]
        for r in refs:
            if r not in graph.lanes:
                problems.append(f"lane {lid}: unresolved reference {r}")
        for succ in lane.successors:
            if succ in graph.lanes:
                gap = float(np.hypot(*(graph.lanes[succ].centerline[0] - lane.centerline[-1])))
                if gap > 0.5:
                    problems.append(f"lane {lid}: successor {succ} starts {gap:.3f} m away")
        if graph.drivable_area:
            d = shapely.distance(graph.drivable_union, shapely.points(lane.centerline))
            if np.max(d) > tolerance:
                problems.append(f"lane {lid}: centerline leaves drivable area by {np.max(d):.3f} m")
    for div in graph.dividers:
        if div.category not in MAP_CATEGORIES:
            problems.append(f"divider with unknown category {div.category}")
    return problems


# ---------------------------------------------------------------------------
# Routing

LANE_CHANGE_BLEND = 15.0


def _lane_edges(graph: RoadGraph, lid: str):
    lane = graph.lanes[lid]
    for succ in lane.successors:
        yield succ, "succ"
    for nb in (lane.left_neighbor, lane.right_neighbor):
        if nb:
            yield nb, "side"


def plan_route(graph: RoadGraph, start, goal) -> Route:
    """Shortest route between two points near lane centerlines.

    Cost is station distance travelled along lane centerlines. Moving to a
    neighbouring lane keeps the station and costs nothing; the reference path
    blends across over :data:`LANE_CHANGE_BLEND` meters.
    """
    s_snap = graph.nearest_lane(start)
    g_snap = graph.nearest_lane(goal)
    if s_snap is None:
        raise SnapError(f"start {tuple(start)} is more than {SNAP_RADIUS} m from every lane")
    if g_snap is None:
        raise SnapError(f"goal {tuple(goal)} is more than {SNAP_RADIUS} m from every lane")
    s_lane, s_st = s_snap[0], s_snap[1]
    g_lane, g_st = g_snap[0], g_snap[1]

    # label-setting search over (lane, entry station)
    best_cost = math.inf
    best_path = None
    heap = [(0.0, 0, s_lane, s_st, ((s_lane, s_st, "start"),))]
    settled: set[tuple[str, float]] = set()
    counter = 1
    while heap:
        cost, _, lid, entry, path = heappop(heap)
        if cost >= best_cost:
            break
        key = (lid, round(entry, 6))
        if key in settled:
            continue
        settled.add(key)
        lane = graph.lanes[lid]
        if lid == g_lane and g_st >= entry - 1e-9:
            total = cost + max(0.0, g_st - entry)
            if total < best_cost:
                best_cost, best_path = total, path
        for nxt, kind in _lane_edges(graph, lid):
            if kind == "succ":
                new_cost, new_entry = cost + (lane.length - entry), 0.0
            else:
                new_entry = graph.lanes[nxt].project(lane.point(entry))[0]
                new_cost = cost
            if (nxt, round(new_entry, 6)) in settled:
                continue
            heappush(heap, (new_cost, counter, nxt, new_entry, path + ((nxt, new_entry, kind),)))
            counter += 1
    if best_path is None:
        raise UnreachableError(f"no lane sequence from {s_lane} to {g_lane}")
    return _route_from_path(graph, best_path, g_st, best_cost)


def _route_from_path(graph: RoadGraph, path, goal_station: float, cost: float) -> Route:
    pieces = []
    for idx, (lid, entry, kind) in enumerate(path):
        lane = graph.lanes[lid]
        if idx == len(path) - 1:
            exit_st = goal_station
        elif path[idx + 1][2] == "side":
            exit_st = entry
        else:
            exit_st = lane.length
        exit_st = max(entry, exit_st)
        if kind == "side":
            entry = min(entry + LANE_CHANGE_BLEND, exit_st)
        pieces.append(geo.slice_polyline(lane.centerline, lane.s, entry, exit_st))
    pts = geo.dedupe(np.vstack(pieces), eps=1e-6)
    if len(pts) < 2:
        pts = np.vstack([pts[:1], pts[:1]])
    return Route(lane_sequence=_collapse([p[0] for p in path]), reference_path=pts, cost=cost)


def _collapse(seq):
    out = []
    for lid in seq:
        if not out or out[-1] != lid:
            out.append(lid)
    return out


# ---------------------------------------------------------------------------
# Local layout queries


@dataclass
class LayoutSlice:
    """Map geometry around a pose, in that pose's frame (x forward, y left)."""

    lanes: list[tuple[str, np.ndarray]] = field(default_factory=list)
    dividers: list[tuple[str, np.ndarray]] = field(default_factory=list)
    crossings: list[np.ndarray] = field(default_factory=list)
    drivable: list[list[np.ndarray]] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not (self.lanes or self.dividers or self.crossings or self.drivable)


def _lines(geom) -> list[np.ndarray]:
    if geom.is_empty:
        return []
    if geom.geom_type == "LineString":
        return [np.asarray(geom.coords)]
    if hasattr(geom, "geoms"):
        out = []
        for g in geom.geoms:
            out.extend(_lines(g))
        return out
    return []


def _polys(geom) -> list[Polygon]:
    if geom.is_empty:
        return []
    if geom.geom_type == "Polygon":
        return [geom]
    if hasattr(geom, "geoms"):
        out = []
        for g in geom.geoms:
            out.extend(_polys(g))
        return out
    return []


def query_local_layout(graph: RoadGraph, center, radius: float) -> LayoutSlice:
    """Clip map layers to a square of half-size ``radius`` around ``center``."""
    if radius <= 0:
        raise ValidationError("radius must be positive")
    cx, cy, yaw = center
    square = box(-radius, -radius, radius, radius)
    reach = radius * math.sqrt(2.0)
    out = LayoutSlice()

    def local_line(points):
        return LineString(geo.to_local(points, center))

    for lid in graph.lanes_near((cx, cy), reach):
        lane = graph.lanes[lid]
        for piece in _lines(local_line(lane.centerline).intersection(square)):
            out.lanes.append((lid, piece))
    for div in graph.dividers:
        lo, hi = div.points.min(axis=0), div.points.max(axis=0)
        if lo[0] - reach > cx or hi[0] + reach < cx or lo[1] - reach > cy or hi[1] + reach < cy:
            continue
        for piece in _lines(local_line(div.points).intersection(square)):
            out.dividers.append((div.category, piece))
    for poly in graph.crossings:
        if np.min(np.hypot(poly[:, 0] - cx, poly[:, 1] - cy)) > reach + 10:
            continue
        clipped = Polygon(geo.to_local(poly, center)).intersection(square)
        for p in _polys(clipped):
            out.crossings.append(np.asarray(p.exterior.coords)[:-1])
    if graph.drivable_area:
        world_square = Polygon(geo.to_global(np.array([[-radius, -radius], [radius, -radius], [radius, radius], [-radius, radius]]), center))
        clipped = graph.drivable_union.intersection(world_square)
        for p in _polys(clipped):
            rings = [geo.to_local(np.asarray(p.exterior.coords)[:-1], center)]
            rings += [geo.to_local(np.asarray(r.coords)[:-1], center) for r in p.interiors]
            out.drivable.append(rings)
    return out
