"""From OpenStreetMap XML to a routable lane graph.

Builds a small crossroads in local metres, writes it as OSM XML, parses it
back, then loads one of the bundled city maps and plans a route on it.

    python3 demos/01_road_network.py
"""

from arenasim.maps import build_osm, load_map
from arenasim.roadnet import GeoOrigin, parse_osm, plan_route, query_local_layout, validate_graph

origin = GeoOrigin(42.3510, -71.0440)  # Boston Seaport

# A four-arm crossroads: two residential streets crossing at the origin.
nodes = {"c": (0.0, 0.0), "w": (-150.0, 0.0), "e": (150.0, 0.0), "s": (0.0, -150.0), "n": (0.0, 150.0)}
ways = [
    ("1", ["w", "c", "e"], {"highway": "residential", "name": "East-West St"}),
    ("2", ["s", "c", "n"], {"highway": "secondary", "lanes": "4", "maxspeed": "30 mph"}),
]
xml = build_osm(nodes, ways, origin)
graph = parse_osm(xml, origin)
connectors = sum(lane.is_connector for lane in graph.lanes.values())
print(f"crossroads: {len(graph.lanes)} lanes, {connectors} of them junction connectors")
print(f"invariant violations: {validate_graph(graph) or 'none'}")

# Routing: entering from the west arm and leaving north is a left turn.
route = plan_route(graph, (-140.0, -1.75), (1.75, 140.0))
print(f"west -> north: {len(route.lane_sequence)} lanes, {route.total_length:.1f} m")

# The bundled maps carry named routes.
bundle = load_map("singapore-onenorth")
spec = bundle.routes["sing_route_1"]
route = plan_route(bundle.graph, spec.start, spec.goal)
print(f"\nsingapore-onenorth: {len(bundle.graph.lanes)} lanes; sing_route_1 is {route.total_length:.0f} m long")

# The layout around a pose is what the renderer gets conditioned on.
x, y = route.reference_path[0]
local = query_local_layout(bundle.graph, (float(x), float(y), 0.0), radius=50.0)
print(f"  within 50 m of the start: {len(local.lanes)} lane centrelines, {len(local.dividers)} dividers, "
      f"{len(local.crossings)} crossings, {len(local.drivable)} drivable polygons")
