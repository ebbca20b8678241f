import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from shapely.affinity import rotate, translate
from shapely.geometry import Polygon, box

from arenasim.errors import ValidationError
from arenasim.layout import (
    BOX_CATEGORIES,
    CAMERA_NAMES,
    N_BOX,
    N_MAP,
    Box3D,
    CameraModel,
    LayoutFrame,
    backproject_ray,
    build_condition_payload,
    default_rig,
    extract_layout,
    fourier_embed,
    make_camera,
    mirror_camera,
    payload_from_document,
    payload_to_document,
    project_points,
    rasterize_bev,
    relative_pose,
    render_canvases,
)
from arenasim.maps import load_map
from arenasim.roadnet import MAP_CATEGORIES, plan_route
from arenasim.traffic import TrafficConfig, spawn_background_traffic
from oracles import pinhole

K_HAND = np.array([[500.0, 0.0, 200.0], [0.0, 500.0, 112.0], [0.0, 0.0, 1.0]])
IDENTITY_CAM = CameraModel("TEST", K_HAND, np.eye(3), np.zeros(3))
DRIVABLE = MAP_CATEGORIES.index("drivable_area")
DIVIDER = MAP_CATEGORIES.index("lane_divider")


def empty_frame():
    return LayoutFrame(0, (0.0, 0.0, 0.0))


# ---------------------------------------------------------------------------
# Projection


def test_optical_axis_hits_principal_point():
    assert project_points(np.array([[0.0, 0.0, 10.0]]), IDENTITY_CAM) == [(200.0, 112.0)]


def test_points_behind_or_at_near_plane_are_culled():
    out = project_points(np.array([[0.0, 0.0, -3.0], [1.0, 1.0, 0.1], [0.0, 0.0, 0.11]]), IDENTITY_CAM)
    assert out[0] is None and out[1] is None and out[2] is not None


def test_hand_computed_pixel():
    (u, v), = project_points(np.array([[1.0, 0.5, 10.0]]), IDENTITY_CAM)
    assert (u, v) == pytest.approx((250.0, 137.0), abs=1e-12)


rig_cams = st.sampled_from(default_rig())
ego_point = st.tuples(st.floats(-60, 60), st.floats(-60, 60), st.floats(-3, 6))


@settings(max_examples=300)
@given(rig_cams, ego_point)
def test_projection_agrees_with_plain_pinhole(cam, p):
    got = project_points(np.array([p]), cam)[0]
    ref = pinhole(cam.K, cam.R, cam.T, p)
    if ref is None:
        assert got is None
    else:
        assert got == pytest.approx(ref, rel=1e-12, abs=1e-9)


@settings(max_examples=300)
@given(rig_cams, ego_point)
def test_backcast_ray_passes_through_source(cam, p):
    px = project_points(np.array([p]), cam)[0]
    assume(px is not None)
    origin, d = backproject_ray(px, cam)
    v = np.asarray(p) - origin
    assert np.linalg.norm(v - (v @ d) * d) <= 1e-6


def test_rig_is_six_named_cameras_of_standard_size():
    rig = default_rig()
    assert [c.name for c in rig] == list(CAMERA_NAMES)
    assert all(c.image_size == (400, 224) for c in rig)
    front = rig[0]
    u, v = project_points(np.array([[30.0, 0.0, 1.5]]), front)[0]
    assert u == pytest.approx(200.0) and v == pytest.approx(112.0)


def test_camera_model_validation():
    with pytest.raises(ValidationError):
        CameraModel("bad", K_HAND, np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValidationError):
        CameraModel("bad", np.eye(3) * -1, np.eye(3), np.zeros(3))


# ---------------------------------------------------------------------------
# Canvases


def test_empty_frame_gives_zero_canvases():
    out = render_canvases(empty_frame(), default_rig())
    assert set(out) == set(CAMERA_NAMES)
    for c in out.values():
        assert c.shape == (224, 400, N_MAP + N_BOX) and c.dtype == np.uint8 and not c.any()


def test_empty_rig_rejected():
    with pytest.raises(ValidationError):
        render_canvases(empty_frame(), [])


def test_box_behind_camera_leaves_box_channels_empty():
    front = make_camera("FRONT", 0.0, (1.7, 0.0, 1.5))
    frame = LayoutFrame(0, (0.0, 0.0, 0.0), boxes=[Box3D("car", (-10.0, 0.0, 0.75), (4.6, 1.8, 1.5), 0.0)])
    assert not render_canvases(frame, [front])["FRONT"][:, :, N_MAP:].any()


def test_box_ahead_fills_car_channel_only():
    front = make_camera("FRONT", 0.0, (1.7, 0.0, 1.5))
    frame = LayoutFrame(0, (0.0, 0.0, 0.0), boxes=[Box3D("car", (15.0, 0.0, 0.75), (4.6, 1.8, 1.5), 0.0)])
    c = render_canvases(frame, [front])["FRONT"]
    car = N_MAP + BOX_CATEGORIES.index("car")
    assert c[:, :, car].sum() > 100
    assert not np.delete(c, car, axis=2).any()
    # the box centre projects inside the filled outline
    u, v = project_points(np.array([[15.0, 0.0, 0.75]]), front)[0]
    assert c[int(v), int(u), car] == 1


def test_divider_pixel_count_matches_line_raster():
    front = make_camera("FRONT", 0.0, (1.7, 0.0, 1.5))
    seg = np.array([[8.0, 2.3], [18.0, 2.3]])
    frame = LayoutFrame(0, (0.0, 0.0, 0.0))
    frame.map_layers["lane_divider"] = [seg]
    c = render_canvases(frame, [front])["FRONT"]
    (u0, v0), (u1, v1) = project_points(np.column_stack([seg, np.zeros(2)]), front)
    assert 0 <= min(u0, u1) and max(u0, u1) < 400 and 0 <= min(v0, v1) and max(v0, v1) < 224
    expected = max(abs(math.floor(u1) - math.floor(u0)), abs(math.floor(v1) - math.floor(v0))) + 1
    assert abs(int(c[:, :, DIVIDER].sum()) - expected) <= 2
    assert c[:, :, DIVIDER].sum() == c.sum()


def test_canvases_are_pure(street_frame):
    rig = default_rig()
    a = render_canvases(street_frame, rig)
    b = render_canvases(street_frame, rig)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(a[k][:, :, :N_MAP].any() for k in a)


def test_mirrored_frame_gives_mirrored_canvases(street_frame):
    rig = default_rig()
    base = render_canvases(street_frame, rig)
    mirrored = render_canvases(street_frame.mirrored(), [mirror_camera(c) for c in rig])
    for cam in rig:
        twin = mirror_camera(cam).name
        assert np.array_equal(mirrored[twin], base[cam.name][:, ::-1, :]), cam.name


def test_mirror_camera_swaps_sides():
    rig = {c.name: c for c in default_rig()}
    m = mirror_camera(rig["FRONT_LEFT"])
    assert m.name == "FRONT_RIGHT"
    assert np.allclose(m.R, rig["FRONT_RIGHT"].R) and np.allclose(m.T, rig["FRONT_RIGHT"].T)


# ---------------------------------------------------------------------------
# BEV grid


def test_bev_empty_and_full_cover():
    assert not rasterize_bev(empty_frame()).any()
    frame = empty_frame()
    frame.map_layers["drivable_area"] = [[np.array([[-60.0, -60.0], [60.0, -60.0], [60.0, 60.0], [-60.0, 60.0]])]]
    grid = rasterize_bev(frame)
    assert grid.shape == (N_MAP, 400, 400)
    assert grid[DRIVABLE].all()
    assert not np.delete(grid, DRIVABLE, axis=0).any()


def test_bev_orientation_forward_is_up_left_is_left():
    frame = empty_frame()
    frame.map_layers["drivable_area"] = [[np.array([[10.0, 10.0], [20.0, 10.0], [20.0, 20.0], [10.0, 20.0]])]]
    g = rasterize_bev(frame, 50.0, 1.0)[DRIVABLE]
    rows, cols = np.nonzero(g)
    assert rows.max() < 50 and cols.max() < 50  # front-left quadrant is the top-left


@settings(max_examples=60, deadline=None)
@given(st.floats(0, math.pi), st.floats(-20, 20))
def test_bev_strip_area(angle, offset):
    """A 3.5 m strip at any angle rasterizes to its clipped area within 2 %."""
    strip = translate(rotate(box(-200.0, -1.75, 200.0, 1.75), angle, origin=(0, 0), use_radians=True), 0.0, offset)
    frame = empty_frame()
    frame.map_layers["drivable_area"] = [[np.asarray(strip.exterior.coords)[:-1]]]
    grid = rasterize_bev(frame, 50.0, 0.5)
    area = strip.intersection(box(-50, -50, 50, 50)).area
    assume(area > 50.0)
    assert abs(grid[DRIVABLE].sum() * 0.25 - area) <= 0.02 * area


def test_bev_validation():
    with pytest.raises(ValidationError):
        rasterize_bev(empty_frame(), 0.0, 0.5)
    with pytest.raises(ValidationError):
        rasterize_bev(empty_frame(), 50.0, -1.0)


def test_bev_polygon_hole_is_empty():
    frame = empty_frame()
    outer = np.array([[-20.0, -20.0], [20.0, -20.0], [20.0, 20.0], [-20.0, 20.0]])
    hole = np.array([[-5.0, -5.0], [-5.0, 5.0], [5.0, 5.0], [5.0, -5.0]])
    frame.map_layers["drivable_area"] = [[outer, hole]]
    g = rasterize_bev(frame, 50.0, 0.5)[DRIVABLE]
    expected = Polygon(outer, [hole]).area / 0.25
    assert abs(g.sum() - expected) <= 0.02 * expected
    assert g[100, 100] == 0


# ---------------------------------------------------------------------------
# Embeddings and poses


def test_fourier_at_zero():
    e = fourier_embed([0.0], 6).reshape(6, 2)
    assert np.all(e[:, 0] == 0.0) and np.all(e[:, 1] == 1.0)


def test_fourier_length_and_order():
    assert fourier_embed([0.1, 0.2, 0.3], 4).shape == (24,)
    e = fourier_embed([0.5], 3)
    assert e[:2] == pytest.approx([1.0, 0.0], abs=1e-12)


@given(st.floats(-4, 4), st.integers(0, 7))
def test_fourier_band_periodicity(x, k):
    period = 2.0 / 2**k
    a = fourier_embed([x], 8).reshape(8, 2)[k]
    b = fourier_embed([x + period], 8).reshape(8, 2)[k]
    assert a == pytest.approx(b, abs=1e-9)


def test_fourier_validation():
    with pytest.raises(ValidationError):
        fourier_embed([1.0, math.inf])
    with pytest.raises(ValidationError):
        fourier_embed([1.0], 0)


def test_relative_pose_examples():
    assert relative_pose((1.0, 2.0, 0.3), (1.0, 2.0, 0.3)) == pytest.approx((0.0, 0.0, 0.0), abs=1e-12)
    assert relative_pose((0.0, 0.0, 0.0), (3.0, 4.0, 0.0)) == pytest.approx((3.0, 4.0, 0.0))
    assert relative_pose((0.0, 0.0, math.pi / 2), (0.0, 5.0, math.pi / 2)) == pytest.approx((5.0, 0.0, 0.0), abs=1e-12)


pose = st.tuples(st.floats(-500, 500), st.floats(-500, 500), st.floats(-math.pi, math.pi))


@given(pose, pose)
def test_relative_pose_recomposes(ref, cur):
    dx, dy, dyaw = relative_pose(ref, cur)
    c, s = math.cos(ref[2]), math.sin(ref[2])
    assert ref[0] + c * dx - s * dy == pytest.approx(cur[0], abs=1e-9)
    assert ref[1] + s * dx + c * dy == pytest.approx(cur[1], abs=1e-9)
    assert math.cos(ref[2] + dyaw - cur[2]) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# Condition payload


def test_payload_without_reference():
    frame = LayoutFrame(3, (0.0, 0.0, 0.0), boxes=[Box3D("car", (12.0, 1.0, 0.75), (4.6, 1.8, 1.5), 0.1)])
    p = build_condition_payload(frame, default_rig(), bands=4)
    assert p.reference_frame_id is None and p.rel_embedding is None and p.relative_pose is None
    assert len(p.box_embeddings) == 1 and p.box_embeddings[0].shape == (2 * 4 * 24,)
    assert all(c.cam_embedding.shape == (2 * 4 * 21,) for c in p.cameras)


def test_payload_with_reference_and_stable_dimensions(street_frame):
    p = build_condition_payload(street_frame, default_rig(), reference_frame=(7, (0.0, 0.0, 0.0)), prompt="rainy night")
    q = build_condition_payload(empty_frame(), default_rig())
    assert p.reference_frame_id == 7 and p.rel_embedding.shape == (2 * 16 * 3,)
    assert [c.cam_embedding.shape for c in p.cameras] == [c.cam_embedding.shape for c in q.cameras]
    assert p.bev_grid.shape == q.bev_grid.shape


def test_payload_document_roundtrip(street_frame):
    p = build_condition_payload(street_frame, default_rig(), reference_frame=(2, (1.0, 2.0, 0.1)), prompt="dusk")
    q = payload_from_document(payload_to_document(p))
    for a, b in zip(p.cameras, q.cameras):
        assert np.array_equal(a.layout_canvas, b.layout_canvas)
        assert np.array_equal(a.cam_embedding, b.cam_embedding)
        assert np.array_equal(a.camera.K, b.camera.K) and np.array_equal(a.camera.R, b.camera.R)
    assert np.array_equal(p.bev_grid, q.bev_grid)
    assert all(np.array_equal(x, y) for x, y in zip(p.box_embeddings, q.box_embeddings))
    assert q.text_prompt == "dusk" and q.reference_frame_id == 2
    assert np.array_equal(p.rel_embedding, q.rel_embedding)


def test_extracted_boxes_are_ego_relative():
    bundle = load_map("boston-seaport")
    spec = bundle.routes["boston_route_1"]
    route = plan_route(bundle.graph, spec.start, spec.goal)
    world = spawn_background_traffic(bundle.graph, TrafficConfig(spawn_density=20.0, seed=2), route)
    frame = extract_layout(world, bundle.graph, radius=40.0)
    ego = world.ego
    for b in frame.boxes:
        v = world.vehicles[b.track_id]
        assert math.hypot(b.center[0], b.center[1]) == pytest.approx(math.hypot(v.x - ego.x, v.y - ego.y))
        assert math.hypot(b.center[0], b.center[1]) <= 40.0
