"""Scene layout conditions for the renderer.

Frames and conventions
----------------------
* Ego frame: x forward, y left, z up, origin on the ground below the ego
  centre.
* Camera frame: z forward (optical axis), x right, y down. A camera is given
  by ``K`` and the ego->camera extrinsics ``p_cam = R @ p_ego + T``.
* Pixel ``(u, v)``: u to the right, v down; pixel ``(i, j)`` covers
  ``[i, i + 1) x [j, j + 1)`` so its centre is ``(i + 0.5, j + 0.5)``.
* BEV grids are ego-centric with +x pointing up (row 0 is the far front) and
  +y pointing left (column 0 is the far left).

Rasterization is done with small numpy routines rather than an imaging
library so that results are bit-reproducible and mirror-symmetric about the
principal point: polygons are filled by even-odd tests on pixel centres and
segments are rasterized by uniform sampling with ``floor``.
"""

from __future__ import annotations

import base64
import io
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import geometry as geo
from .errors import ProtocolError, ValidationError
from .roadnet import MAP_CATEGORIES, RoadGraph, query_local_layout

IMAGE_WIDTH = 400
IMAGE_HEIGHT = 224
NEAR_PLANE = 0.1
SUBDIVISION = 0.5
DEFAULT_BANDS = 16
DEFAULT_RADIUS = 50.0
BEV_EXTENT = 50.0
BEV_RESOLUTION = 0.25
CAMERA_HEIGHT = 1.5
TRANSLATION_SCALE = 10.0

# nuScenes detection classes, in channel order
BOX_CATEGORIES = (
    "car",
    "truck",
    "construction_vehicle",
    "bus",
    "trailer",
    "barrier",
    "motorcycle",
    "bicycle",
    "pedestrian",
    "traffic_cone",
)
N_MAP = len(MAP_CATEGORIES)
N_BOX = len(BOX_CATEGORIES)

CAMERA_NAMES = ("FRONT", "FRONT_LEFT", "FRONT_RIGHT", "BACK", "BACK_LEFT", "BACK_RIGHT")
MIRROR_CAMERA = {
    "FRONT": "FRONT",
    "BACK": "BACK",
    "FRONT_LEFT": "FRONT_RIGHT",
    "FRONT_RIGHT": "FRONT_LEFT",
    "BACK_LEFT": "BACK_RIGHT",
    "BACK_RIGHT": "BACK_LEFT",
}
# name -> (yaw deg, mount x, mount y)
DEFAULT_MOUNTS = {
    "FRONT": (0.0, 1.7, 0.0),
    "FRONT_LEFT": (55.0, 1.5, 0.5),
    "FRONT_RIGHT": (-55.0, 1.5, -0.5),
    "BACK": (180.0, -1.0, 0.0),
    "BACK_LEFT": (110.0, 1.0, 0.8),
    "BACK_RIGHT": (-110.0, 1.0, -0.8),
}
DEFAULT_HFOV = 64.6


@dataclass(frozen=True)
class CameraModel:
    name: str
    K: np.ndarray
    R: np.ndarray
    T: np.ndarray
    image_size: tuple[int, int] = (IMAGE_WIDTH, IMAGE_HEIGHT)

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        R = np.asarray(self.R, dtype=float)
        T = np.asarray(self.T, dtype=float).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)
        if K.shape != (3, 3) or R.shape != (3, 3):
            raise ValidationError(f"camera {self.name}: K and R must be 3x3")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValidationError(f"camera {self.name}: K must be upper triangular with positive focal lengths")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValidationError(f"camera {self.name}: R must be a rotation")

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @property
    def center(self) -> np.ndarray:
        """Camera centre in the ego frame."""
        return -self.R.T @ self.T

    def to_dict(self) -> dict:
        return {"name": self.name, "K": self.K.tolist(), "R": self.R.tolist(), "T": self.T.tolist(), "image_size": list(self.image_size)}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["name"], np.array(d["K"]), np.array(d["R"]), np.array(d["T"]), tuple(d.get("image_size", (IMAGE_WIDTH, IMAGE_HEIGHT))))


def _snap(v: float) -> float:
    return 0.0 if abs(v) < 1e-15 else v


def camera_rotation(yaw: float) -> np.ndarray:
    """Ego->camera rotation for a level camera looking along ``yaw``."""
    c, s = _snap(math.cos(yaw)), _snap(math.sin(yaw))
    # rows: camera x (right), y (down), z (forward) expressed in ego axes
    return np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])


def make_camera(name: str, yaw_deg: float, mount=(0.0, 0.0, CAMERA_HEIGHT), hfov_deg: float = DEFAULT_HFOV, image_size=(IMAGE_WIDTH, IMAGE_HEIGHT)) -> CameraModel:
    w, h = image_size
    f = (w / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    K = np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])
    R = camera_rotation(math.radians(yaw_deg))
    T = -R @ np.asarray(mount, dtype=float)
    return CameraModel(name, K, R, T, (w, h))


def default_rig(hfov_deg: float = DEFAULT_HFOV) -> list[CameraModel]:
    """Six surround cameras at nuScenes-like yaw offsets."""
    return [make_camera(n, DEFAULT_MOUNTS[n][0], (DEFAULT_MOUNTS[n][1], DEFAULT_MOUNTS[n][2], CAMERA_HEIGHT), hfov_deg) for n in CAMERA_NAMES]


def mirror_camera(cam: CameraModel) -> CameraModel:
    """Reflect a camera about the ego x-axis (and rename LEFT <-> RIGHT)."""
    M = np.diag([1.0, -1.0, 1.0])
    F = np.diag([-1.0, 1.0, 1.0])  # flip camera x
    return CameraModel(MIRROR_CAMERA.get(cam.name, cam.name), cam.K, F @ cam.R @ M, F @ cam.T, cam.image_size)


# ---------------------------------------------------------------------------
# Layout frames


@dataclass(frozen=True)
class Box3D:
    category: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # length, width, height
    yaw: float
    track_id: str = ""

    def vertices(self) -> np.ndarray:
        """8 corners: bottom face counter-clockwise from front-left, then the top face."""
        l, w, h = self.size
        base = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        xy = base @ np.array([[c, s], [-s, c]]) + self.center[:2]
        z0, z1 = self.center[2] - h / 2, self.center[2] + h / 2
        return np.vstack([np.column_stack([xy, np.full(4, z0)]), np.column_stack([xy, np.full(4, z1)])])

    def to_dict(self) -> dict:
        return {"category": self.category, "center": list(self.center), "size": list(self.size), "yaw": self.yaw, "track_id": self.track_id}


BOX_EDGES = ((0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7))


@dataclass
class LayoutFrame:
    """Ego-centric layout. Map polylines are (N, 2) ground points; polygons are lists of rings."""

    frame_id: int
    ego_pose: tuple[float, float, float]
    map_layers: dict[str, list] = field(default_factory=lambda: {c: [] for c in MAP_CATEGORIES})
    boxes: list[Box3D] = field(default_factory=list)
    radius: float = DEFAULT_RADIUS

    POLYGON_LAYERS = ("ped_crossing", "drivable_area")

    def mirrored(self) -> "LayoutFrame":
        """Reflection about the ego x-axis."""
        flip = np.array([1.0, -1.0])
        layers = {}
        for cat, items in self.map_layers.items():
            if cat in self.POLYGON_LAYERS:
                layers[cat] = [[np.asarray(r) * flip for r in poly] for poly in items]
            else:
                layers[cat] = [np.asarray(p) * flip for p in items]
        boxes = [Box3D(b.category, (b.center[0], -b.center[1], b.center[2]), b.size, -b.yaw, b.track_id) for b in self.boxes]
        x, y, yaw = self.ego_pose
        return LayoutFrame(self.frame_id, (x, -y, -yaw), layers, boxes, self.radius)


def extract_layout(world, graph: RoadGraph, radius: float = DEFAULT_RADIUS, frame_id: int = 0, vehicle_height: float = 1.5) -> LayoutFrame:
    """Ego-centric layout frame: map layers and boxes of all other vehicles within ``radius``."""
    if radius <= 0:
        raise ValidationError("radius must be positive")
    ego = world.ego
    pose = ego.pose
    sl = query_local_layout(graph, pose, radius)
    layers = {c: [] for c in MAP_CATEGORIES}
    for cat, pts in sl.dividers:
        layers[cat].append(pts)
    layers["ped_crossing"] = [[p] for p in sl.crossings]
    layers["drivable_area"] = [list(rings) for rings in sl.drivable]
    boxes = []
    for vid in sorted(world.vehicles):
        if vid == ego.id:
            continue
        v = world.vehicles[vid]
        if math.hypot(v.x - ego.x, v.y - ego.y) > radius:
            continue
        local = geo.to_local(np.array([v.x, v.y]), pose)
        yaw = float(geo.wrap_angle(v.yaw - ego.yaw))
        boxes.append(Box3D("car", (float(local[0]), float(local[1]), vehicle_height / 2.0), (v.length, v.width, vehicle_height), yaw, vid))
    return LayoutFrame(frame_id, pose, layers, boxes, radius)


# ---------------------------------------------------------------------------
# Projection


def to_camera(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    return p @ cam.R.T + cam.T


def project_points(points: np.ndarray, cam: CameraModel) -> list[tuple[float, float] | None]:
    """Pixel coordinates of ego-frame points; ``None`` for points with depth <= 0.1 m."""
    pc = to_camera(points, cam)
    out: list[tuple[float, float] | None] = []
    for x, y, z in pc:
        if z <= NEAR_PLANE:
            out.append(None)
            continue
        u = cam.K[0, 0] * x / z + cam.K[0, 1] * y / z + cam.K[0, 2]
        v = cam.K[1, 1] * y / z + cam.K[1, 2]
        out.append((float(u), float(v)))
    return out


def backproject_ray(pixel, cam: CameraModel):
    """Ray (origin, unit direction) in the ego frame through ``pixel``."""
    d_cam = np.linalg.solve(cam.K, np.array([pixel[0], pixel[1], 1.0]))
    d = cam.R.T @ d_cam
    return cam.center, d / np.linalg.norm(d)


def _centered(pc: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Image coordinates relative to the principal point (depth must be > 0)."""
    z = pc[:, 2]
    u = cam.K[0, 0] * pc[:, 0] / z + cam.K[0, 1] * pc[:, 1] / z
    v = cam.K[1, 1] * pc[:, 1] / z
    return np.column_stack([u, v])


# ---------------------------------------------------------------------------
# Rasterization primitives (centred coordinates, pixel centres at i + 0.5 - origin)


def _clip_segments(a: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Liang-Barsky clipping of 2D segments to the box [lo, hi]."""
    d = b - a
    t0 = np.zeros(len(a))
    t1 = np.ones(len(a))
    keep = np.ones(len(a), dtype=bool)
    for k in range(2):
        for p, q in ((-d[:, k], a[:, k] - lo[k]), (d[:, k], hi[k] - a[:, k])):
            par = p == 0
            keep &= ~(par & (q < 0))
            with np.errstate(divide="ignore", invalid="ignore"):
                r = np.where(par, 0.0, q / np.where(par, 1.0, p))
            t0 = np.where(~par & (p < 0), np.maximum(t0, r), t0)
            t1 = np.where(~par & (p > 0), np.minimum(t1, r), t1)
    keep &= t0 <= t1
    a2 = a + t0[:, None] * d
    b2 = a + t1[:, None] * d
    return a2[keep], b2[keep]


def _floor_shift(x: np.ndarray, o: float) -> np.ndarray:
    # floor before shifting keeps integer origins exactly mirror-symmetric
    if float(o).is_integer():
        return np.floor(x).astype(int) + int(o)
    return np.floor(x + o).astype(int)


def _walk_major(mask: np.ndarray, a: np.ndarray, b: np.ndarray, m: int, origin) -> None:
    """Mark one pixel per major-axis index ``m`` for each segment (DDA)."""
    if len(a) == 0:
        return
    n = 1 - m
    o = (origin[0], origin[1])
    lo = _floor_shift(np.minimum(a[:, m], b[:, m]), o[m])
    hi = _floor_shift(np.maximum(a[:, m], b[:, m]), o[m])
    count = hi - lo + 1
    seg = np.repeat(np.arange(len(a)), count)
    idx = lo[seg] + np.arange(len(seg)) - np.repeat(np.cumsum(count) - count, count)
    d = b - a
    dm = d[seg, m]
    centre = idx + 0.5 - o[m]
    with np.errstate(divide="ignore", invalid="ignore"):
        other = np.where(dm != 0, a[seg, n] + (centre - a[seg, m]) * d[seg, n] / np.where(dm != 0, dm, 1.0), a[seg, n])
    other_idx = _floor_shift(other, o[n])
    h, w = mask.shape
    size = (w, h)
    keep = (idx >= 0) & (idx < size[m]) & (other_idx >= 0) & (other_idx < size[n])
    cols, rows = (idx, other_idx) if m == 0 else (other_idx, idx)
    mask[rows[keep], cols[keep]] = True


def draw_segments(mask: np.ndarray, a: np.ndarray, b: np.ndarray, origin=(0.0, 0.0)) -> None:
    """Rasterize 2D segments into a boolean mask (in place).

    Coordinates are given relative to ``origin`` (the pixel-grid position of
    coordinate zero). Each segment marks exactly one pixel per column (or per
    row, whichever axis it spans more of), taken where the segment's line
    crosses the pixel-centre line. Using the line rather than the clamped
    segment keeps collinear pieces of a subdivided polyline on the same pixels.
    """
    if len(a) == 0:
        return
    h, w = mask.shape
    ox, oy = origin
    lo = np.array([-ox, -oy])
    hi = np.array([w - ox, h - oy])
    a, b = _clip_segments(np.asarray(a, float), np.asarray(b, float), lo, hi)
    if len(a) == 0:
        return
    d = np.abs(b - a)
    xmajor = d[:, 0] >= d[:, 1]
    _walk_major(mask, a[xmajor], b[xmajor], 0, origin)
    _walk_major(mask, a[~xmajor], b[~xmajor], 1, origin)


def fill_rings(mask: np.ndarray, rings: list[np.ndarray], origin=(0.0, 0.0)) -> None:
    """Even-odd fill of one polygon (outer ring + holes) into ``mask`` (in place).

    A pixel is set when its centre lies inside; centres exactly on an edge
    follow the half-open rule ``x0 <= x < x1``, ``y0 <= y < y1`` so that
    polygons sharing an edge never both claim a pixel.
    """
    rings = [np.asarray(r, dtype=float) for r in rings if len(r) >= 3]
    if not rings:
        return
    h, w = mask.shape
    ox, oy = origin
    a = np.vstack([r for r in rings])
    b = np.vstack([np.roll(r, -1, axis=0) for r in rings])
    ymin, ymax = min(a[:, 1].min(), b[:, 1].min()), max(a[:, 1].max(), b[:, 1].max())
    j0 = max(0, int(math.floor(ymin + oy - 0.5)))
    j1 = min(h - 1, int(math.ceil(ymax + oy - 0.5)))
    if j1 < j0:
        return
    ic = np.arange(w) + 0.5 - ox
    lo_y = np.minimum(a[:, 1], b[:, 1])
    hi_y = np.maximum(a[:, 1], b[:, 1])
    for j in range(j0, j1 + 1):
        yc = j + 0.5 - oy
        sel = (lo_y <= yc) & (yc < hi_y)
        xs = np.sort(a[sel, 0] + (yc - a[sel, 1]) * (b[sel, 0] - a[sel, 0]) / (b[sel, 1] - a[sel, 1]))
        if len(xs) < 2:
            continue
        for x0, x1 in zip(xs[0::2], xs[1::2]):
            mask[j, (ic >= x0) & (ic < x1)] = True


def _subdivide(points: np.ndarray, step: float = SUBDIVISION) -> np.ndarray:
    """Insert points so that no segment is longer than ``step``."""
    p = np.asarray(points, dtype=float)
    if len(p) < 2:
        return p
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    n = np.maximum(1, np.ceil(seg / step - 1e-9).astype(int))
    if np.all(n == 1):
        return p
    out = [p[:1]]
    for i, k in enumerate(n):
        t = (np.arange(1, k + 1) / k)[:, None]
        out.append(p[i] + t * (p[i + 1] - p[i]))
    return np.vstack(out)


def _near_clip(pa: np.ndarray, pb: np.ndarray):
    """Clip camera-frame 3D segments to z >= NEAR_PLANE."""
    za, zb = pa[:, 2], pb[:, 2]
    keep = (za > NEAR_PLANE) | (zb > NEAR_PLANE)
    pa, pb, za, zb = pa[keep], pb[keep], za[keep], zb[keep]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (NEAR_PLANE - za) / (zb - za)
        cut = pa + t[:, None] * (pb - pa)
    pa = np.where((za <= NEAR_PLANE)[:, None], cut, pa)
    pb = np.where((zb <= NEAR_PLANE)[:, None], cut, pb)
    return pa, pb


def _polyline_segments_3d(polylines_2d) -> tuple[np.ndarray, np.ndarray]:
    a_list, b_list = [], []
    for pl in polylines_2d:
        p = _subdivide(np.asarray(pl, float))
        if len(p) < 2:
            continue
        p3 = np.column_stack([p, np.zeros(len(p))])
        a_list.append(p3[:-1])
        b_list.append(p3[1:])
    if not a_list:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.vstack(a_list), np.vstack(b_list)


def _layer_polylines(frame: LayoutFrame, cat: str) -> list[np.ndarray]:
    items = frame.map_layers.get(cat, [])
    if cat in LayoutFrame.POLYGON_LAYERS:
        out = []
        for poly in items:
            for ring in poly:
                r = np.asarray(ring, float)
                if len(r) >= 2:
                    out.append(np.vstack([r, r[:1]]))
        return out
    return [np.asarray(p, float) for p in items]


def box_hull_pixels(box: Box3D, cam: CameraModel) -> np.ndarray | None:
    """Centred image coordinates of the visible outline of a box (convex hull)."""
    pc = to_camera(box.vertices(), cam)
    front = pc[pc[:, 2] > NEAR_PLANE]
    pts = [front]
    for i, j in BOX_EDGES:
        za, zb = pc[i, 2], pc[j, 2]
        if (za > NEAR_PLANE) != (zb > NEAR_PLANE):
            t = (NEAR_PLANE - za) / (zb - za)
            pts.append((pc[i] + t * (pc[j] - pc[i]))[None])
    pts = np.vstack(pts)
    if len(pts) < 3:
        return None
    hull = geo.convex_hull(_centered(pts, cam))
    return hull if len(hull) >= 3 else None


def render_canvases(frame: LayoutFrame, rig: list[CameraModel]) -> dict[str, np.ndarray]:
    """Per-camera layout canvases ``(H, W, N_MAP + N_BOX)`` of 0/1 uint8."""
    if not rig:
        raise ValidationError("camera rig is empty")
    segs = {cat: _polyline_segments_3d(_layer_polylines(frame, cat)) for cat in MAP_CATEGORIES}
    out = {}
    for cam in rig:
        w, h = cam.image_size
        origin = (cam.K[0, 2], cam.K[1, 2])
        canvas = np.zeros((h, w, N_MAP + N_BOX), dtype=np.uint8)
        for c, cat in enumerate(MAP_CATEGORIES):
            a3, b3 = segs[cat]
            if len(a3) == 0:
                continue
            pa, pb = _near_clip(to_camera(a3, cam), to_camera(b3, cam))
            if len(pa) == 0:
                continue
            mask = np.zeros((h, w), dtype=bool)
            draw_segments(mask, _centered(pa, cam), _centered(pb, cam), origin)
            canvas[:, :, c] = mask
        for box in frame.boxes:
            hull = box_hull_pixels(box, cam)
            if hull is None:
                continue
            mask = np.zeros((h, w), dtype=bool)
            fill_rings(mask, [hull], origin)
            c = N_MAP + BOX_CATEGORIES.index(box.category)
            canvas[:, :, c] |= mask.astype(np.uint8)
        out[cam.name] = canvas
    return out


def rasterize_bev(frame: LayoutFrame, extent: float = BEV_EXTENT, resolution: float = BEV_RESOLUTION) -> np.ndarray:
    """Top-down map occupancy ``(N_MAP, H, W)`` uint8, +x up, +y left."""
    if extent <= 0 or resolution <= 0:
        raise ValidationError("extent and resolution must be positive")
    n = int(round(2 * extent / resolution))
    grid = np.zeros((N_MAP, n, n), dtype=np.uint8)

    def to_grid(p):
        p = np.asarray(p, dtype=float)
        return np.column_stack([(extent - p[:, 1]) / resolution, (extent - p[:, 0]) / resolution])

    for c, cat in enumerate(MAP_CATEGORIES):
        mask = np.zeros((n, n), dtype=bool)
        if cat in LayoutFrame.POLYGON_LAYERS:
            for poly in frame.map_layers.get(cat, []):
                fill_rings(mask, [to_grid(r) for r in poly])
        else:
            for pl in frame.map_layers.get(cat, []):
                g = to_grid(pl)
                if len(g) >= 2:
                    draw_segments(mask, g[:-1], g[1:])
        grid[c] = mask
    return grid


# ---------------------------------------------------------------------------
# Embeddings


def fourier_embed(values, bands: int = DEFAULT_BANDS) -> np.ndarray:
    """``[sin(2^k pi x), cos(2^k pi x)]`` for every scalar x (scalar-major, band-minor)."""
    if bands < 1:
        raise ValidationError("bands must be >= 1")
    x = np.asarray(values, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValidationError("fourier_embed input must be finite")
    arg = np.pi * x[:, None] * (2.0 ** np.arange(bands))[None, :]
    return np.stack([np.sin(arg), np.cos(arg)], axis=-1).reshape(-1)


def camera_vector(cam: CameraModel) -> np.ndarray:
    """Normalized flattened (K, R, T): K rows scaled by image size, T in tens of meters."""
    K = cam.K.copy()
    K[0] /= cam.width
    K[1] /= cam.height
    return np.concatenate([K.reshape(-1), cam.R.reshape(-1), cam.T / TRANSLATION_SCALE])


def relative_pose(reference, current) -> tuple[float, float, float]:
    """``reference^-1 o current`` as (dx, dy, dyaw) in the reference frame."""
    if not (np.all(np.isfinite(reference)) and np.all(np.isfinite(current))):
        raise ValidationError("poses must be finite")
    return geo.compose(geo.inverse(reference), current)


@dataclass
class CameraCondition:
    camera: CameraModel
    layout_canvas: np.ndarray
    cam_embedding: np.ndarray


@dataclass
class ConditionPayload:
    frame_id: int
    cameras: list[CameraCondition]
    box_embeddings: list[np.ndarray]
    boxes: list[Box3D]
    bev_grid: np.ndarray
    bev_extent: float
    bev_resolution: float
    bands: int
    text_prompt: str = ""
    reference_frame_id: int | None = None
    relative_pose: tuple[float, float, float] | None = None
    rel_embedding: np.ndarray | None = None
    radius: float = DEFAULT_RADIUS

    @property
    def rig(self) -> list[CameraModel]:
        return [c.camera for c in self.cameras]

    def canvas(self, name: str) -> np.ndarray:
        for c in self.cameras:
            if c.camera.name == name:
                return c.layout_canvas
        raise KeyError(name)


def build_condition_payload(
    frame: LayoutFrame,
    rig: list[CameraModel],
    reference_frame=None,
    prompt: str = "",
    bev_extent: float = BEV_EXTENT,
    bev_resolution: float = BEV_RESOLUTION,
    bands: int = DEFAULT_BANDS,
) -> ConditionPayload:
    """Assemble every renderer condition for one frame.

    ``reference_frame`` is ``(frame_id, ego_pose)`` of the previous generated
    frame, or ``None``. Box vertices are embedded after dividing by the layout
    radius; the relative pose as ``(dx / radius, dy / radius, dyaw / pi)``.
    """
    canvases = render_canvases(frame, rig)
    cams = [CameraCondition(c, canvases[c.name], fourier_embed(camera_vector(c), bands)) for c in rig]
    box_emb = [fourier_embed(b.vertices().reshape(-1) / frame.radius, bands) for b in frame.boxes]
    bev = rasterize_bev(frame, bev_extent, bev_resolution)
    ref_id = rel = rel_emb = None
    if reference_frame is not None:
        ref_id, ref_pose = reference_frame
        rel = relative_pose(ref_pose, frame.ego_pose)
        rel_emb = fourier_embed([rel[0] / frame.radius, rel[1] / frame.radius, rel[2] / math.pi], bands)
    return ConditionPayload(
        frame.frame_id, cams, box_emb, list(frame.boxes), bev, bev_extent, bev_resolution, bands, prompt, ref_id, rel, rel_emb, frame.radius
    )


# ---------------------------------------------------------------------------
# PNG channel-block encoding


def pack_channels(block: np.ndarray) -> bytes:
    """Losslessly encode an ``(H, W, C)`` 0/1 block (C <= 16) as one PNG.

    Channel ``c`` becomes bit ``c``; 8-bit greyscale when C <= 8, else 16-bit.
    """
    block = np.asarray(block)
    h, w, c = block.shape
    if c > 16:
        raise ValidationError("at most 16 channels per block")
    bits = (block.astype(np.uint32) << np.arange(c, dtype=np.uint32)).sum(axis=2)
    buf = io.BytesIO()
    if c <= 8:
        Image.fromarray(bits.astype(np.uint8)).save(buf, format="PNG", compress_level=6)
    else:
        Image.fromarray(bits.astype(np.uint16)).save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def unpack_channels(data: bytes, channels: int) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(data))
        arr = np.array(img).astype(np.uint32)
    except Exception as exc:  # noqa: BLE001 - any decoder failure is a protocol problem
        raise ProtocolError(f"undecodable PNG: {exc}") from exc
    return ((arr[:, :, None] >> np.arange(channels, dtype=np.uint32)) & 1).astype(np.uint8)


def encode_rgb_png(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def decode_rgb_png(data: bytes) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:  # noqa: BLE001
        raise ProtocolError(f"undecodable PNG: {exc}") from exc
    if img.mode != "RGB":
        raise ProtocolError(f"expected an RGB PNG, got mode {img.mode}")
    return np.array(img)


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError) as exc:
        raise ProtocolError("invalid base64 data") from exc


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=float).reshape(-1)]


def payload_to_document(p: ConditionPayload) -> dict:
    """Versioned JSON-ready document with inline base64 PNG channel blocks."""
    cams = []
    for c in p.cameras:
        cams.append(
            {
                "camera": c.camera.to_dict(),
                "map_canvas_png": b64(pack_channels(c.layout_canvas[:, :, :N_MAP])),
                "box_canvas_png": b64(pack_channels(c.layout_canvas[:, :, N_MAP:])),
                "cam_embedding": _floats(c.cam_embedding),
            }
        )
    doc = {
        "frame_id": p.frame_id,
        "map_categories": list(MAP_CATEGORIES),
        "box_categories": list(BOX_CATEGORIES),
        "cameras": cams,
        "boxes": [b.to_dict() for b in p.boxes],
        "box_embeddings": [_floats(e) for e in p.box_embeddings],
        "bev": {"extent": p.bev_extent, "resolution": p.bev_resolution, "png": b64(pack_channels(np.transpose(p.bev_grid, (1, 2, 0))))},
        "bands": p.bands,
        "radius": p.radius,
        "text_prompt": p.text_prompt,
        "reference_frame_id": p.reference_frame_id,
        "relative_pose": None if p.relative_pose is None else list(p.relative_pose),
        "rel_embedding": None if p.rel_embedding is None else _floats(p.rel_embedding),
    }
    return doc


def payload_from_document(doc: dict) -> ConditionPayload:
    try:
        cams = []
        for c in doc["cameras"]:
            cam = CameraModel.from_dict(c["camera"])
            mp = unpack_channels(unb64(c["map_canvas_png"]), N_MAP)
            bx = unpack_channels(unb64(c["box_canvas_png"]), N_BOX)
            cams.append(CameraCondition(cam, np.concatenate([mp, bx], axis=2), np.array(c["cam_embedding"], dtype=float)))
        boxes = [Box3D(b["category"], tuple(b["center"]), tuple(b["size"]), b["yaw"], b.get("track_id", "")) for b in doc["boxes"]]
        bev = np.transpose(unpack_channels(unb64(doc["bev"]["png"]), N_MAP), (2, 0, 1))
        rel = doc.get("relative_pose")
        rel_emb = doc.get("rel_embedding")
        return ConditionPayload(
            int(doc["frame_id"]),
            cams,
            [np.array(e, dtype=float) for e in doc["box_embeddings"]],
            boxes,
            bev,
            float(doc["bev"]["extent"]),
            float(doc["bev"]["resolution"]),
            int(doc["bands"]),
            doc.get("text_prompt", ""),
            doc.get("reference_frame_id"),
            None if rel is None else tuple(rel),
            None if rel_emb is None else np.array(rel_emb, dtype=float),
            float(doc.get("radius", DEFAULT_RADIUS)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed condition payload: {exc!r}") from exc
