"""Planar geometry shared by the road network, traffic engine and metrics.

Poses are ``(x, y, yaw)`` tuples in meters and radians. Polylines are
``(N, 2)`` float arrays.
"""

from __future__ import annotations

import math

import numpy as np

SAMPLING_STEP = 0.5


def wrap_angle(a):
    """Wrap an angle (or array of angles) to ``[-pi, pi)``."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


def arclength(points: np.ndarray) -> np.ndarray:
    """Cumulative arclength of a polyline, starting at 0."""
    points = np.asarray(points, dtype=float)
    if len(points) == 0:
        return np.zeros(0)
    seg = np.hypot(*np.diff(points, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(seg)])


def polyline_length(points: np.ndarray) -> float:
    return float(arclength(points)[-1]) if len(points) else 0.0


def dedupe(points: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    """Drop consecutive duplicate points."""
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return points
    keep = np.ones(len(points), dtype=bool)
    keep[1:] = np.hypot(*np.diff(points, axis=0).T) > eps
    return points[keep]


def resample(points: np.ndarray, step: float = SAMPLING_STEP) -> np.ndarray:
    """Resample a polyline at (near) uniform arclength spacing.

    Endpoints are kept exactly; the spacing is ``length / ceil(length / step)``.
    """
    points = dedupe(points)
    s = arclength(points)
    total = s[-1]
    n = max(1, int(math.ceil(total / step - 1e-9)))
    targets = np.linspace(0.0, total, n + 1)
    out = np.column_stack([np.interp(targets, s, points[:, 0]), np.interp(targets, s, points[:, 1])])
    out[0] = points[0]
    out[-1] = points[-1]
    return out


def point_at(points: np.ndarray, s_cum: np.ndarray, station: float) -> np.ndarray:
    """Point at arclength ``station`` (clamped to the polyline)."""
    station = min(max(station, 0.0), s_cum[-1])
    return np.array([np.interp(station, s_cum, points[:, 0]), np.interp(station, s_cum, points[:, 1])])


def heading_at(points: np.ndarray, s_cum: np.ndarray, station: float) -> float:
    """Tangent heading of the segment containing ``station``."""
    i = int(np.searchsorted(s_cum, station, side="right")) - 1
    i = min(max(i, 0), len(points) - 2)
    d = points[i + 1] - points[i]
    return math.atan2(d[1], d[0])


def headings(points: np.ndarray) -> np.ndarray:
    """Per-vertex tangent heading (segment heading, last vertex repeats)."""
    d = np.diff(points, axis=0)
    h = np.arctan2(d[:, 1], d[:, 0])
    return np.concatenate([h, h[-1:]])


def project(points: np.ndarray, s_cum: np.ndarray, q) -> tuple[float, float, float]:
    """Project point ``q`` onto a polyline.

    Returns:
        (station, signed lateral offset (positive = left), distance)
    """
    a = points[:-1]
    d = points[1:] - a
    seg_len2 = np.einsum("ij,ij->i", d, d)
    seg_len2 = np.where(seg_len2 > 0, seg_len2, 1.0)
    rel = np.asarray(q, dtype=float) - a
    t = np.clip(np.einsum("ij,ij->i", rel, d) / seg_len2, 0.0, 1.0)
    foot = a + d * t[:, None]
    dist2 = np.einsum("ij,ij->i", q - foot, q - foot)
    i = int(np.argmin(dist2))
    station = s_cum[i] + t[i] * (s_cum[i + 1] - s_cum[i])
    cross = d[i, 0] * rel[i, 1] - d[i, 1] * rel[i, 0]
    dist = math.sqrt(dist2[i])
    lateral = math.copysign(dist, cross) if cross != 0 else 0.0
    return float(station), float(lateral), float(dist)


def offset_polyline(points: np.ndarray, offset: float) -> np.ndarray:
    """Offset a polyline laterally (positive = left) using miter normals."""
    points = np.asarray(points, dtype=float)
    d = np.diff(points, axis=0)
    n = np.column_stack([-d[:, 1], d[:, 0]])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    normals = np.empty_like(points)
    normals[0] = n[0]
    normals[-1] = n[-1]
    if len(points) > 2:
        m = n[:-1] + n[1:]
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        cos_half = np.clip(np.einsum("ij,ij->i", m, n[1:]), 0.5, 1.0)
        normals[1:-1] = m / cos_half[:, None]
    return points + offset * normals


def slice_polyline(points: np.ndarray, s_cum: np.ndarray, s0: float, s1: float) -> np.ndarray:
    """Sub-polyline between stations ``s0 <= s1``."""
    s0 = min(max(s0, 0.0), s_cum[-1])
    s1 = min(max(s1, s0), s_cum[-1])
    inner = points[(s_cum > s0) & (s_cum < s1)]
    return np.vstack([point_at(points, s_cum, s0), inner, point_at(points, s_cum, s1)])


def to_local(points, pose) -> np.ndarray:
    """Express map-frame points in the frame of ``pose`` (x forward, y left)."""
    x, y, yaw = pose
    c, s = math.cos(yaw), math.sin(yaw)
    p = np.asarray(points, dtype=float) - (x, y)
    return np.column_stack([c * p[..., 0] + s * p[..., 1], -s * p[..., 0] + c * p[..., 1]]).reshape(np.shape(points))


def to_global(points, pose) -> np.ndarray:
    """Inverse of :func:`to_local`."""
    x, y, yaw = pose
    c, s = math.cos(yaw), math.sin(yaw)
    p = np.asarray(points, dtype=float)
    return np.column_stack([c * p[..., 0] - s * p[..., 1] + x, s * p[..., 0] + c * p[..., 1] + y]).reshape(np.shape(points))


def compose(a, b) -> tuple[float, float, float]:
    """SE(2) composition ``a o b``."""
    ax, ay, ayaw = a
    bx, by, byaw = b
    c, s = math.cos(ayaw), math.sin(ayaw)
    return (ax + c * bx - s * by, ay + s * bx + c * by, float(wrap_angle(ayaw + byaw)))


def inverse(a) -> tuple[float, float, float]:
    ax, ay, ayaw = a
    c, s = math.cos(ayaw), math.sin(ayaw)
    return (-(c * ax + s * ay), s * ax - c * ay, float(wrap_angle(-ayaw)))


def hermite(p0, h0, p1, h1, step: float = SAMPLING_STEP) -> np.ndarray:
    """Cubic Hermite curve between two poses, resampled at ``step``.

    Tangent magnitudes equal the chord length.
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    chord = float(np.hypot(*(p1 - p0)))
    m0 = chord * np.array([math.cos(h0), math.sin(h0)])
    m1 = chord * np.array([math.cos(h1), math.sin(h1)])
    t = np.linspace(0.0, 1.0, max(16, int(chord / step) * 8))[:, None]
    h00 = 2 * t**3 - 3 * t**2 + 1
    h10 = t**3 - 2 * t**2 + t
    h01 = -2 * t**3 + 3 * t**2
    h11 = t**3 - t**2
    dense = h00 * p0 + h10 * m0 + h01 * p1 + h11 * m1
    return resample(dense, step)


def box_corners(x: float, y: float, yaw: float, length: float, width: float) -> np.ndarray:
    """Corners of an oriented rectangle, counter-clockwise from front-left."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return local @ np.array([[c, s], [-s, c]]) + (x, y)


def sat_penetration(corners_a: np.ndarray, corners_b: np.ndarray) -> float:
    """Separating-axis test for two convex polygons.

    Returns the minimum overlap over all candidate axes. Positive means the
    polygons overlap by that depth; zero means touching; negative means a
    separating axis exists (the value is minus the largest separation found).
    """
    best = math.inf
    for poly in (corners_a, corners_b):
        edges = np.roll(poly, -1, axis=0) - poly
        axes = np.column_stack([-edges[:, 1], edges[:, 0]])
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        pa = corners_a @ axes.T
        pb = corners_b @ axes.T
        overlap = np.minimum(pa.max(axis=0), pb.max(axis=0)) - np.maximum(pa.min(axis=0), pb.min(axis=0))
        best = min(best, float(overlap.min()))
    return best


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns counter-clockwise hull vertices."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=float).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)
