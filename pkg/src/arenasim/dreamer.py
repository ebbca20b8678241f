"""Renderer wire protocol and the built-in synthetic renderer.

Messages are canonical JSON (sorted keys, compact separators) with images and
canvases inlined as base64 PNG. A remote renderer implements ``POST /dream``.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import os
import socket
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from functools import lru_cache
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .errors import ContractViolation, ProtocolError, TransportError, ValidationError
from .layout import (
    BOX_CATEGORIES,
    MAP_CATEGORIES,
    IMAGE_HEIGHT,
    IMAGE_WIDTH,
    N_MAP,
    CameraModel,
    ConditionPayload,
    b64,
    decode_rgb_png,
    encode_rgb_png,
    payload_from_document,
    payload_to_document,
    unb64,
)

PROTOCOL_VERSION = "1.0"
DEFAULT_TIMEOUT_MS = 30000

# every non-box colour keeps all components inside [30, 220]; box colours use
# at least one saturated component so box pixels are unambiguous
BOX_COLORS = {
    "car": (255, 0, 0),
    "truck": (255, 128, 0),
    "construction_vehicle": (255, 255, 0),
    "bus": (0, 0, 255),
    "trailer": (128, 0, 255),
    "barrier": (255, 0, 255),
    "motorcycle": (0, 255, 255),
    "bicycle": (0, 255, 0),
    "pedestrian": (255, 0, 128),
    "traffic_cone": (0, 128, 255),
}
ROAD_COLOR = (92, 92, 96)
CROSSING_COLOR = (196, 196, 150)
LINE_COLORS = {
    "lane_boundary": (214, 214, 214),
    "lane_divider": (210, 190, 60),
    "ped_crossing": (170, 170, 210),
}
SAFE_LO, SAFE_HI = 30, 220


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False).encode("ascii")


def parse_json(body: bytes) -> dict:
    try:
        doc = json.loads(body)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"body is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ProtocolError("body must be a JSON object")
    version = doc.get("protocol_version")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol_version {version!r}")
    return doc


def image_digest(images: dict[str, np.ndarray]) -> str:
    """sha256 over camera names, shapes and raw pixels (encoder independent)."""
    h = hashlib.sha256()
    for name in sorted(images):
        img = np.ascontiguousarray(images[name], dtype=np.uint8)
        h.update(name.encode())
        h.update(repr(img.shape).encode())
        h.update(img.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Messages


@dataclass
class DreamRequest:
    payload: ConditionPayload
    reference_images: dict[str, np.ndarray] | None
    episode_id: str

    def validate(self) -> "DreamRequest":
        has_ref = self.payload.reference_frame_id is not None
        if has_ref != (self.reference_images is not None):
            raise ValidationError("reference_images must be present exactly when the payload has a reference frame")
        if self.reference_images is not None and len(self.reference_images) != len(self.payload.cameras):
            raise ValidationError("reference image count must equal the rig size")
        return self


@dataclass
class DreamResponse:
    frame_id: int
    images: dict[str, np.ndarray]
    latency_ms: float
    renderer_tag: str

    @property
    def digest(self) -> str:
        return image_digest(self.images)


def _images_doc(images: dict[str, np.ndarray]) -> dict:
    return {k: b64(encode_rgb_png(images[k])) for k in sorted(images)}


def _images_from_doc(doc) -> dict[str, np.ndarray]:
    if not isinstance(doc, dict):
        raise ProtocolError("images must be an object of camera -> base64 PNG")
    return {k: decode_rgb_png(unb64(v)) for k, v in doc.items()}


def encode_request(req: DreamRequest) -> bytes:
    return canonical_json(
        {
            "protocol_version": PROTOCOL_VERSION,
            "episode_id": req.episode_id,
            "payload": payload_to_document(req.payload),
            "reference_images": None if req.reference_images is None else _images_doc(req.reference_images),
        }
    )


def decode_request(body: bytes) -> DreamRequest:
    doc = parse_json(body)
    try:
        payload = payload_from_document(doc["payload"])
        ref = doc["reference_images"]
        req = DreamRequest(payload, None if ref is None else _images_from_doc(ref), str(doc["episode_id"]))
    except KeyError as exc:
        raise ProtocolError(f"request is missing field {exc}") from exc
    try:
        return req.validate()
    except ValidationError as exc:
        raise ProtocolError(str(exc)) from exc


def encode_response(resp: DreamResponse) -> bytes:
    return canonical_json(
        {
            "protocol_version": PROTOCOL_VERSION,
            "frame_id": resp.frame_id,
            "images": _images_doc(resp.images),
            "latency_ms": float(resp.latency_ms),
            "renderer_tag": resp.renderer_tag,
        }
    )


def decode_response(body: bytes) -> DreamResponse:
    doc = parse_json(body)
    try:
        return DreamResponse(int(doc["frame_id"]), _images_from_doc(doc["images"]), float(doc["latency_ms"]), str(doc["renderer_tag"]))
    except KeyError as exc:
        raise ProtocolError(f"response is missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed response: {exc}") from exc


def check_response(resp: DreamResponse, req: DreamRequest) -> DreamResponse:
    """Contract checks: frame id echo, one image per camera, exact dimensions."""
    if resp.frame_id != req.payload.frame_id:
        raise ContractViolation(f"response frame_id {resp.frame_id} does not echo request {req.payload.frame_id}")
    names = {c.camera.name for c in req.payload.cameras}
    if set(resp.images) != names:
        raise ContractViolation(f"response cameras {sorted(resp.images)} do not match rig {sorted(names)}")
    for cond in req.payload.cameras:
        img = resp.images[cond.camera.name]
        expect = (cond.camera.height, cond.camera.width, 3)
        if img.shape != expect:
            raise ContractViolation(f"image for {cond.camera.name} has shape {img.shape}, expected {expect}")
    return resp


# ---------------------------------------------------------------------------
# Synthetic renderer


def prompt_palette(prompt: str) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """Sky and ground colours derived from a hash of the prompt."""
    hue = hashlib.sha256(prompt.encode("utf-8")).digest()[0] / 255.0
    sky = colorsys.hsv_to_rgb(hue, 0.35, 0.84)
    ground = colorsys.hsv_to_rgb(hue, 0.25, 0.42)

    def q(c):
        return tuple(int(np.clip(round(v * 255), SAFE_LO, SAFE_HI)) for v in c)

    return q(sky), q(ground)


@lru_cache(maxsize=32)
def _ground_lookup(K: bytes, R: bytes, T: bytes, w: int, h: int):
    """Ground-plane hit point (ego frame) per pixel centre, NaN for sky."""
    K_ = np.frombuffer(K).reshape(3, 3)
    R_ = np.frombuffer(R).reshape(3, 3)
    T_ = np.frombuffer(T)
    u, v = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    pix = np.stack([u, v, np.ones_like(u)], axis=-1).reshape(-1, 3)
    d_cam = np.linalg.solve(K_, pix.T).T
    d = d_cam @ R_  # == (R^T d_cam^T)^T
    c = -R_.T @ T_
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -c[2] / d[:, 2]
    hit = c[:2] + t[:, None] * d[:, :2]
    ok = (d[:, 2] < -1e-9) & (t > 0)
    hit[~ok] = np.nan
    return hit.reshape(h, w, 2), ok.reshape(h, w)


def synthetic_render(payload: ConditionPayload) -> dict[str, np.ndarray]:
    """Deterministic stand-in renderer.

    Sky above the horizon and ground below (colours keyed on the prompt); the
    ground is shaded as road or crossing where the BEV grid says so; map
    line channels of the layout canvas are overdrawn; boxes are filled with
    their category colour last.
    """
    sky, ground = prompt_palette(payload.text_prompt)
    bev = payload.bev_grid
    n = bev.shape[1]
    ext, res = payload.bev_extent, payload.bev_resolution
    images = {}
    for cond in payload.cameras:
        cam: CameraModel = cond.camera
        w, h = cam.image_size
        hit, is_ground = _ground_lookup(cam.K.tobytes(), cam.R.tobytes(), cam.T.tobytes(), w, h)
        img = np.empty((h, w, 3), dtype=np.uint8)
        img[:] = sky
        img[is_ground] = ground
        rows = np.floor((ext - hit[..., 0]) / res)
        cols = np.floor((ext - hit[..., 1]) / res)
        inside = is_ground & (rows >= 0) & (rows < n) & (cols >= 0) & (cols < n)
        r = np.where(inside, rows, 0).astype(int)
        c = np.where(inside, cols, 0).astype(int)
        road = inside & (bev[3][r, c] > 0)
        img[road] = ROAD_COLOR
        cross = inside & (bev[2][r, c] > 0)
        img[cross] = CROSSING_COLOR
        canvas = cond.layout_canvas
        for cat in ("lane_boundary", "lane_divider", "ped_crossing"):
            img[canvas[:, :, MAP_CATEGORIES.index(cat)] > 0] = LINE_COLORS[cat]
        for k, cat in enumerate(BOX_CATEGORIES):
            img[canvas[:, :, N_MAP + k] > 0] = BOX_COLORS[cat]
        images[cam.name] = img
    return images


def box_pixel_mask(img: np.ndarray) -> np.ndarray:
    """Pixels whose colour can only come from a box."""
    return np.any((img < SAFE_LO) | (img > SAFE_HI), axis=-1)


# ---------------------------------------------------------------------------
# Bindings and transport


@dataclass(frozen=True)
class RendererBinding:
    kind: str = "builtin_synthetic"
    endpoint: str | None = None
    timeout_ms: float = DEFAULT_TIMEOUT_MS

    def validate(self) -> "RendererBinding":
        if self.kind not in ("builtin_synthetic", "remote"):
            raise ValidationError(f"unknown renderer kind {self.kind!r}")
        if (self.kind == "remote") != bool(self.endpoint):
            raise ValidationError("endpoint is required exactly for remote renderers")
        if not self.timeout_ms > 0:
            raise ValidationError("timeout_ms must be positive")
        return self


AUTH_TOKEN_ENV = "ARENASIM_AUTH_TOKEN"


def http_post(url: str, body: bytes, timeout_s: float) -> bytes:
    """POST a JSON body; transport failures raise :class:`TransportError`."""
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(AUTH_TOKEN_ENV)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    req = urllib.request.Request(url, data=body, method="POST", headers=headers)
    try:
        with urllib.request.urlopen(req, timeout=timeout_s) as resp:
            return resp.read()
    except urllib.error.HTTPError as exc:
        detail = exc.read()[:200].decode("utf-8", "replace")
        raise TransportError(f"{url} answered HTTP {exc.code}: {detail}") from exc
    except (socket.timeout, TimeoutError) as exc:
        raise TransportError(f"{url} timed out after {timeout_s:.3f} s", timeout=True) from exc
    except urllib.error.URLError as exc:
        timed_out = isinstance(exc.reason, (socket.timeout, TimeoutError))
        raise TransportError(f"{url} unreachable: {exc.reason}", timeout=timed_out) from exc
    except (ConnectionError, OSError) as exc:
        raise TransportError(f"{url} connection failed: {exc}") from exc


def _join(endpoint: str, path: str) -> str:
    return endpoint if endpoint.rstrip("/").endswith(path) else endpoint.rstrip("/") + path


def request_frame(binding: RendererBinding, req: DreamRequest) -> DreamResponse:
    """Render one frame through ``binding`` (no retries)."""
    binding.validate()
    req.validate()
    if binding.kind == "builtin_synthetic":
        resp = DreamResponse(req.payload.frame_id, synthetic_render(req.payload), 0.0, "synthetic")
        return check_response(resp, req)
    t0 = time.perf_counter()
    body = http_post(_join(binding.endpoint, "/dream"), encode_request(req), binding.timeout_ms / 1000.0)
    resp = decode_response(body)
    resp.latency_ms = (time.perf_counter() - t0) * 1000.0
    return check_response(resp, req)


class ReplayDreamer:
    """Serves recorded responses in order (for re-scoring an episode log)."""

    def __init__(self, responses: list[DreamResponse]):
        self._responses = list(responses)
        self._i = 0

    def request_frame(self, req: DreamRequest) -> DreamResponse:
        if self._i >= len(self._responses):
            raise ContractViolation("replay dreamer ran out of recorded frames")
        resp = self._responses[self._i]
        self._i += 1
        return check_response(resp, req)


# ---------------------------------------------------------------------------
# Service


class _DreamHandler(BaseHTTPRequestHandler):
    renderer = staticmethod(synthetic_render)
    tag = "synthetic"

    def log_message(self, *args):  # keep test output quiet
        pass

    def _send(self, code: int, body: bytes):
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        if self.path.rstrip("/") != "/dream":
            self._send(404, canonical_json({"error": "not found"}))
            return
        body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
        try:
            req = decode_request(body)
        except ProtocolError as exc:
            self._send(400, canonical_json({"error": str(exc)}))
            return
        images = type(self).renderer(req.payload)
        self._send(200, encode_response(DreamResponse(req.payload.frame_id, images, 0.0, type(self).tag)))


def make_dreamer_server(host: str = "127.0.0.1", port: int = 0, renderer=synthetic_render, tag: str = "synthetic") -> ThreadingHTTPServer:
    """HTTP renderer service; call ``serve_forever`` (e.g. in a thread)."""
    handler = type("DreamHandler", (_DreamHandler,), {"renderer": staticmethod(renderer), "tag": tag})
    return ThreadingHTTPServer((host, port), handler)
