"""
Hemisphere camera rig, perspective z-buffer rasterisation into 16-bit depth
images, and normal maps derived from depth.

Camera space is x right, y down, z forward (away from the camera). Pixel
(col, row) has its centre at (col + 0.5, row + 0.5).
"""

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .model_service import Mesh

DEFAULT_NEAR = 100.0
DEFAULT_FAR = 2000.0
# largest depth a 16-bit PGM pixel can hold, in millimeters
MAX_DEPTH = 65535.0
DEFAULT_PITCHES = (-30.0, 0.0, 30.0)
DEFAULT_YAWS = (-60.0, -20.0, 20.0, 60.0)


@dataclass(frozen=True)
class Camera:
    yaw: float  # degrees, positive moves the camera towards +x
    pitch: float  # degrees, positive moves the camera towards +y
    radius: float  # mm from the target
    focal: float  # px
    cx: float
    cy: float
    width: int
    height: int
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"camera radius must be > 0, got {self.radius}")
        if not self.focal > 0:
            raise ValueError(f"camera focal must be > 0, got {self.focal}")
        if not abs(self.pitch) < 90:
            raise ValueError(f"camera pitch must be in (-90, 90), got {self.pitch}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"camera raster must be positive, got {self.width}x{self.height}")
        if not 0 < self.near < self.far:
            raise ValueError(f"clip range must satisfy 0 < near < far, got {self.near}, {self.far}")
        if self.far > MAX_DEPTH:
            raise ValueError(f"far must fit a 16-bit depth (<= {MAX_DEPTH:g} mm), got {self.far}")

    @classmethod
    def frontal(cls, radius: float, focal: float, res: int, **kwargs) -> "Camera":
        return cls(yaw=0.0, pitch=0.0, radius=radius, focal=focal, cx=res / 2.0, cy=res / 2.0,
                   width=res, height=res, **kwargs)

    @property
    def position(self) -> np.ndarray:
        yaw, pitch = np.radians(self.yaw), np.radians(self.pitch)
        direction = np.array([np.cos(pitch) * np.sin(yaw), np.sin(pitch), np.cos(pitch) * np.cos(yaw)])
        return np.asarray(self.target, dtype=np.float64) + self.radius * direction

    @property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are the camera x, y, z axes."""
        forward = np.asarray(self.target, dtype=np.float64) - self.position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return np.stack([right, down, forward])

    @property
    def intrinsics(self) -> tuple[float, float, float]:
        return self.focal, self.cx, self.cy

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation.T


class Projection(NamedTuple):
    u: float
    v: float
    z: float
    in_front: bool


def hemisphere_cameras(
    radius: float = 600.0,
    focal: float = 220.0,
    res: int = 128,
    pitches: Sequence[float] = DEFAULT_PITCHES,
    yaws: Sequence[float] = DEFAULT_YAWS,
    near: float = DEFAULT_NEAR,
    far: float = DEFAULT_FAR,
) -> list[Camera]:
    """The rig in front of the face, pitch-major: pose id = pitch index * len(yaws) + yaw index."""
    if not (radius > 0 and focal > 0 and res > 0):
        raise ValueError(f"radius, focal and res must be positive, got {radius}, {focal}, {res}")
    return [
        Camera(yaw=float(yaw), pitch=float(pitch), radius=radius, focal=focal, cx=res / 2.0, cy=res / 2.0,
               width=res, height=res, near=near, far=far)
        for pitch in pitches
        for yaw in yaws
    ]


def project_points(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised pinhole projection; u, v are NaN where z <= 0."""
    cam = camera.to_camera(points)
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > 0, camera.focal * cam[..., 0] / z + camera.cx, np.nan)
        v = np.where(z > 0, camera.focal * cam[..., 1] / z + camera.cy, np.nan)
    return u, v, z


def project_vertex(camera: Camera, point: Sequence[float]) -> Projection:
    u, v, z = project_points(camera, np.asarray(point, dtype=np.float64)[None, :])
    return Projection(float(u[0]), float(v[0]), float(z[0]), bool(z[0] > 0))


@dataclass(frozen=True, eq=False)
class DepthImage:
    pixels: np.ndarray  # (H, W) uint16 millimeters, 0 = background

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True, eq=False)
class NormalMap:
    pixels: np.ndarray  # (H, W, 3) uint8, (0, 0, 0) = background

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _top_left(ax, ay, bx, by):
    # positive-area winding in a y-down raster: top edges run in +x, left edges run in -y
    dx, dy = bx - ax, by - ay
    return (dy < 0) | ((dy == 0) & (dx > 0))


def render_depth(mesh: Mesh, camera: Camera) -> DepthImage:
    width, height = camera.width, camera.height
    cam = camera.to_camera(mesh.points())
    tris = np.asarray(mesh.triangles)

    z = cam[:, 2]
    keep = np.all(z[tris] >= camera.near, axis=1)
    tris = tris[keep]
    depth = np.full(width * height, np.inf)
    if len(tris) == 0:
        return DepthImage(np.zeros((height, width), dtype=np.uint16))

    # vertices behind the near plane only feed triangles already dropped
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.focal * cam[:, 0] / z + camera.cx
        v = camera.focal * cam[:, 1] / z + camera.cy
    ua, ub, uc = u[tris[:, 0]], u[tris[:, 1]], u[tris[:, 2]]
    va, vb, vc = v[tris[:, 0]], v[tris[:, 1]], v[tris[:, 2]]
    za, zb, zc = z[tris[:, 0]], z[tris[:, 1]], z[tris[:, 2]]

    area = _edge(ua, va, ub, vb, uc, vc)
    # no backface culling: flip clockwise triangles so every area is positive
    flip = area < 0
    ub, uc = np.where(flip, uc, ub), np.where(flip, ub, uc)
    vb, vc = np.where(flip, vc, vb), np.where(flip, vb, vc)
    zb, zc = np.where(flip, zc, zb), np.where(flip, zb, zc)
    area = np.abs(area)

    col0 = np.maximum(np.ceil(np.minimum(np.minimum(ua, ub), uc) - 0.5), 0).astype(np.int64)
    col1 = np.minimum(np.floor(np.maximum(np.maximum(ua, ub), uc) - 0.5), width - 1).astype(np.int64)
    row0 = np.maximum(np.ceil(np.minimum(np.minimum(va, vb), vc) - 0.5), 0).astype(np.int64)
    row1 = np.minimum(np.floor(np.maximum(np.maximum(va, vb), vc) - 0.5), height - 1).astype(np.int64)
    n_cols = col1 - col0 + 1
    n_rows = row1 - row0 + 1
    live = (area > 0) & (n_cols > 0) & (n_rows > 0)
    if not np.any(live):
        return DepthImage(np.zeros((height, width), dtype=np.uint16))

    counts = np.where(live, n_cols * n_rows, 0)
    tri_idx = np.repeat(np.arange(len(counts)), counts)
    offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    cols = col0[tri_idx] + offsets % n_cols[tri_idx]
    rows = row0[tri_idx] + offsets // n_cols[tri_idx]
    px = cols + 0.5
    py = rows + 0.5

    a_u, a_v = ua[tri_idx], va[tri_idx]
    b_u, b_v = ub[tri_idx], vb[tri_idx]
    c_u, c_v = uc[tri_idx], vc[tri_idx]
    w0 = _edge(b_u, b_v, c_u, c_v, px, py)
    w1 = _edge(c_u, c_v, a_u, a_v, px, py)
    w2 = _edge(a_u, a_v, b_u, b_v, px, py)
    inside = (
        ((w0 > 0) | ((w0 == 0) & _top_left(b_u, b_v, c_u, c_v)))
        & ((w1 > 0) | ((w1 == 0) & _top_left(c_u, c_v, a_u, a_v)))
        & ((w2 > 0) | ((w2 == 0) & _top_left(a_u, a_v, b_u, b_v)))
    )

    tri_idx = tri_idx[inside]
    tri_area = area[tri_idx]
    inv_z = (
        w0[inside] / tri_area / za[tri_idx]
        + w1[inside] / tri_area / zb[tri_idx]
        + w2[inside] / tri_area / zc[tri_idx]
    )
    pixel_z = 1.0 / inv_z
    pixel = rows[inside] * width + cols[inside]
    clipped = (pixel_z >= camera.near) & (pixel_z <= camera.far)
    np.minimum.at(depth, pixel[clipped], pixel_z[clipped])

    covered = np.isfinite(depth)
    out = np.zeros(width * height, dtype=np.uint16)
    out[covered] = np.rint(depth[covered]).astype(np.uint16)
    return DepthImage(out.reshape(height, width))


def back_project(depth: DepthImage, focal: float, cx: float, cy: float) -> np.ndarray:
    """Camera-space points (H, W, 3) for every pixel, background included."""
    z = depth.pixels.astype(np.float64)
    cols = np.arange(depth.width) + 0.5
    rows = np.arange(depth.height) + 0.5
    x = (cols[None, :] - cx) * z / focal
    y = (rows[:, None] - cy) * z / focal
    return np.stack([x, y, z], axis=-1)


def encode_normals(normals: np.ndarray, valid: np.ndarray) -> NormalMap:
    encoded = np.clip(np.rint(normals * 127.5 + 127.5), 0, 255).astype(np.uint8)
    encoded[~valid] = 0
    return NormalMap(encoded)


def decode_normals(normal_map: NormalMap) -> tuple[np.ndarray, np.ndarray]:
    """Returns (unit-ish float normals (H, W, 3), foreground mask)."""
    pixels = normal_map.pixels
    mask = np.any(pixels != 0, axis=-1)
    return (pixels.astype(np.float64) - 127.5) / 127.5, mask


def depth_to_normals(depth: DepthImage, focal: float, cx: float, cy: float) -> NormalMap:
    points = back_project(depth, focal, cx, cy)
    fg = depth.pixels > 0
    height, width = fg.shape

    valid = np.zeros_like(fg)
    valid[1:-1, 1:-1] = (
        fg[1:-1, 1:-1] & fg[1:-1, 2:] & fg[1:-1, :-2] & fg[2:, 1:-1] & fg[:-2, 1:-1]
    )
    normals = np.zeros((height, width, 3))
    if height < 3 or width < 3:
        return encode_normals(normals, valid)

    t_u = points[1:-1, 2:] - points[1:-1, :-2]
    t_v = points[2:, 1:-1] - points[:-2, 1:-1]
    n = np.cross(t_u, t_v)
    # face the camera: negative z in a forward-looking frame
    n = np.where(n[..., 2:3] > 0, -n, n)
    length = np.linalg.norm(n, axis=-1, keepdims=True)
    inner_valid = valid[1:-1, 1:-1] & (length[..., 0] > 0)
    valid[1:-1, 1:-1] = inner_valid
    normals[1:-1, 1:-1] = np.divide(n, length, out=np.zeros_like(n), where=length > 0)
    return encode_normals(normals, valid)


def render_views(mesh: Mesh, cameras: Sequence[Camera]) -> list[tuple[DepthImage, NormalMap]]:
    views = []
    for camera in cameras:
        depth = render_depth(mesh, camera)
        views.append((depth, depth_to_normals(depth, *camera.intrinsics)))
    return views
