"""
Pinhole cameras and a deterministic software rasterizer.

Coverage is decided with edge functions evaluated at pixel centres
(px + 0.5, py + 0.5). Each edge is always evaluated from its lower vertex
index to its higher one, so two triangles sharing an edge see exactly
negated values and the top-left rule hands every edge pixel to one of them.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from pica import diffcore as dc
from pica.diffcore import Tensor

if TYPE_CHECKING:
    from pica.geometry import MeshTopology

logger = logging.getLogger(__name__)

NEAR_PLANE = 1.0
# candidate (triangle, pixel) pairs evaluated per chunk
CHUNK_PAIRS = 2_000_000


@dataclass
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.K.shape != (3, 3) or self.R.shape != (3, 3):
            raise ValueError("camera K and R must be 3×3")
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("viewport must be at least 1×1")

    @property
    def center(self) -> np.ndarray:
        """camera position in face-centric coordinates"""
        return -self.R.T @ self.t

    def to_dict(self) -> dict:
        return {"K": self.K.tolist(), "R": self.R.tolist(), "t": self.t.tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["K"]), np.array(d["R"]), np.array(d["t"]), int(d["width"]), int(d["height"]))


def intrinsics(focal: float, width: int, height: int) -> np.ndarray:
    return np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])


def look_at(eye: Sequence[float], target: Sequence[float], focal: float, width: int, height: int,
            up: Sequence[float] = (0.0, 1.0, 0.0)) -> Camera:
    """camera at `eye` looking at `target`; rows of R are right, down, forward"""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ValueError("eye and target coincide")
    forward /= norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("view direction parallel to up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Camera(intrinsics(focal, width, height), R, -R @ eye, width, height)


def project(camera: Camera, xyz: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Returns:
        (screen x, screen y, camera-space depth); points with depth <= 1 mm
        are behind the near plane and get NaN screen coordinates
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    cam = xyz @ camera.R.T + camera.t
    z = cam[..., 2]
    front = z > NEAR_PLANE
    safe = np.where(front, z, 1.0)
    sx = np.where(front, camera.K[0, 0] * cam[..., 0] / safe + camera.K[0, 2], np.nan)
    sy = np.where(front, camera.K[1, 1] * cam[..., 1] / safe + camera.K[1, 2], np.nan)
    return sx, sy, z


def unproject(camera: Camera, sx: np.ndarray, sy: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """inverse of project for points in front of the camera"""
    depth = np.asarray(depth, dtype=np.float64)
    cam = np.stack([
        (np.asarray(sx) - camera.K[0, 2]) / camera.K[0, 0] * depth,
        (np.asarray(sy) - camera.K[1, 2]) / camera.K[1, 1] * depth,
        depth,
    ], axis=-1)
    return (cam - camera.t) @ camera.R


def view_direction(camera: Camera) -> np.ndarray:
    """Rᵀt normalized, in face-centric coordinates"""
    v = camera.R.T @ camera.t
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("camera translation is zero; view direction undefined")
    return v / norm


# ---------------------------------------------------------------------------
# Scan conversion
# ---------------------------------------------------------------------------

def _candidate_pairs(tri_xy: np.ndarray, width: int, height: int):
    """(triangle, px, py) for every pixel centre inside each triangle's bounding box"""
    lo = np.ceil(tri_xy.min(axis=1) - 0.5).astype(np.int64)
    hi = np.floor(tri_xy.max(axis=1) - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [width - 1, height - 1])
    span = np.maximum(hi - lo + 1, 0)
    counts = span[:, 0] * span[:, 1]
    ends = np.cumsum(counts)
    start = 0
    while start < len(counts):
        base = ends[start - 1] if start else 0
        stop = max(int(np.searchsorted(ends, base + CHUNK_PAIRS, side="right")), start + 1)
        chunk = np.arange(start, stop)
        c = counts[chunk]
        tri = np.repeat(chunk, c)
        offset = np.arange(int(c.sum())) - np.repeat(np.cumsum(c) - c, c)
        nx = span[tri, 0]
        yield tri, lo[tri, 0] + offset % np.maximum(nx, 1), lo[tri, 1] + offset // np.maximum(nx, 1)
        start = stop


def _edge_function(a: np.ndarray, b: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    return (b[:, 0] - a[:, 0]) * (py - a[:, 1]) - (b[:, 1] - a[:, 1]) * (px - a[:, 0])


def _cover(xy: np.ndarray, triangles: np.ndarray, width: int, height: int):
    """
    All (triangle, pixel) pairs whose pixel centre the triangle owns.

    Returns:
        tri index, flat pixel index, screen-space barycentrics (P×3), and the
        number of zero-area triangles that were skipped
    """
    tri_xy = xy[triangles]
    k0 = triangles
    # orientation from a canonical evaluation of edge 0 at vertex 0
    i0, j0 = k0[:, 1], k0[:, 2]
    sign0 = np.where(i0 < j0, 1.0, -1.0)
    lo0, hi0 = np.minimum(i0, j0), np.maximum(i0, j0)
    area = sign0 * _edge_function(xy[lo0], xy[hi0], tri_xy[:, 0, 0], tri_xy[:, 0, 1])
    degenerate = ~(np.abs(area) > 0) | ~np.isfinite(area)
    orient = np.where(area > 0, 1.0, -1.0)

    tris, pixels, barys = [], [], []
    keep = np.nonzero(~degenerate)[0]
    if keep.size:
        for local, px, py in _candidate_pairs(tri_xy[keep], width, height):
            t = keep[local]
            cx, cy = px + 0.5, py + 0.5
            inside = np.ones(t.shape, dtype=bool)
            w = np.empty((t.size, 3))
            for k in range(3):
                i, j = triangles[t, (k + 1) % 3], triangles[t, (k + 2) % 3]
                s = np.where(i < j, 1.0, -1.0) * orient[t]
                w[:, k] = s * _edge_function(xy[np.minimum(i, j)], xy[np.maximum(i, j)], cx, cy)
                d = (xy[j] - xy[i]) * orient[t][:, None]
                owned = (d[:, 1] < 0) | ((d[:, 1] == 0) & (d[:, 0] > 0))
                inside &= (w[:, k] > 0) | ((w[:, k] == 0) & owned)
            tris.append(t[inside])
            pixels.append(py[inside] * width + px[inside])
            wi = w[inside]
            barys.append(wi / wi.sum(axis=1, keepdims=True))
    if not tris:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)), int(degenerate.sum())
    return np.concatenate(tris), np.concatenate(pixels), np.concatenate(barys), int(degenerate.sum())


def _resolve(pixels: np.ndarray, depth: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """index of the winning pair per pixel: nearest depth, then lowest triangle id"""
    order = np.lexsort((tris, depth, pixels))
    p = pixels[order]
    first = np.ones(p.shape, dtype=bool)
    first[1:] = p[1:] != p[:-1]
    return order[first]


def scan_convert(points: np.ndarray, triangles: np.ndarray, width: int, height: int):
    """
    Flat 2D rasterization (used for UV-space maps).

    Args:
        points: N×2 vertex positions in pixel units
    Returns:
        (triangle id map H×W with −1 where empty, barycentrics H×W×3, skipped zero-area count)
    """
    points = np.asarray(points, dtype=np.float64)
    tris, pixels, bary, skipped = _cover(points, np.asarray(triangles, dtype=np.int64), width, height)
    win = _resolve(pixels, np.zeros(pixels.shape), tris)
    tri_id = np.full(width * height, -1, dtype=np.int64)
    out = np.zeros((width * height, 3))
    tri_id[pixels[win]] = tris[win]
    out[pixels[win]] = bary[win]
    return tri_id.reshape(height, width), out.reshape(height, width, 3), skipped


# ---------------------------------------------------------------------------
# G-buffer
# ---------------------------------------------------------------------------

@dataclass
class GBuffer:
    coverage: np.ndarray
    triangle_id: np.ndarray
    bary: np.ndarray
    screen_bary: np.ndarray
    uv: np.ndarray
    xyz: np.ndarray
    depth: np.ndarray

    @property
    def height(self) -> int:
        return self.coverage.shape[0]

    @property
    def width(self) -> int:
        return self.coverage.shape[1]

    @property
    def pixel_index(self) -> np.ndarray:
        """row-major flat indices of covered pixels"""
        return np.flatnonzero(self.coverage)

    @property
    def n_covered(self) -> int:
        return int(self.coverage.sum())


def empty_gbuffer(width: int, height: int) -> GBuffer:
    return GBuffer(
        coverage=np.zeros((height, width), dtype=bool),
        triangle_id=np.full((height, width), -1, dtype=np.int64),
        bary=np.zeros((height, width, 3)),
        screen_bary=np.zeros((height, width, 3)),
        uv=np.zeros((height, width, 2)),
        xyz=np.zeros((height, width, 3)),
        depth=np.full((height, width), np.inf),
    )


def rasterize(vertices: Union[np.ndarray, Tensor], topo: "MeshTopology", camera: Camera) -> GBuffer:
    """
    Hard z-buffered rasterization with perspective-correct attributes.

    Triangles with any vertex at or behind the 1 mm near plane are dropped whole.
    """
    v = np.asarray(vertices.data if isinstance(vertices, Tensor) else vertices, dtype=np.float64)
    if v.shape != (topo.vertex_count, 3):
        raise ValueError(f"vertices must be {topo.vertex_count}×3, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("rasterize: non-finite vertex positions")
    W, H = camera.width, camera.height
    gb = empty_gbuffer(W, H)

    sx, sy, z = project(camera, v)
    front = np.all(z[topo.triangles] > NEAR_PLANE, axis=1)
    if not front.all():
        logger.debug(f"rasterize: dropped {int((~front).sum())} triangles crossing the near plane")
    live = np.nonzero(front)[0]
    if live.size == 0:
        logger.warning("rasterize: every triangle is behind the near plane")
        return gb

    xy = np.stack([np.nan_to_num(sx), np.nan_to_num(sy)], axis=1)
    local, pixels, lam, _ = _cover(xy, topo.triangles[live], W, H)
    if pixels.size == 0:
        return gb
    tris = live[local]
    corners = topo.triangles[tris]
    inv_z = 1.0 / z[corners]
    weighted = lam * inv_z
    total = weighted.sum(axis=1)
    depth = 1.0 / total
    win = _resolve(pixels, depth, tris)

    p, c = pixels[win], corners[win]
    bary = weighted[win] / total[win, None]
    flat = lambda a: a.reshape((H * W,) + a.shape[2:])  # noqa: E731
    flat(gb.coverage)[p] = True
    flat(gb.triangle_id)[p] = tris[win]
    flat(gb.bary)[p] = bary
    flat(gb.screen_bary)[p] = lam[win]
    flat(gb.uv)[p] = np.einsum("pk,pkc->pc", bary, topo.vertex_uvs[c])
    flat(gb.xyz)[p] = np.einsum("pk,pkc->pc", bary, v[c])
    flat(gb.depth)[p] = depth[win]
    return gb


def interpolate_depth(vertices: Tensor, topo: "MeshTopology", camera: Camera, gbuffer: GBuffer) -> Tensor:
    """
    Camera-space depth per pixel, differentiable with respect to vertex
    positions with the screen barycentrics held fixed. Empty pixels read 0.
    """
    H, W = gbuffer.height, gbuffer.width
    idx = gbuffer.pixel_index
    corners = topo.triangles[gbuffer.triangle_id.reshape(-1)[idx]]
    z = dc.linear_final(vertices, Tensor(camera.R[2:3]), Tensor(camera.t[2:3]))
    z = dc.reshape(z, (topo.vertex_count,))
    lam = gbuffer.screen_bary.reshape(-1, 3)[idx]
    inv = dc.sum(dc.div(lam, z[corners]), axis=1)
    depth = dc.div(1.0, inv)
    return dc.reshape(dc.scatter_rows(depth, idx, H * W), (H, W))


def _cross(a: Tensor, b: Tensor) -> Tensor:
    ax, ay, az = a[:, :, 0:1], a[:, :, 1:2], a[:, :, 2:3]
    bx, by, bz = b[:, :, 0:1], b[:, :, 1:2], b[:, :, 2:3]
    return dc.concat([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=2)


def depth_to_normals(depth: Union[np.ndarray, Tensor], camera: Camera) -> Tuple[Tensor, np.ndarray]:
    """
    Screen-space normals from a depth map.

    A pixel is kept when it and its four neighbours hold finite positive
    depth; kept normals face the camera (n_z < 0), the rest are zero.

    Returns:
        (H×W×3 normal tensor, H×W boolean mask)
    """
    d = dc.as_tensor(depth)
    raw = d.data
    if raw.ndim != 2:
        raise dc.ShapeError("depth_to_normals", "expected an H×W depth map", depth=raw.shape)
    H, W = raw.shape
    finite = np.isfinite(raw)
    valid = finite & (raw > 0)
    if not finite.all():
        d = dc.masked_fill(d, ~finite, 0.0)

    cols, rows = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    K = camera.K
    rays = np.stack([(cols - K[0, 2]) / K[0, 0], (rows - K[1, 2]) / K[1, 1], np.ones_like(cols)], axis=-1)
    points = dc.reshape(d, (H, W, 1)) * rays

    centre = points[:-1, :-1]
    n = _cross(points[1:, :-1] - centre, points[:-1, 1:] - centre)
    n = n * np.where(n.data[:, :, 2:3] > 0, -1.0, 1.0)
    n = n / dc.sqrt(dc.sum(dc.square(n), axis=2, keepdims=True) + 1e-12)

    vp = np.pad(valid, 1)
    keep = vp[1:-1, 1:-1] & vp[1:-1, 2:] & vp[2:, 1:-1] & vp[1:-1, :-2] & vp[:-2, 1:-1]
    keep[-1, :] = False
    keep[:, -1] = False
    n = n * keep[:-1, :-1, None]
    n = dc.concat([n, np.zeros((H - 1, 1, 3))], axis=1)
    n = dc.concat([n, np.zeros((1, W, 3))], axis=0)
    return n, keep


@dataclass
class ScreenInputs:
    """per covered pixel, in row-major pixel order"""
    z: Tensor
    uv: np.ndarray
    xyz: np.ndarray
    pixel_index: np.ndarray
    height: int
    width: int


def screen_inputs(gbuffer: GBuffer, expression_map: Tensor) -> ScreenInputs:
    """
    Expression codes (or baseline RGB texels) sampled at each covered pixel's UV.

    uv and xyz are plain arrays: the colour loss reaches the expression map
    and the encodings, never the vertex positions.
    """
    if expression_map.ndim != 3:
        raise dc.ShapeError("screen_inputs", "expected an H×W×C expression map", map=expression_map.shape)
    idx = gbuffer.pixel_index
    uv = gbuffer.uv.reshape(-1, 2)[idx]
    xyz = gbuffer.xyz.reshape(-1, 3)[idx]
    z = dc.bilinear_sample(expression_map, uv)
    return ScreenInputs(z, uv, xyz, idx, gbuffer.height, gbuffer.width)


def save_gbuffer_images(gbuffer: GBuffer, directory: Union[str, Path], prefix: str = "gbuffer") -> None:
    """grayscale dumps of depth (normalized over covered pixels), coverage and triangle id"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cov = gbuffer.coverage
    depth = np.zeros(cov.shape)
    if cov.any():
        d = gbuffer.depth[cov]
        span = max(float(d.max() - d.min()), 1e-9)
        depth[cov] = 1.0 - (d - d.min()) / span
    tri = np.where(cov, gbuffer.triangle_id + 1, 0).astype(np.float64)
    tri /= max(float(tri.max()), 1.0)
    for name, channel in (("depth", depth), ("coverage", cov.astype(np.float64)), ("triangle_id", tri)):
        Image.fromarray(np.round(channel * 255).astype(np.uint8)).save(directory / f"{prefix}_{name}.png")
    logger.info(f"G-buffer images written to {directory}")
