"""
Synthetic multiview RGB-D capture of a deforming, textured face proxy.

Every frame draws its expression parameters from a generator seeded with
(seed, frame), so frames can be produced in any order with identical output.
"""

import functools
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from scipy.ndimage import distance_transform_edt, gaussian_filter, map_coordinates
from tqdm import tqdm

from pica import diffcore as dc
from pica.config import SceneConfig, TexturePattern
from pica.geometry import MeshTopology, detail_vertex_mask, make_grid_topology, mesh_to_position_map
from pica.raster import Camera, GBuffer, look_at, project, rasterize

logger = logging.getLogger(__name__)

DEPTH_MAGIC = b"PICD"
FACE_WIDTH = 180.0
FACE_HEIGHT = 220.0
FACE_TARGET = (0.0, 0.0, 20.0)
LIGHT = np.array([0.3, 0.5, 1.0]) / np.linalg.norm([0.3, 0.5, 1.0])
SHININESS = 32.0
OCCLUSION_TOLERANCE_MM = 5.0
VIEW_GROUPS = ("Front", "Up", "Down", "Left", "Right")


class DatasetError(OSError):
    pass


# ---------------------------------------------------------------------------
# Surface and appearance
# ---------------------------------------------------------------------------

@dataclass
class BumpBasis:
    """Gaussian displacement bumps along z, one per expression parameter"""
    centers: np.ndarray
    sigmas: np.ndarray
    amplitudes: np.ndarray


def make_basis(config: SceneConfig) -> BumpBasis:
    """bump 0 is the mouth cavity at the detail centre; the rest are seeded"""
    rng = np.random.default_rng([config.seed, 0x5EED])
    k = config.expression_dim
    centers = rng.uniform(0.2, 0.8, (k, 2))
    sigmas = rng.uniform(0.05, 0.12, k)
    amplitudes = rng.uniform(4.0, 10.0, k) * rng.choice([-1.0, 1.0], k)
    centers[0] = config.detail_center
    sigmas[0] = 0.5 * config.detail_radius
    amplitudes[0] = -15.0
    return BumpBasis(centers, sigmas, amplitudes)


def base_surface(uv: np.ndarray) -> np.ndarray:
    """open paraboloid patch about 200 mm across, facing +z"""
    x = (uv[:, 0] - 0.5) * FACE_WIDTH
    y = (0.5 - uv[:, 1]) * FACE_HEIGHT
    z = 60.0 - 0.004 * x * x - 0.0025 * y * y
    return np.stack([x, y, z], axis=1)


def generate_surface(params: np.ndarray, config: SceneConfig, uv: Optional[np.ndarray] = None,
                     basis: Optional[BumpBasis] = None) -> np.ndarray:
    """
    Dense vertex positions (mm) for one set of expression parameters.

    Linear in params: base patch plus Σ params_j · bump_j.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (config.expression_dim,):
        raise ValueError(f"expected {config.expression_dim} expression parameters, got {params.shape}")
    if uv is None:
        uv = surface_topology(config).vertex_uvs
    basis = basis or make_basis(config)
    out = base_surface(uv)
    d2 = ((uv[:, None, :] - basis.centers[None]) ** 2).sum(axis=2)
    bumps = np.exp(-d2 / (2.0 * basis.sigmas ** 2)) * basis.amplitudes
    out[:, 2] += bumps @ params
    return out


def surface_topology(config: SceneConfig) -> MeshTopology:
    return make_grid_topology(config.surface_grid, config.surface_grid, config.uv_margin)


def frame_parameters(config: SceneConfig, frame: int) -> np.ndarray:
    return np.random.default_rng([config.seed, frame]).uniform(-1.0, 1.0, config.expression_dim)


def texture_color(uv: np.ndarray, params: np.ndarray, pattern: TexturePattern) -> np.ndarray:
    """procedural albedo: checker skin, striped hair band, expression-driven blotch"""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    base = np.asarray(pattern.base_color)[None, :]
    cells = np.floor(uv * pattern.checker_cells).astype(np.int64)
    checker = np.where((cells[:, 0] + cells[:, 1]) % 2 == 0, 1.0, -1.0)
    color = base * (1.0 + pattern.checker_contrast * checker)[:, None]

    lo, hi = pattern.stripe_band
    hair = (uv[:, 1] >= lo) & (uv[:, 1] < hi)
    stripes = 0.3 + 0.3 * (0.5 + 0.5 * np.sin(2.0 * np.pi * pattern.stripe_frequency * uv[:, 0]))
    color = np.where(hair[:, None], color * stripes[:, None], color)

    strength = float(np.clip(0.5 + 0.5 * params[1], 0.0, 1.0)) if len(params) > 1 else 0.0
    r = np.linalg.norm(uv - np.asarray(pattern.blotch_center), axis=1) / pattern.blotch_radius
    alpha = strength * np.clip(1.0 - r * r, 0.0, 1.0)
    blotch = np.array([0.85, 0.3, 0.3])
    color = color * (1.0 - alpha[:, None]) + blotch * alpha[:, None]
    return np.clip(color, 0.0, 1.0)


def shade(points: np.ndarray, normals: np.ndarray, uv: np.ndarray, view_dirs: np.ndarray,
          params: np.ndarray, pattern: TexturePattern) -> np.ndarray:
    """
    albedo · (0.3 + 0.7·max(0, n·l)) + 0.2·max(0, n·h)^32, clamped to [0, 1]

    Args:
        points: surface points, P×3 (the light is directional)
        normals, view_dirs: unit vectors, P×3
    """
    albedo = texture_color(uv, params, pattern)
    diffuse = np.maximum(0.0, normals @ LIGHT)
    half = LIGHT[None, :] + view_dirs
    half /= np.maximum(np.linalg.norm(half, axis=1, keepdims=True), 1e-12)
    specular = np.maximum(0.0, np.einsum("ij,ij->i", normals, half)) ** SHININESS
    rgb = albedo * (0.3 + 0.7 * diffuse)[:, None] + 0.2 * specular[:, None]
    return np.clip(rgb, 0.0, 1.0)


def vertex_normals(positions: np.ndarray, topo: MeshTopology) -> np.ndarray:
    """area-weighted vertex normals oriented toward +z"""
    t = topo.triangles
    face = np.cross(positions[t[:, 1]] - positions[t[:, 0]], positions[t[:, 2]] - positions[t[:, 0]])
    if face[:, 2].sum() < 0:
        face = -face
    normals = np.zeros_like(positions)
    for k in range(3):
        np.add.at(normals, t[:, k], face)
    return normals / np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

def camera_angles(config: SceneConfig) -> List[Tuple[float, float]]:
    """(yaw, pitch) in degrees: camera 0 frontal, the rest on an ellipse"""
    angles = [(0.0, 0.0)]
    n = config.n_cameras - 1
    for c in range(n):
        a = 2.0 * np.pi * c / n
        angles.append((config.yaw_range_deg * np.cos(a), config.pitch_range_deg * np.sin(a)))
    return angles


def view_group(yaw: float, pitch: float, yaw_range: float, pitch_range: float) -> str:
    a = yaw / max(yaw_range, 1e-9)
    b = pitch / max(pitch_range, 1e-9)
    if np.hypot(a, b) < 0.5:
        return "Front"
    if abs(a) >= abs(b):
        return "Right" if a > 0 else "Left"
    return "Up" if b > 0 else "Down"


def orbit_camera(yaw_deg: float, pitch_deg: float, distance: float, image_size: int,
                 focal_factor: float = 1.6) -> Camera:
    """camera on a sphere around the face target, looking at it"""
    yaw, pitch = np.radians(yaw_deg), np.radians(pitch_deg)
    direction = np.array([np.sin(yaw) * np.cos(pitch), np.sin(pitch), np.cos(yaw) * np.cos(pitch)])
    eye = np.asarray(FACE_TARGET) + distance * direction
    return look_at(eye, FACE_TARGET, focal_factor * image_size, image_size, image_size)


def make_cameras(config: SceneConfig) -> List[Camera]:
    return [
        orbit_camera(yaw, pitch, config.camera_distance, config.image_size, config.focal_factor)
        for yaw, pitch in camera_angles(config)
    ]


# ---------------------------------------------------------------------------
# Rendering and derived inputs
# ---------------------------------------------------------------------------

@dataclass
class FrameSample:
    frame: int
    params: np.ndarray
    images: Dict[int, np.ndarray] = field(default_factory=dict)
    depths: Dict[int, Optional[np.ndarray]] = field(default_factory=dict)
    coarse_posmap: Optional[np.ndarray] = None
    avg_texture: Optional[np.ndarray] = None


def render_view(positions: np.ndarray, topo: MeshTopology, camera: Camera, params: np.ndarray,
                config: SceneConfig, normals: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, GBuffer]:
    """shaded H×W×3 image and metric depth (inf where empty) of one surface"""
    gb = rasterize(positions, topo, camera)
    image = np.full((camera.height, camera.width, 3), config.background, dtype=np.float64)
    if gb.n_covered:
        normals = vertex_normals(positions, topo) if normals is None else normals
        cov = gb.coverage
        corners = topo.triangles[gb.triangle_id[cov]]
        n = np.einsum("pk,pkc->pc", gb.bary[cov], normals[corners])
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        xyz = gb.xyz[cov]
        view = camera.center[None, :] - xyz
        view /= np.linalg.norm(view, axis=1, keepdims=True)
        image[cov] = shade(xyz, n, gb.uv[cov], view, params, config.texture)
    return image, gb.depth.copy(), gb


def render_ground_truth(config: SceneConfig, frame: int, cameras: Optional[Sequence[Camera]] = None) -> FrameSample:
    """images and depths of the true surface from every camera"""
    cameras = cameras or make_cameras(config)
    topo = surface_topology(config)
    params = frame_parameters(config, frame)
    positions = generate_surface(params, config, topo.vertex_uvs)
    normals = vertex_normals(positions, topo)
    sample = FrameSample(frame, params)
    for c, cam in enumerate(cameras):
        image, depth, gb = render_view(positions, topo, cam, params, config, normals)
        if gb.n_covered == 0:
            raise ValueError(f"camera {c} does not see the surface")
        sample.images[c] = image
        sample.depths[c] = depth
    return sample


def _grid_field(positions: np.ndarray, config: SceneConfig) -> np.ndarray:
    g = config.surface_grid
    return positions.reshape(g, g, 3)


def make_coarse_mesh(positions: np.ndarray, config: SceneConfig) -> np.ndarray:
    """
    Smoothed, subsampled tracking mesh as an R×R×3 position map.

    The residual after a quadratic fit in UV is low-passed (σ = 4 position-map
    texels) and smoothed three times harder inside the detail disk before
    the coarse grid samples it.
    """
    g = config.surface_grid
    R = config.posmap_resolution
    field_ = _grid_field(np.asarray(positions, dtype=np.float64), config)
    topo = surface_topology(config)
    uv = topo.vertex_uvs
    u, v = uv[:, 0], uv[:, 1]
    # the quadratic trend stays exact; only the residual is low-passed
    design = np.stack([u * u, u * v, v * v, u, v, np.ones_like(u)], axis=1)
    coeffs, *_ = np.linalg.lstsq(design, field_.reshape(-1, 3), rcond=None)
    trend = (design @ coeffs).reshape(g, g, 3)
    residual = field_ - trend

    sigma = 4.0 * (g - 1) / R
    light = gaussian_filter(residual, sigma=(sigma, sigma, 0), mode="nearest")
    heavy = gaussian_filter(residual, sigma=(3 * sigma, 3 * sigma, 0), mode="nearest")
    disk = detail_vertex_mask(topo, config.detail_center, config.detail_radius).reshape(g, g)
    smooth = trend + np.where(disk[..., None], heavy, light)

    coarse = coarse_topology(config)
    span = 1.0 - 2.0 * config.uv_margin
    grid_coords = (coarse.vertex_uvs - config.uv_margin) / span * (g - 1)
    rows, cols = grid_coords[:, 1], grid_coords[:, 0]
    coarse_positions = np.stack(
        [map_coordinates(smooth[..., c], [rows, cols], order=1, mode="nearest") for c in range(3)], axis=1
    )
    return mesh_to_position_map(coarse_positions, coarse, R)


def coarse_topology(config: SceneConfig) -> MeshTopology:
    return make_grid_topology(config.coarse_grid, config.coarse_grid, config.uv_margin)


def unproject_average_texture(images: Sequence[np.ndarray], depths: Sequence[np.ndarray], cameras: Sequence[Camera],
                              coarse_posmap: np.ndarray, texture_resolution: int) -> np.ndarray:
    """
    Average of the camera colours seen at each texel's coarse-surface point.

    Samples more than 5 mm off the camera's rendered depth count as occluded;
    texels no camera sees copy the nearest seen texel.
    """
    if not cameras:
        raise ValueError("unproject_average_texture needs at least one camera")
    T = int(texture_resolution)
    centers = (np.arange(T) + 0.5) / T
    uu, vv = np.meshgrid(centers, centers)
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    with dc.precision(np.float64):
        points = dc.bilinear_sample(dc.Tensor(coarse_posmap), uv).data

    total = np.zeros((T * T, 3))
    count = np.zeros(T * T)
    for image, depth, cam in zip(images, depths, cameras):
        sx, sy, z = project(cam, points)
        inside = np.isfinite(sx) & (sx >= 0) & (sx < cam.width) & (sy >= 0) & (sy < cam.height)
        px = np.clip(np.floor(np.nan_to_num(sx)).astype(np.int64), 0, cam.width - 1)
        py = np.clip(np.floor(np.nan_to_num(sy)).astype(np.int64), 0, cam.height - 1)
        seen = inside & (np.abs(depth[py, px] - z) < OCCLUSION_TOLERANCE_MM)
        if not seen.any():
            continue
        coords = np.stack([sx[seen] / cam.width, sy[seen] / cam.height], axis=1)
        with dc.precision(np.float64):
            colors = dc.bilinear_sample(dc.Tensor(image), coords).data
        total[seen] += colors
        count[seen] += 1

    seen = count > 0
    if not seen.any():
        logger.warning("unproject_average_texture: no texel was seen by any camera")
        return np.full((T, T, 3), 0.5)
    out = np.zeros((T * T, 3))
    out[seen] = total[seen] / count[seen, None]
    out = out.reshape(T, T, 3)
    hidden = ~seen.reshape(T, T)
    if hidden.any():
        _, (iy, ix) = distance_transform_edt(hidden, return_indices=True)
        out = out[iy, ix]
    return out


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_depth(path: Union[str, Path], values: np.ndarray) -> None:
    """'PICD', u32 width, u32 height, then little-endian float32 rows (channels interleaved)"""
    values = np.ascontiguousarray(values, dtype="<f4")
    H, W = values.shape[:2]
    try:
        with open(path, "wb") as f:
            f.write(DEPTH_MAGIC)
            f.write(struct.pack("<II", W, H))
            f.write(values.tobytes())
    except OSError as e:
        raise DatasetError(f"cannot write {path}: {e}") from e


def read_depth(path: Union[str, Path]) -> np.ndarray:
    """H×W for one channel, H×W×C otherwise (C inferred from the payload size)"""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    if blob[:4] != DEPTH_MAGIC or len(blob) < 12:
        raise DatasetError(f"{path}: not a depth/position-map file")
    W, H = struct.unpack_from("<II", blob, 4)
    payload = (len(blob) - 12) // 4
    if H * W == 0 or payload % (H * W):
        raise DatasetError(f"{path}: payload size does not match {W}×{H}")
    channels = payload // (H * W)
    data = np.frombuffer(blob, dtype="<f4", offset=12).astype(np.float32)
    return data.reshape(H, W) if channels == 1 else data.reshape(H, W, channels)


def write_png(path: Union[str, Path], image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(arr).save(path)
    except OSError as e:
        raise DatasetError(f"cannot write {path}: {e}") from e


def read_png(path: Union[str, Path]) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255.0)
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e


def has_depth(config: SceneConfig, frame: int) -> bool:
    """evenly spread deterministic subset of depth_fraction of the frames"""
    f = config.depth_fraction
    return int(np.floor((frame + 1) * f + 1e-9)) > int(np.floor(frame * f + 1e-9))


def frame_dir(root: Union[str, Path], frame: int) -> Path:
    return Path(root) / "frames" / f"{frame:04d}"


def write_dataset(config: SceneConfig, out_dir: Union[str, Path], progress: bool = True) -> Path:
    """
    Generate every frame and write the dataset layout:

        scene.json, neutral.posmap
        frames/FFFF/camCC.png, camCC.depth, coarse.posmap, avgtex.png, expr.json
    """
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create {root}: {e}") from e
    cameras = make_cameras(config)
    angles = camera_angles(config)
    train_cams = config.train_cameras()
    topo = surface_topology(config)
    basis = make_basis(config)

    neutral = generate_surface(np.zeros(config.expression_dim), config, topo.vertex_uvs, basis)
    write_depth(root / "neutral.posmap", make_coarse_mesh(neutral, config))

    frames = []
    for frame in tqdm(range(config.n_frames), desc="frames", disable=not progress):
        sample = render_ground_truth(config, frame, cameras)
        positions = generate_surface(sample.params, config, topo.vertex_uvs, basis)
        coarse = make_coarse_mesh(positions, config)
        avg = unproject_average_texture(
            [sample.images[c] for c in train_cams],
            [sample.depths[c] for c in train_cams],
            [cameras[c] for c in train_cams],
            coarse,
            config.texture_resolution,
        )
        d = frame_dir(root, frame)
        d.mkdir(parents=True, exist_ok=True)
        with_depth = has_depth(config, frame)
        for c in range(config.n_cameras):
            write_png(d / f"cam{c:02d}.png", sample.images[c])
            if with_depth:
                write_depth(d / f"cam{c:02d}.depth", sample.depths[c])
        write_depth(d / "coarse.posmap", coarse)
        write_png(d / "avgtex.png", avg)
        (d / "expr.json").write_text(json.dumps({"frame": frame, "params": sample.params.tolist()}), encoding="utf-8")
        frames.append({"frame": frame, "split": "test" if config.is_test_frame(frame) else "train", "depth": with_depth})

    scene = {
        "format": 1,
        "config": json.loads(config.model_dump_json()),
        "cameras": [
            dict(cam.to_dict(), index=c, yaw=a[0], pitch=a[1],
                 group=view_group(a[0], a[1], config.yaw_range_deg, config.pitch_range_deg),
                 holdout=c in config.holdout_cameras)
            for c, (cam, a) in enumerate(zip(cameras, angles))
        ],
        "detail_region": {"center": list(config.detail_center), "radius": config.detail_radius},
        "frames": frames,
    }
    (root / "scene.json").write_text(json.dumps(scene, indent=2), encoding="utf-8")
    logger.info(f"Dataset written: {root} ({config.n_frames} frames × {config.n_cameras} cameras)")
    return root


class Dataset:
    """
    Read-side view of a directory written by write_dataset.

    Decoded frames are kept in an LRU cache of cache_size entries
    (PICA_FRAME_CACHE, default 32; 0 disables caching).
    """

    def __init__(self, root: Union[str, Path], cache_size: Optional[int] = None):
        self.root = Path(root)
        scene_file = self.root / "scene.json"
        if not scene_file.exists():
            raise DatasetError(f"no scene.json in {self.root}")
        try:
            self.scene = json.loads(scene_file.read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise DatasetError(f"cannot parse {scene_file}: {e}") from e
        self.config = SceneConfig.model_validate(self.scene["config"])
        self.cameras = [Camera.from_dict(c) for c in self.scene["cameras"]]
        self.groups = [c["group"] for c in self.scene["cameras"]]
        self._frames = {f["frame"]: f for f in self.scene["frames"]}
        if cache_size is None:
            cache_size = int(os.getenv("PICA_FRAME_CACHE", "32"))
        if cache_size < 0:
            raise ValueError(f"frame cache size must be >= 0, got {cache_size}")
        self.cache_size = cache_size
        self._cached_read = functools.lru_cache(maxsize=cache_size)(self._read_frame)

    @property
    def n_frames(self) -> int:
        return len(self._frames)

    def frames(self, split: Optional[str] = None) -> List[int]:
        return [f for f, meta in sorted(self._frames.items()) if split in (None, "all") or meta["split"] == split]

    def train_cameras(self) -> List[int]:
        return [c["index"] for c in self.scene["cameras"] if not c["holdout"]]

    def neutral_posmap(self) -> np.ndarray:
        return read_depth(self.root / "neutral.posmap").astype(np.float64)

    def load_frame(self, frame: int) -> FrameSample:
        if frame not in self._frames:
            raise DatasetError(f"frame {frame} not in dataset {self.root}")
        return self._cached_read(frame)

    def cache_info(self):
        return self._cached_read.cache_info()

    def _read_frame(self, frame: int) -> FrameSample:
        d = frame_dir(self.root, frame)
        meta = json.loads((d / "expr.json").read_text(encoding="utf-8"))
        sample = FrameSample(frame, np.asarray(meta["params"]))
        for c in range(len(self.cameras)):
            sample.images[c] = read_png(d / f"cam{c:02d}.png")
            path = d / f"cam{c:02d}.depth"
            sample.depths[c] = read_depth(path).astype(np.float64) if self._frames[frame]["depth"] else None
        sample.coarse_posmap = read_depth(d / "coarse.posmap").astype(np.float64)
        sample.avg_texture = read_png(d / "avgtex.png")
        logger.debug(f"Loaded frame {frame} from {d}")
        return sample
