"""
Mesh topology, position maps and the regularisation operators built on them.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import scipy.sparse as sparse
from scipy.ndimage import distance_transform_edt

from pica import diffcore as dc
from pica.diffcore import Tensor

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
COT_CLAMP = 1e4


@dataclass
class MeshTopology:
    """Triangle connectivity with one UV coordinate per vertex."""
    vertex_uvs: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertex_uvs = np.asarray(self.vertex_uvs, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.vertex_uvs.ndim != 2 or self.vertex_uvs.shape[1] != 2:
            raise ValueError(f"vertex_uvs must be N×2, got {self.vertex_uvs.shape}")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError(f"triangles must be T×3, got {self.triangles.shape}")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= self.vertex_count):
            raise ValueError("triangle index out of range")
        t = self.triangles
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise ValueError("degenerate triangle (repeated vertex index)")
        if np.any(self.vertex_uvs < 0.0) or np.any(self.vertex_uvs > 1.0):
            raise ValueError("vertex UVs must lie in [0, 1]")

    @property
    def vertex_count(self) -> int:
        return self.vertex_uvs.shape[0]

    @property
    def triangle_count(self) -> int:
        return self.triangles.shape[0]

    def edges(self) -> np.ndarray:
        """unique undirected edges, lower index first"""
        t = self.triangles
        e = np.concatenate([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]])
        return np.unique(np.sort(e, axis=1), axis=0)


@dataclass
class RegularizationTarget:
    v_mu: np.ndarray
    rate: float = 1e-4


def make_grid_topology(rows: int, cols: int, uv_margin: float = 0.0) -> MeshTopology:
    """
    Regular rows×cols vertex grid over [margin, 1 − margin]², two triangles
    per cell, all wound the same way.
    """
    if rows < 2 or cols < 2:
        raise ValueError(f"grid needs at least 2×2 vertices, got {rows}×{cols}")
    if not 0.0 <= uv_margin < 0.5:
        raise ValueError("uv_margin must lie in [0, 0.5)")
    u = np.linspace(uv_margin, 1.0 - uv_margin, cols)
    v = np.linspace(uv_margin, 1.0 - uv_margin, rows)
    uu, vv = np.meshgrid(u, v)
    uvs = np.stack([uu.ravel(), vv.ravel()], axis=1)

    r, c = np.meshgrid(np.arange(rows - 1), np.arange(cols - 1), indexing="ij")
    a = (r * cols + c).ravel()
    b = a + 1
    d = a + cols
    e = d + 1
    triangles = np.concatenate([np.stack([a, d, b], axis=1), np.stack([b, d, e], axis=1)])
    return MeshTopology(uvs, triangles)


def detail_vertex_mask(topo: MeshTopology, center: Tuple[float, float], radius: float) -> np.ndarray:
    """vertices whose UV lies inside the detail disk (mouth / hair region)"""
    offset = topo.vertex_uvs - np.asarray(center, dtype=np.float64)
    return np.einsum("ij,ij->i", offset, offset) <= radius * radius


def sample_position_map(position_map: Tensor, topo: MeshTopology) -> Tensor:
    """vertex positions read bilinearly from an H×W×3 position map"""
    if position_map.ndim != 3 or position_map.shape[2] != 3:
        raise dc.ShapeError("sample_position_map", "expected an H×W×3 map", map=position_map.shape)
    return dc.bilinear_sample(position_map, topo.vertex_uvs)


def mesh_to_position_map(positions: Union[np.ndarray, Tensor], topo: MeshTopology, out_resolution: int) -> np.ndarray:
    """
    Rasterize the mesh in UV space into an R×R×3 position map.

    Covered texels carry the barycentric interpolation of vertex positions;
    every other texel copies its nearest covered texel.
    """
    # deferred: raster imports this module
    from pica.raster import scan_convert

    xyz = np.asarray(positions.data if isinstance(positions, Tensor) else positions, dtype=np.float64)
    if xyz.shape != (topo.vertex_count, 3):
        raise ValueError(f"positions must be {topo.vertex_count}×3, got {xyz.shape}")
    R = int(out_resolution)
    tri_id, bary, skipped = scan_convert(topo.vertex_uvs * R, topo.triangles, R, R)
    if skipped:
        logger.warning(f"mesh_to_position_map: skipped {skipped} zero-area UV triangles")
    covered = tri_id >= 0
    if not covered.any():
        raise ValueError("mesh covers no texel of the position map")

    out = np.zeros((R, R, 3), dtype=np.float64)
    corners = topo.triangles[tri_id[covered]]
    out[covered] = np.einsum("pk,pkc->pc", bary[covered], xyz[corners])
    if not covered.all():
        _, (iy, ix) = distance_transform_edt(~covered, return_indices=True)
        out = out[iy, ix]
    return out


def cotangent_laplacian(topo: MeshTopology, neutral_positions: np.ndarray) -> sparse.csr_matrix:
    """
    Cotangent Laplacian with positive diagonal.

    Interior edges weigh (cot α + cot β) / 2; boundary edges weigh the cot of
    their single opposite angle. Cotangents of triangles with area below
    1e-12 mm² are clamped to ±1e4.
    """
    v = np.asarray(neutral_positions, dtype=np.float64)
    if v.shape != (topo.vertex_count, 3):
        raise ValueError(f"neutral positions must be {topo.vertex_count}×3, got {v.shape}")
    n = topo.vertex_count
    t = topo.triangles

    rows, cols, weights = [], [], []
    clamped = 0
    for k in range(3):
        i, j, o = t[:, (k + 1) % 3], t[:, (k + 2) % 3], t[:, k]
        a = v[i] - v[o]
        b = v[j] - v[o]
        cross = np.linalg.norm(np.cross(a, b), axis=1)
        dot = np.einsum("ij,ij->i", a, b)
        degenerate = 0.5 * cross < DEGENERATE_AREA
        with np.errstate(divide="ignore", invalid="ignore"):
            cot = np.where(degenerate, 0.0, dot / np.where(degenerate, 1.0, cross))
        cot = np.where(degenerate, np.clip(np.sign(dot) * COT_CLAMP, -COT_CLAMP, COT_CLAMP), cot)
        clamped += int(degenerate.sum())
        rows.append(np.minimum(i, j))
        cols.append(np.maximum(i, j))
        weights.append(0.5 * cot)
    if clamped:
        logger.warning(f"cotangent_laplacian: clamped {clamped} cotangents of degenerate triangles")

    rows, cols, weights = np.concatenate(rows), np.concatenate(cols), np.concatenate(weights)
    upper = sparse.coo_matrix((weights, (rows, cols)), shape=(n, n)).tocsr()
    # edges seen by a single triangle take the full cotangent
    counts = sparse.coo_matrix((np.ones_like(weights), (rows, cols)), shape=(n, n)).tocsr()
    boundary = counts.copy()
    boundary.data = np.where(counts.data == 1, 2.0, 1.0)
    upper = upper.multiply(boundary).tocsr()

    w = upper + upper.T
    degree = np.asarray(w.sum(axis=1)).ravel()
    return (sparse.diags(degree) - w).tocsr()


def grad_xy(position_map: Tensor) -> Tuple[Tensor, Tensor]:
    """forward differences along x (columns) and y (rows); last column/row are zero"""
    if position_map.ndim != 3 or position_map.shape[0] < 2 or position_map.shape[1] < 2:
        raise dc.ShapeError("grad_xy", "expected an H×W×C map with H, W >= 2", map=position_map.shape)
    H, W, C = position_map.shape
    dx = position_map[:, 1:] - position_map[:, :-1]
    dy = position_map[1:] - position_map[:-1]
    dx = dc.concat([dx, np.zeros((H, 1, C))], axis=1)
    dy = dc.concat([dy, np.zeros((1, W, C))], axis=0)
    return dx, dy


def ema_update(target: RegularizationTarget, batch_vertex_positions: Union[np.ndarray, Tensor]) -> RegularizationTarget:
    """V_mu <- (1 − rate) V_mu + rate · batch mean; never on the tape"""
    batch = batch_vertex_positions.data if isinstance(batch_vertex_positions, Tensor) else batch_vertex_positions
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[None]
    if batch.shape[1:] != target.v_mu.shape:
        raise ValueError(f"batch positions {batch.shape} do not match target {target.v_mu.shape}")
    mean = batch.mean(axis=0)
    return RegularizationTarget((1.0 - target.rate) * target.v_mu + target.rate * mean, target.rate)


def write_obj(path: Union[str, Path], positions: np.ndarray, topo: MeshTopology) -> None:
    """Wavefront export: v, vt and 1-based f v/vt lines"""
    xyz = np.asarray(positions, dtype=np.float64)
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in xyz]
    lines += [f"vt {u:.6f} {v:.6f}" for u, v in topo.vertex_uvs]
    lines += [f"f {a}/{a} {b}/{b} {c}/{c}" for a, b, c in topo.triangles + 1]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_obj(path: Union[str, Path]) -> Tuple[np.ndarray, MeshTopology]:
    """read a mesh written by write_obj (one vt per v, shared indices)"""
    positions, uvs, faces = [], [], []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "v":
            positions.append([float(p) for p in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(p) for p in parts[1:3]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(uvs) != len(positions):
        raise ValueError(f"{path}: expected one vt per vertex ({len(uvs)} vs {len(positions)})")
    return positions, MeshTopology(np.asarray(uvs).reshape(-1, 2), np.asarray(faces).reshape(-1, 3))


def neutral_target(positions: np.ndarray, rate: float = 1e-4) -> RegularizationTarget:
    """regularisation target initialised at a neutral mesh"""
    return RegularizationTarget(np.array(positions, dtype=np.float64), rate)
