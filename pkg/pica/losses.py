"""
Training objective: image, depth, normal, coarse-mesh, smoothness and KL
terms and their weighted sum.

Squared terms are means over their entries so the weights do not depend on
image or map resolution.
"""

import logging
from typing import Dict, Mapping, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sparse

from pica import diffcore as dc
from pica.config import LossWeights
from pica.diffcore import Tensor
from pica.geometry import MeshTopology, detail_vertex_mask, grad_xy, sample_position_map
from pica.raster import Camera, depth_to_normals

logger = logging.getLogger(__name__)

LOSS_TERMS = ("image", "depth", "normal", "mesh", "smooth", "kl")
WEIGHT_FOR = {
    "image": "lambda_i",
    "depth": "lambda_d",
    "normal": "lambda_n",
    "mesh": "lambda_m",
    "smooth": "lambda_s",
    "kl": "lambda_kl",
}

DETAIL_WEIGHT = 1.25
BASE_WEIGHT = 0.25


def laplacian_weights(topo: MeshTopology, center: Tuple[float, float], radius: float) -> np.ndarray:
    """W_L: 1.25 on detail (mouth / hair) vertices, 0.25 elsewhere"""
    return np.where(detail_vertex_mask(topo, center, radius), DETAIL_WEIGHT, BASE_WEIGHT)


def mesh_mask(topo: MeshTopology, center: Tuple[float, float], radius: float) -> np.ndarray:
    """W_M: coarse supervision is switched off inside the detail disk"""
    return ~detail_vertex_mask(topo, center, radius)


def _zero() -> Tensor:
    return Tensor(0.0)


def image_loss(I: Tensor, I_hat: Union[Tensor, np.ndarray], coverage: np.ndarray) -> Tuple[Tensor, bool]:
    """
    Mean squared colour error over covered pixels.

    Args:
        I: rendered 3×H×W image
        I_hat: target 3×H×W image
        coverage: H×W mask of pixels the predicted mesh covers
    Returns:
        (loss, whether any pixel was covered)
    """
    target = dc.as_tensor(I_hat)
    if I.shape != target.shape or I.shape[1:] != coverage.shape:
        raise dc.ShapeError("image_loss", "extents differ", rendered=I.shape, target=target.shape, coverage=coverage.shape)
    n = int(coverage.sum())
    if n == 0:
        logger.debug("image_loss: predicted mesh covers no pixel")
        return _zero(), False
    diff = dc.square(I - target) * coverage[None].astype(np.float64)
    return dc.sum(diff) * (1.0 / (3 * n)), True


def depth_loss(D: np.ndarray, D_hat: Tensor, coverage: np.ndarray, gate_mm: float = 10.0) -> Tuple[Tensor, np.ndarray]:
    """
    L1 depth error over W_D: covered pixels with valid ground truth whose
    error is below the gate.

    Returns:
        (loss, W_D)
    """
    D = np.asarray(D, dtype=np.float64)
    if D.shape != D_hat.shape or D.shape != coverage.shape:
        raise dc.ShapeError("depth_loss", "extents differ", target=D.shape, predicted=D_hat.shape)
    valid = np.isfinite(D) & (D > 0)
    target = np.where(valid, D, 0.0)
    W_D = coverage & valid & (np.abs(target - D_hat.data) < gate_mm)
    n = int(W_D.sum())
    if n == 0:
        return _zero(), W_D
    return dc.sum(dc.absolute(D_hat - target) * W_D.astype(np.float64)) * (1.0 / n), W_D


def normal_loss(D: np.ndarray, D_hat: Tensor, W_D: np.ndarray, camera: Camera) -> Tensor:
    """mean squared difference of screen-space normals over W_D and valid neighbourhoods"""
    target, target_mask = depth_to_normals(np.asarray(D, dtype=np.float64), camera)
    predicted, predicted_mask = depth_to_normals(D_hat, camera)
    mask = W_D & target_mask & predicted_mask
    n = int(mask.sum())
    if n == 0:
        return _zero()
    diff = dc.square(predicted - target.data) * mask[..., None].astype(np.float64)
    return dc.sum(diff) * (1.0 / (3 * n))


def mesh_loss(G: Tensor, M_t: np.ndarray, topo_coarse: MeshTopology, W_M: np.ndarray) -> Tensor:
    """mean over unmasked coarse vertices of the squared distance between S(G) and S(M_t)"""
    W_M = np.asarray(W_M, dtype=bool)
    n = int(W_M.sum())
    if n == 0:
        return _zero()
    predicted = sample_position_map(G, topo_coarse)
    target = sample_position_map(Tensor(M_t), topo_coarse).data
    per_vertex = dc.sum(dc.square(predicted - target), axis=1)
    return dc.sum(per_vertex * W_M.astype(np.float64)) * (1.0 / n)


def smoothness_loss(
    G: Tensor,
    topo_dense: MeshTopology,
    L: sparse.spmatrix,
    W_L: np.ndarray,
    V_mu: np.ndarray,
    lambda_g: float = 1.0,
    lambda_l: float = 0.1,
) -> Tensor:
    """λ_g (mean Dx² + mean Dy²) + λ_l mean((W_L · L (S(G) − V_mu))²)"""
    dx, dy = grad_xy(G)
    gradient_term = dc.mean(dc.square(dx)) + dc.mean(dc.square(dy))
    offset = sample_position_map(G, topo_dense) - np.asarray(V_mu)
    lap = dc.sparse_matmul(L, offset) * np.asarray(W_L, dtype=np.float64)[:, None]
    return gradient_term * lambda_g + dc.mean(dc.square(lap)) * lambda_l


def kl_loss(mu: Union[Tensor, Sequence[Tensor]], logvar: Union[Tensor, Sequence[Tensor]]) -> Tensor:
    """−0.5 Σ(1 + logvar − mu² − exp(logvar)) summed over the code, averaged over the batch"""
    mus = [mu] if isinstance(mu, Tensor) else list(mu)
    logvars = [logvar] if isinstance(logvar, Tensor) else list(logvar)
    if len(mus) != len(logvars) or not mus:
        raise ValueError("kl_loss needs matching, non-empty mu and logvar batches")
    total = _zero()
    for m, lv in zip(mus, logvars):
        if m.shape != lv.shape:
            raise dc.ShapeError("kl_loss", "mu and logvar differ", mu=m.shape, logvar=lv.shape)
        total = total + dc.sum(1.0 + lv - dc.square(m) - dc.exp(lv)) * -0.5
    return total * (1.0 / len(mus))


def total_loss(parts: Mapping[str, Union[Tensor, float]], weights: LossWeights) -> Tensor:
    """weighted sum of whichever terms are present"""
    unknown = set(parts) - set(LOSS_TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    total = _zero()
    for term in LOSS_TERMS:
        if term in parts:
            total = total + dc.as_tensor(parts[term]) * getattr(weights, WEIGHT_FOR[term])
    return total


def breakdown(parts: Mapping[str, Union[Tensor, float]]) -> Dict[str, float]:
    """plain floats for logging"""
    return {k: float(v.item() if isinstance(v, Tensor) else v) for k, v in parts.items()}
