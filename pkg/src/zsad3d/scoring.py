"""Similarity-based classification and segmentation.

Views are classified by a temperature softmax over the cosine similarity of
their global feature with the normal and anomaly text embeddings.  Patch
features get the same two-way softmax, are bilinearly upsampled to the image,
smoothed with a Gaussian, and finally back-projected onto the points.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F

from .errors import ScoringError
from .projection import ViewSet, backprojection_matrix

TEMPERATURE = 0.07
SIGMA = 4.0
TRUNCATE = 4.0


@dataclass
class FeaturePack:
    """Per-view features handed to the scorer; ``global_``/``local`` are the
    ones compared against text (fused in stage 2, rendered-only in stage 1)."""

    global_: torch.Tensor  # (v, d)
    local: torch.Tensor  # (v, p, d)
    grid: tuple
    global_render: torch.Tensor | None = None
    local_render: torch.Tensor | None = None
    global_depth: torch.Tensor | None = None
    local_depth: torch.Tensor | None = None


@dataclass
class ScoreResult:
    per_view_prob: np.ndarray
    object_prob: float
    maps_normal: np.ndarray
    maps_anomaly: np.ndarray
    maps_final: np.ndarray
    point_scores: np.ndarray


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ScoringError("cosine similarity of a zero-norm vector")
    return (a * b).sum(dim=-1) / (na * nb)


def two_way_softmax(features, normal_text, anomaly_text, tau: float):
    """Probability of the anomaly class for each feature vector."""
    logits = torch.stack([cosine(features, normal_text), cosine(features, anomaly_text)], dim=-1)
    return (logits / tau).softmax(dim=-1)[..., 1]


def classify_view(global_feature, normal_text, anomaly_text, tau: float = TEMPERATURE):
    if tau <= 0:
        raise ScoringError(f"temperature must be positive, got {tau}")
    return two_way_softmax(global_feature, normal_text, anomaly_text, tau)


def upsample(grid_maps: torch.Tensor, size) -> torch.Tensor:
    """Bilinear upsampling of (..., rows, cols) maps with pixel-centre alignment."""
    lead = grid_maps.shape[:-2]
    x = grid_maps.reshape(-1, 1, *grid_maps.shape[-2:])
    x = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)
    return x.reshape(*lead, *size)


def gaussian_kernel(sigma: float, truncate: float = TRUNCATE, dtype=torch.float64) -> torch.Tensor:
    radius = int(truncate * sigma + 0.5)
    x = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return (k / k.sum()).to(dtype)


def mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Fold indices into [0, n) by reflection about the edge samples (d c b | a b c d | c b a)."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx > n - 1, period - idx, idx)


@lru_cache(maxsize=32)
def _gaussian_matrix(n: int, sigma: float, truncate: float) -> np.ndarray:
    k = gaussian_kernel(sigma, truncate).numpy()
    r = (len(k) - 1) // 2
    rows = np.repeat(np.arange(n), len(k))
    cols = mirror_index(rows + np.tile(np.arange(-r, r + 1), n), n)
    mat = np.zeros((n, n))
    np.add.at(mat, (rows, cols), np.tile(k, n))
    mat.setflags(write=False)
    return mat


def gaussian_matrix(n: int, sigma: float, truncate: float = TRUNCATE, dtype=torch.float64) -> torch.Tensor:
    """(n, n) operator applying the 1-D mirrored Gaussian along one axis."""
    return torch.tensor(_gaussian_matrix(int(n), float(sigma), float(truncate)), dtype=dtype)


def gaussian_filter(maps: torch.Tensor, sigma: float = SIGMA, truncate: float = TRUNCATE) -> torch.Tensor:
    """Separable Gaussian smoothing of (..., h, w) maps, mirrored at the border.

    Each axis is filtered by a dense banded matrix; at these image sizes that
    is much faster to differentiate than a convolution.
    """
    if sigma <= 0:
        return maps
    h, w = maps.shape[-2:]
    rows = gaussian_matrix(h, sigma, truncate, maps.dtype)
    cols = gaussian_matrix(w, sigma, truncate, maps.dtype)
    return rows @ maps @ cols.T


def segment_view(local_features, normal_text, anomaly_text, grid, resolution,
                 tau: float = TEMPERATURE, sigma: float = SIGMA):
    """Return (normal map, anomaly map, smoothed composite map) at image resolution.

    ``local_features`` is (..., p, d); the text embeddings broadcast over patches.
    """
    prob = two_way_softmax(local_features, normal_text.unsqueeze(-2), anomaly_text.unsqueeze(-2), tau)
    anomaly = upsample(prob.reshape(*prob.shape[:-1], *grid), resolution)
    normal = upsample((1.0 - prob).reshape(*prob.shape[:-1], *grid), resolution)
    composite = 0.5 * (1.0 - normal) + 0.5 * anomaly
    return normal, anomaly, gaussian_filter(composite, sigma)


def sparse_operator(matrix: sp.spmatrix, dtype=torch.float32) -> torch.Tensor:
    coo = matrix.tocoo()
    idx = torch.as_tensor(np.vstack([coo.row, coo.col]), dtype=torch.long)
    return torch.sparse_coo_tensor(idx, torch.as_tensor(coo.data, dtype=dtype), coo.shape,
                                   check_invariants=False).coalesce()


def back_project_maps(maps: torch.Tensor, operator: torch.Tensor) -> torch.Tensor:
    """Differentiable back-projection of (v, h, w) maps with a sparse (n, v*h*w) operator."""
    return torch.sparse.mm(operator, maps.reshape(-1, 1)).squeeze(-1)


def score_object(features: FeaturePack, normal_text, anomaly_text, views: ViewSet,
                 tau: float = TEMPERATURE, sigma: float = SIGMA, normalize: str = "views") -> ScoreResult:
    with torch.no_grad():
        per_view = classify_view(features.global_, normal_text, anomaly_text, tau)
        normal, anomaly, final = segment_view(features.local, normal_text, anomaly_text,
                                              features.grid, views.resolution, tau, sigma)
    final_np = final.double().cpu().numpy()
    points = backprojection_matrix(views, normalize) @ final_np.ravel()
    per_view_np = per_view.double().cpu().numpy()
    return ScoreResult(per_view_np, float(per_view_np.mean()), normal.cpu().numpy(),
                       anomaly.cpu().numpy(), final_np, points)
