"""Desk-scale stand-ins for the point, vision and text encoders.

All three are plain ``nn.Module``s whose weights are seeded at construction.
The trainer decides which of them receive gradients; nothing here freezes
anything by itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.spatial import cKDTree

from .errors import ConfigurationError
from .fusion import DepthLora, lora_mlp
from .geometry import estimate_normals


@dataclass
class PointFeatures:
    local: torch.Tensor  # (n, d_pn)
    global_: torch.Tensor  # (d_e,)


@dataclass
class VisionFeatures:
    global_: torch.Tensor  # (..., d)
    local: torch.Tensor  # (..., p, d)
    patch_grid: tuple


def knn_indices(points: np.ndarray, k: int, dilation: int = 1) -> np.ndarray:
    """Indices of the k nearest neighbours (self first), taking every ``dilation``-th one."""
    n = len(points)
    if k * dilation > n:
        raise ConfigurationError(f"grouping needs {k * dilation} points, cloud has {n}")
    _, idx = cKDTree(points).query(points, k=k * dilation)
    return np.ascontiguousarray(idx[:, ::dilation])


EDGE_SCALE = 10.0
EDGE_FEATURES = 5


def oriented_normals(points: np.ndarray, k: int = 16) -> np.ndarray:
    """PCA normals flipped to point away from the origin (clouds are centred)."""
    n = estimate_normals(points, k)
    sign = np.where((n * points).sum(axis=1) < 0, -1.0, 1.0)
    return n * sign[:, None]


def edge_descriptors(points: torch.Tensor, normals: torch.Tensor, nb: torch.Tensor) -> torch.Tensor:
    """Rotation-invariant description of every (point, neighbour) pair.

    Per edge: height of the neighbour above the point's tangent plane, edge
    length, tangential offset, normal agreement, and the point's height above
    the neighbour's tangent plane.  Lengths are scaled so that typical
    neighbourhoods give values of order one.
    """
    d = points[nb] - points[:, None, :]
    n_i, n_j = normals[:, None, :], normals[nb]
    height = (d * n_i).sum(-1)
    length = d.norm(dim=-1)
    tangential = (length**2 - height**2).clamp_min(0).sqrt()
    back_height = -(d * n_j).sum(-1)
    agree = (n_i * n_j).sum(-1)
    return torch.stack([EDGE_SCALE * height, EDGE_SCALE * length, EDGE_SCALE * tangential, agree,
                        EDGE_SCALE * back_height], dim=-1)


class PointEncoder(nn.Module):
    """Two set-abstraction stages over k-NN groups, each a shared per-edge
    transform followed by a max-pool over the group.  The second stage uses a
    dilated neighbourhood, so its receptive field is roughly twice as wide.

    Edges are described by rotation-invariant quantities measured against
    oriented PCA normals, so features do not depend on object pose.  Every
    point keeps its own row, which makes the local features permutation
    equivariant and the global max-pool permutation invariant.
    """

    def __init__(self, local_dim: int = 64, global_dim: int = 128, k: int = 16, hidden: int = 32):
        super().__init__()
        self.k = k
        self.edge1 = nn.Linear(EDGE_FEATURES, hidden)
        self.post1 = nn.Linear(hidden, hidden)
        # edge2 acts on [f_j - f_i, f_i, e_ij]; split so the feature terms run per point
        self.edge2_nb = nn.Linear(hidden, local_dim, bias=False)
        self.edge2_centre = nn.Linear(hidden, local_dim)
        self.edge2_rel = nn.Linear(EDGE_FEATURES, local_dim, bias=False)
        self.post2 = nn.Linear(local_dim, local_dim)
        self.deep = nn.Linear(local_dim, global_dim)

    def neighbourhoods(self, points: np.ndarray):
        return knn_indices(points, self.k), knn_indices(points, self.k, dilation=2)

    def stages(self, points: torch.Tensor, neighbourhoods=None, normals=None):
        """Return (local features, deepest per-point features)."""
        if neighbourhoods is None or normals is None:
            raw = points.detach().cpu().numpy()
            if neighbourhoods is None:
                neighbourhoods = self.neighbourhoods(raw)
            if normals is None:
                normals = torch.as_tensor(oriented_normals(raw), dtype=points.dtype)
        nb1, nb2 = (torch.as_tensor(nb, dtype=torch.long) for nb in neighbourhoods)
        f1 = self.post1(F.gelu(self.edge1(edge_descriptors(points, normals, nb1))).amax(dim=1))
        nb_term = self.edge2_nb(f1)
        centre = self.edge2_centre(f1) - nb_term
        edges = nb_term[nb2] + centre[:, None, :] + self.edge2_rel(edge_descriptors(points, normals, nb2))
        f2 = self.post2(F.gelu(edges).amax(dim=1))
        return f2, self.deep(F.gelu(f2))

    def forward(self, points: torch.Tensor, neighbourhoods=None, normals=None) -> PointFeatures:
        local, deep = self.stages(points, neighbourhoods, normals)
        return PointFeatures(local, deep.amax(dim=0))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x):
        *lead, m, d = x.shape
        q, k, v = self.qkv(x).reshape(*lead, m, 3, self.heads, d // self.heads).unbind(-3)
        q, k, v = (t.transpose(-2, -3) for t in (q, k, v))
        w = (q @ k.transpose(-1, -2) / (d // self.heads) ** 0.5).softmax(dim=-1)
        return self.out((w @ v).transpose(-2, -3).reshape(*lead, m, d))


class Block(nn.Module):
    """Pre-norm transformer block whose MLP accepts an optional LoRA adapter."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x, adapter=None):
        x = x + self.attn(self.norm1(x))
        h = self.norm2(x)
        return x + lora_mlp(h, self.fc1.weight, self.fc2.weight, adapter, self.fc1.bias, self.fc2.bias)


class VisionEncoder(nn.Module):
    def __init__(self, resolution=(112, 112), patch: int = 16, channels: int = 1, width: int = 64,
                 depth: int = 4, heads: int = 4, out_dim: int = 64, mlp_ratio: int = 4):
        super().__init__()
        h, w = resolution
        if h % patch or w % patch:
            raise ConfigurationError(f"resolution {resolution} not divisible by patch {patch}")
        self.resolution = (h, w)
        self.patch = patch
        self.channels = channels
        self.grid = (h // patch, w // patch)
        self.mlp_hidden = mlp_ratio * width
        self.embed = nn.Linear(patch * patch * channels, width)
        self.cls = nn.Parameter(0.02 * torch.randn(width))
        self.pos = nn.Parameter(0.02 * torch.randn(1 + self.grid[0] * self.grid[1], width))
        self.blocks = nn.ModuleList(Block(width, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(width)
        self.proj = nn.Linear(width, out_dim, bias=False)

    def patchify(self, images):
        if images.dim() == 3:
            images = images.unsqueeze(-1)
        *lead, h, w, c = images.shape
        if (h, w) != self.resolution or c != self.channels:
            raise ConfigurationError(
                f"image {h}x{w}x{c} does not match encoder {self.resolution[0]}x{self.resolution[1]}x{self.channels}"
            )
        gr, gc, p = *self.grid, self.patch
        x = images.reshape(*lead, gr, p, gc, p, c).transpose(-4, -3)
        return x.reshape(*lead, gr * gc, p * p * c)

    def forward(self, images, adapter: DepthLora | None = None) -> VisionFeatures:
        """Encode images shaped (..., h, w) or (..., h, w, c)."""
        if adapter is not None and len(adapter) != len(self.blocks):
            raise ConfigurationError("adapter block count does not match the encoder")
        tokens = self.embed(self.patchify(images))
        cls = self.cls.expand(*tokens.shape[:-2], 1, -1)
        x = torch.cat([cls, tokens], dim=-2) + self.pos
        for i, block in enumerate(self.blocks):
            x = block(x, None if adapter is None else adapter[i])
        x = self.proj(self.norm(x))
        return VisionFeatures(x[..., 0, :], x[..., 1:, :], self.grid)


class TextEncoder(nn.Module):
    """Transformer over prompt-token sequences, mean-pooled into one embedding."""

    def __init__(self, dim: int = 64, depth: int = 2, heads: int = 4, context: int = 32):
        super().__init__()
        self.context = context
        self.pos = nn.Parameter(0.02 * torch.randn(context, dim))
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, dim, bias=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        length = tokens.shape[-2]
        if length > self.context:
            raise ConfigurationError(f"prompt length {length} exceeds text context {self.context}")
        x = tokens + self.pos[:length]
        for block in self.blocks:
            x = block(x)
        return self.proj(self.norm(x).mean(dim=-2))
