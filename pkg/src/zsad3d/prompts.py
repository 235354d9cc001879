"""Geometry-aware prompt generation.

The generator turns a point cloud's features into two token sequences:

    normal  = [shape token, learnable tokens]
    anomaly = [shape token, learnable tokens, defect tokens]

The shape token projects the global point feature.  Defect tokens come from
the k local features that sit farthest (in cosine terms) from a learnable
bank of normal prototypes, mixed by one self-attention block and projected
into the text width.  With the shape or defect prompt switched off, a static
learnable token set takes its place so sequence lengths never change.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoders import Attention, PointFeatures, TextEncoder
from .errors import ConfigurationError


@dataclass
class PromptBundle:
    shape: torch.Tensor  # (d,)
    learnable: torch.Tensor  # (q, d)
    defect: torch.Tensor  # (k, d)
    normal_embedding: torch.Tensor | None = None  # (d,)
    anomaly_embedding: torch.Tensor | None = None  # (d,)


def outlier_scores(features: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """One minus the best cosine match of each feature row against the bank.

    Rows with zero norm have no direction and score 1.
    """
    if prototypes.shape[0] == 0:
        raise ConfigurationError("prototype bank is empty")
    f_norm = features.norm(dim=-1, keepdim=True)
    p_unit = prototypes / prototypes.norm(dim=-1, keepdim=True)
    zero = f_norm.squeeze(-1) == 0
    f_unit = features / torch.where(f_norm == 0, torch.ones_like(f_norm), f_norm)
    best = (f_unit @ p_unit.T).amax(dim=-1)
    return torch.where(zero, torch.ones_like(best), 1.0 - best)


def top_k_indices(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k highest scores; equal scores keep the lower index first."""
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ConfigurationError(f"k={k} must lie in [1, {n}]")
    order = torch.sort(scores.detach(), descending=True, stable=True).indices
    return order[..., :k]


class PrototypeBank(nn.Module):
    def __init__(self, count: int = 32, dim: int = 64):
        super().__init__()
        if count < 1:
            raise ConfigurationError("prototype bank needs at least one prototype")
        self.prototypes = nn.Parameter(torch.randn(count, dim) / dim**0.5)


class DefectDistiller(nn.Module):
    """Self-attention over the selected outlier features, then a projection per token.

    Selected features are scaled by their outlier score before mixing; that is
    the path through which the task losses reach the prototype bank.
    """

    def __init__(self, point_dim: int = 64, text_dim: int = 64, heads: int = 2):
        super().__init__()
        self.norm = nn.LayerNorm(point_dim)
        self.attn = Attention(point_dim, heads)
        self.proj = nn.Linear(point_dim, text_dim)

    def forward(self, selected: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
        x = selected * scores.unsqueeze(-1)
        x = x + self.attn(self.norm(x))
        return self.proj(x)


def shape_prompt(global_feature: torch.Tensor, projection: nn.Linear) -> torch.Tensor:
    return projection(global_feature)


def distill_defect(local_features: torch.Tensor, bank: PrototypeBank, k: int,
                   distiller: DefectDistiller):
    """Return (defect tokens (k, d), selected indices)."""
    if k > local_features.shape[0]:
        raise ConfigurationError(f"k={k} exceeds the {local_features.shape[0]} available points")
    scores = outlier_scores(local_features, bank.prototypes)
    idx = top_k_indices(scores, k)
    return distiller(local_features[idx], scores[idx]), idx


def assemble_prompts(shape, learnable, defect, context: int | None = None):
    """Concatenate tokens into the normal and anomaly sequences."""
    normal = torch.cat([shape.unsqueeze(-2), learnable], dim=-2)
    anomaly = torch.cat([normal, defect], dim=-2)
    if context is not None and anomaly.shape[-2] > context:
        raise ConfigurationError(f"anomaly prompt length {anomaly.shape[-2]} exceeds context {context}")
    return normal, anomaly


class PromptGenerator(nn.Module):
    def __init__(self, global_dim: int = 128, point_dim: int = 64, text_dim: int = 64,
                 n_learnable: int = 8, k: int = 12, n_prototypes: int = 32, heads: int = 2,
                 use_shape_prompt: bool = True, use_defect_prompt: bool = True):
        super().__init__()
        self.k = k
        self.use_shape_prompt = use_shape_prompt
        self.use_defect_prompt = use_defect_prompt
        self.shape_projection = nn.Linear(global_dim, text_dim)
        nn.init.zeros_(self.shape_projection.bias)
        self.prototype_bank = PrototypeBank(n_prototypes, point_dim)
        self.defect_distiller = DefectDistiller(point_dim, text_dim, heads)
        self.learnable_prompts = nn.ParameterDict({
            "context": nn.Parameter(0.02 * torch.randn(n_learnable, text_dim)),
            # stand-ins used only when the shape / defect prompt is switched off
            "static_shape": nn.Parameter(0.02 * torch.randn(text_dim)),
            "static_defect": nn.Parameter(0.02 * torch.randn(k, text_dim)),
        })

    def forward(self, features: PointFeatures) -> PromptBundle:
        if self.use_shape_prompt:
            shape = shape_prompt(features.global_, self.shape_projection)
        else:
            shape = self.learnable_prompts["static_shape"]
        if self.use_defect_prompt:
            defect, _ = distill_defect(features.local, self.prototype_bank, self.k, self.defect_distiller)
        else:
            defect = self.learnable_prompts["static_defect"]
        return PromptBundle(shape, self.learnable_prompts["context"], defect)

    def encode(self, bundle: PromptBundle, text_encoder: TextEncoder) -> PromptBundle:
        normal, anomaly = assemble_prompts(bundle.shape, bundle.learnable, bundle.defect,
                                           text_encoder.context)
        bundle.normal_embedding = text_encoder(normal)
        bundle.anomaly_embedding = text_encoder(anomaly)
        return bundle

