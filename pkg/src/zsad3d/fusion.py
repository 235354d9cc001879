"""Trainable visual components of the second stage.

* Depth-LoRA: low-rank updates on the two MLP linear layers of every vision
  transformer block, applied only when encoding depth images.
* Synergistic refinement: bidirectional multiplicative attention between the
  rendered and depth streams followed by a small fusion MLP.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError


class LoraAdapter(nn.Module):
    """Low-rank pair for one MLP: A1/B1 wrap the first linear layer, A2/B2 the second."""

    def __init__(self, dim: int, hidden: int, rank: int = 8, alpha: float = 16.0):
        super().__init__()
        if not 1 <= rank <= min(dim, hidden):
            raise ConfigurationError(f"LoRA rank {rank} must lie in [1, {min(dim, hidden)}]")
        self.rank = rank
        self.scale = alpha / rank
        self.A1 = nn.Parameter(torch.randn(rank, dim) / rank)
        self.B1 = nn.Parameter(torch.zeros(hidden, rank))
        self.A2 = nn.Parameter(torch.randn(rank, hidden) / rank)
        self.B2 = nn.Parameter(torch.zeros(dim, rank))


def lora_mlp(x, w1, w2, adapter: LoraAdapter | None = None, b1=None, b2=None):
    """Two-layer GELU MLP, optionally with low-rank updates on both layers.

    x' = GELU(W1 x + g B1 A1 x);  out = W2 x' + g B2 A2 x'
    """
    if adapter is not None and (adapter.A1.shape[1] != w1.shape[1] or adapter.B1.shape[0] != w1.shape[0]):
        raise ConfigurationError("adapter shapes do not match the MLP weights")
    h = F.linear(x, w1, b1)
    if adapter is not None:
        h = h + adapter.scale * F.linear(F.linear(x, adapter.A1), adapter.B1)
    h = F.gelu(h)
    out = F.linear(h, w2, b2)
    if adapter is not None:
        out = out + adapter.scale * F.linear(F.linear(h, adapter.A2), adapter.B2)
    return out


class DepthLora(nn.Module):
    """One adapter per vision-transformer block."""

    def __init__(self, blocks: int, dim: int, hidden: int, rank: int = 8, alpha: float = 16.0):
        super().__init__()
        self.adapters = nn.ModuleList(LoraAdapter(dim, hidden, rank, alpha) for _ in range(blocks))

    def __getitem__(self, i):
        return self.adapters[i]

    def __len__(self):
        return len(self.adapters)


class RefinementBranch(nn.Module):
    """Bidirectional multiplicative attention between two feature sequences.

    Inputs are (..., m, d); global features are passed as length-1 sequences.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.key_r = nn.Linear(dim, dim)
        self.value_r = nn.Linear(dim, dim)
        self.key_d = nn.Linear(dim, dim)
        self.value_d = nn.Linear(dim, dim)
        self.f1 = nn.Linear(dim, dim, bias=False)
        self.f2 = nn.Linear(dim, dim, bias=False)
        self.fuse = nn.Sequential(nn.Linear(2 * dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def compatibility(self, feat_r, feat_d):
        return self.f1(self.key_r(feat_r)) @ self.f2(self.key_d(feat_d)).transpose(-1, -2)

    def attention(self, feat_r, feat_d):
        s = self.compatibility(feat_r, feat_d)
        return s.softmax(dim=-1), s.transpose(-1, -2).softmax(dim=-1)

    def forward(self, feat_r, feat_d):
        if feat_r.shape != feat_d.shape:
            raise ConfigurationError(f"stream shapes differ: {tuple(feat_r.shape)} vs {tuple(feat_d.shape)}")
        w_r, w_d = self.attention(feat_r, feat_d)
        e_r = w_r @ self.value_r(feat_r)
        e_d = w_d @ self.value_d(feat_d)
        return self.fuse(torch.cat([e_r, e_d], dim=-1))


class SynergisticRefinement(nn.Module):
    """Separate refinement branches for global and patch features."""

    def __init__(self, dim: int):
        super().__init__()
        self.global_branch = RefinementBranch(dim)
        self.local_branch = RefinementBranch(dim)

    def forward(self, global_r, global_d, local_r, local_d):
        g = self.global_branch(global_r.unsqueeze(-2), global_d.unsqueeze(-2)).squeeze(-2)
        return g, self.local_branch(local_r, local_d)

