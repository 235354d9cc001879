"""Training objectives for both stages."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .errors import ScoringError

EPS = 1e-7
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
DICE_SMOOTH = 1.0


@dataclass
class LossReport:
    cla: float
    seg: float
    con: float
    total: float
    stage: int

    def to_dict(self) -> dict:
        return asdict(self)


def loss_cla(prob: torch.Tensor, label) -> torch.Tensor:
    """Binary cross-entropy with the prediction clamped away from 0 and 1."""
    p = prob.clamp(EPS, 1.0 - EPS)
    y = torch.as_tensor(label, dtype=p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p))


def dice(pred: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred.sum() + target.sum() + smooth)


def focal(pred: torch.Tensor, target: torch.Tensor, gamma: float = FOCAL_GAMMA,
          alpha: float = FOCAL_ALPHA) -> torch.Tensor:
    p = pred.clamp(EPS, 1.0 - EPS)
    pos = -alpha * target * (1 - p) ** gamma * torch.log(p)
    neg = -(1 - alpha) * (1 - target) * p**gamma * torch.log(1 - p)
    return (pos + neg).mean()


def loss_seg(point_scores, point_labels, view_maps, view_labels) -> torch.Tensor:
    """Dice + focal on the point scores plus their mean over the per-view maps."""
    loss = dice(point_scores, point_labels) + focal(point_scores, point_labels)
    v = view_maps.shape[0]
    per_view = sum(dice(view_maps[i], view_labels[i]) + focal(view_maps[i], view_labels[i]) for i in range(v))
    return loss + per_view / v


def loss_con(view_globals: torch.Tensor) -> torch.Tensor:
    """One minus the mean cosine between each view's global feature and their mean."""
    mean = view_globals.mean(dim=0)
    norms = view_globals.norm(dim=-1)
    if float(mean.detach().norm()) == 0.0 or bool((norms == 0).any()):
        raise ScoringError("cross-view consistency undefined for zero-norm features")
    cos = (view_globals @ mean) / (norms * mean.norm())
    return 1.0 - cos.mean()


def stage_total(cla, seg, con, stage: int, alpha: float = 1.0):
    if stage == 1:
        return cla + seg
    return cla + seg + alpha * con
