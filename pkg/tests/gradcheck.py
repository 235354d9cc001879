"""Finite-difference gradient checking for the training objectives."""

import contextlib
from unittest import mock

import numpy as np
import torch

from oracles import central_difference
from zsad3d import prompts
from zsad3d.config import ExperimentConfig
from zsad3d.data import make_sample, prepare
from zsad3d.model import Detector
from zsad3d.training import object_loss


def tiny_samples(cfg, dtype=torch.float32, categories=("sphere", "cube")):
    out = []
    for i, cat in enumerate(categories):
        cloud = make_sample(cat, i, anomalous=bool(i % 2), cfg=cfg)
        out.append(prepare(f"{cat}-{i}", cloud, cfg, dtype))
    return out


def batch_objective(model, samples, cfg, stage):
    totals = []
    for s in samples:
        b = model.prompts(s)
        pack = model.features(s, stage)
        totals.append(object_loss(pack, b.normal_embedding, b.anomaly_embedding, s, cfg, stage)[0])
    return torch.stack(totals).mean()


@contextlib.contextmanager
def record_selections(log):
    """Record every max-pool winner and top-k pick made while the block runs."""
    amax = torch.Tensor.amax
    top_k = prompts.top_k_indices

    def amax_logged(self, dim=(), keepdim=False):
        log.append(self.detach().argmax(dim=dim).reshape(-1).tolist())
        return amax(self, dim=dim, keepdim=keepdim)

    def top_k_logged(scores, k):
        idx = top_k(scores, k)
        log.append(idx.tolist())
        return idx

    with mock.patch.object(torch.Tensor, "amax", amax_logged), \
            mock.patch.object(prompts, "top_k_indices", top_k_logged):
        yield


def check_group_gradients(model, samples, cfg, stage, group):
    """Analytic vs central-difference gradient on a few entries of every tensor in ``group``.

    Per tensor: the two largest analytic entries plus two random ones, so
    entries with zero analytic gradient are checked too.  An entry whose
    +-step changes a max-pool winner or a top-k pick straddles a kink, where
    a central difference is not a derivative; those are left out, and at
    least three quarters of the entries must remain.
    """
    def objective():
        return batch_objective(model, samples, cfg, stage)

    def selections():
        log = []
        with torch.no_grad(), record_selections(log):
            objective()
        return log

    model.set_stage(stage)
    model.zero_grad()
    objective().backward()
    rng = np.random.default_rng(0)
    analytic, numeric, probed = [], [], 0
    for p in model.group_parameters(group):
        g = torch.zeros(p.numel(), dtype=p.dtype) if p.grad is None else p.grad.reshape(-1).clone()
        top = torch.argsort(g.abs(), descending=True)[:2].tolist()
        rand = rng.choice(p.numel(), size=min(2, p.numel()), replace=False).tolist()
        flat = p.data.view(-1)
        for i in sorted(set(top + rand)):
            probed += 1
            old = flat[i].item()
            base = selections()
            flat[i] = old + 1e-4
            up = selections()
            flat[i] = old - 1e-4
            down = selections()
            flat[i] = old
            if up != base or down != base:
                continue
            analytic.append(g[i].item())
            numeric.append(central_difference(objective, p, eps=1e-4, indices=[i])[0].item())
    assert len(analytic) >= 0.75 * probed, f"{group}: too many entries sit next to a kink"
    a, n = np.array(analytic), np.array(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    assert scale > 0, f"{group}: gradient is identically zero"
    rel = np.linalg.norm(a - n) / scale
    assert rel < 1e-3, f"{group}: relative error {rel:.2e}"


def gradient_fixture():
    """Small float64 model and a two-object batch (one normal, one anomalous)."""
    cfg = ExperimentConfig(n_points=256, views=2, resolution=32, patch=16, splat_radius=2, width=16,
                           vision_depth=1, vision_heads=2, text_depth=1, text_heads=2, point_dim=8,
                           global_dim=16, point_k=4, point_hidden=8, n_learnable=2, k=4, n_prototypes=4,
                           lora_rank=2, sigma=1.0, context=16)
    torch.manual_seed(0)
    model = Detector(cfg).double()
    # move the adapter off its zero init so every adapter tensor carries gradient
    with torch.no_grad():
        for p in model.group_parameters("depth_lora"):
            p.add_(0.05 * torch.randn_like(p))
    return cfg, model, tiny_samples(cfg, torch.float64)
