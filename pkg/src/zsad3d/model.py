"""The full detector: encoders, prompt generator, Depth-LoRA and refinement, plus
named parameter groups for the two-stage freeze schedule."""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn as nn

from .config import ExperimentConfig
from .encoders import PointEncoder, TextEncoder, VisionEncoder, VisionFeatures
from .errors import ConfigurationError
from .fusion import DepthLora, SynergisticRefinement
from .prompts import PromptBundle, PromptGenerator
from .scoring import FeaturePack

# group name -> attribute path inside Detector
PARAMETER_GROUPS = {
    "point_encoder": "point_encoder",
    "shape_projection": "prompt_generator.shape_projection",
    "prototype_bank": "prompt_generator.prototype_bank",
    "defect_distiller": "prompt_generator.defect_distiller",
    "learnable_prompts": "prompt_generator.learnable_prompts",
    "vision_encoder": "vision_encoder",
    "text_encoder": "text_encoder",
    "depth_lora": "depth_lora",
    "srm": "srm",
}
STAGE_TRAINABLE = {
    1: ("point_encoder", "shape_projection", "prototype_bank", "defect_distiller", "learnable_prompts"),
    2: ("depth_lora", "srm"),
}


class Detector(nn.Module):
    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.point_encoder = PointEncoder(cfg.point_dim, cfg.global_dim, cfg.point_k, cfg.point_hidden)
            self.prompt_generator = PromptGenerator(
                cfg.global_dim, cfg.point_dim, cfg.width, cfg.n_learnable, cfg.k, cfg.n_prototypes,
                cfg.distiller_heads, cfg.use_shape_prompt, cfg.use_defect_prompt,
            )
            self.vision_encoder = VisionEncoder((cfg.resolution, cfg.resolution), cfg.patch, 1, cfg.width,
                                                cfg.vision_depth, cfg.vision_heads, cfg.width)
            self.text_encoder = TextEncoder(cfg.width, cfg.text_depth, cfg.text_heads, cfg.context)
            self.depth_lora = DepthLora(cfg.vision_depth, cfg.width, self.vision_encoder.mlp_hidden,
                                        cfg.lora_rank, cfg.lora_alpha)
            self.srm = SynergisticRefinement(cfg.width)

    def group(self, name: str) -> nn.Module:
        if name not in PARAMETER_GROUPS:
            raise ConfigurationError(f"unknown parameter group {name!r}")
        mod = self
        for attr in PARAMETER_GROUPS[name].split("."):
            mod = getattr(mod, attr)
        return mod

    def group_parameters(self, name: str) -> list:
        return list(self.group(name).parameters())

    def set_stage(self, stage: int):
        """Enable gradients for exactly the stage's trainable groups."""
        if stage not in STAGE_TRAINABLE:
            raise ConfigurationError(f"stage must be 1 or 2, got {stage}")
        for name in PARAMETER_GROUPS:
            flag = name in STAGE_TRAINABLE[stage]
            for p in self.group_parameters(name):
                p.requires_grad_(flag)

    def checksums(self) -> dict:
        """sha256 over the raw bytes of each group's parameters."""
        out = {}
        for name in PARAMETER_GROUPS:
            h = hashlib.sha256()
            for p in self.group_parameters(name):
                h.update(p.detach().cpu().contiguous().numpy().tobytes())
            out[name] = h.hexdigest()
        return out

    # forward pieces

    def prompts(self, sample) -> PromptBundle:
        feats = self.point_encoder(sample.points, sample.neighbourhoods, sample.normals)
        bundle = self.prompt_generator(feats)
        return self.prompt_generator.encode(bundle, self.text_encoder)

    def render_features(self, sample) -> VisionFeatures:
        return self.vision_encoder(sample.rendered)

    def depth_features(self, sample, adapt: bool = True) -> VisionFeatures:
        return self.vision_encoder(sample.depth, self.depth_lora if adapt else None)

    def fuse(self, render: VisionFeatures | None, depth: VisionFeatures | None) -> FeaturePack:
        """Combine the active streams into the features compared with text."""
        stream = self.cfg.stream
        if stream == "render":
            g, l, grid = render.global_, render.local, render.patch_grid
        elif stream == "depth":
            g, l, grid = depth.global_, depth.local, depth.patch_grid
        elif self.cfg.use_srm:
            g, l = self.srm(render.global_, depth.global_, render.local, depth.local)
            grid = render.patch_grid
        else:
            g = 0.5 * (render.global_ + depth.global_)
            l = 0.5 * (render.local + depth.local)
            grid = render.patch_grid
        pack = FeaturePack(g, l, grid)
        if render is not None:
            pack.global_render, pack.local_render = render.global_, render.local
        if depth is not None:
            pack.global_depth, pack.local_depth = depth.global_, depth.local
        return pack

    def features(self, sample, stage: int, render: VisionFeatures | None = None) -> FeaturePack:
        """Visual features for ``stage``; a precomputed render stream may be passed in."""
        if stage == 1:
            render = render if render is not None else self.render_features(sample)
            return FeaturePack(render.global_, render.local, render.patch_grid,
                               global_render=render.global_, local_render=render.local)
        need_render = self.cfg.stream in ("render", "both")
        need_depth = self.cfg.stream in ("depth", "both")
        if need_render and render is None:
            render = self.render_features(sample)
        depth = self.depth_features(sample) if need_depth else None
        return self.fuse(render if need_render else None, depth)


def state_arrays(model: Detector) -> dict:
    return {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()}


def parameter_count(model: Detector) -> dict:
    return {name: int(sum(np.prod(p.shape) for p in model.group_parameters(name))) for name in PARAMETER_GROUPS}
