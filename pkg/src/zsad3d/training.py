"""Two-stage training driver, inference and evaluation.

Stage 1 fits the prompt generator against frozen rendered-image features.
Stage 2 freezes everything learned so far and fits Depth-LoRA and the
refinement module on fused features.  Text embeddings are computed without
gradient in stage 2, so nothing flows back into the prompt generator.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ExperimentConfig
from .data import PreparedSample, check_zero_shot
from .errors import ConfigurationError, NumericFailure, ProtocolViolation
from .losses import LossReport, loss_cla, loss_con, loss_seg, stage_total
from .metrics import category_metrics, summarize
from .model import PARAMETER_GROUPS, STAGE_TRAINABLE, Detector
from .scoring import FeaturePack, back_project_maps, classify_view, score_object, segment_view

log = logging.getLogger(__name__)

EVAL_MODES = ("render-only", "depth-only", "full")


@dataclass
class StageConfig:
    stage: int
    epochs: int
    learning_rate: float
    batch_size: int
    seed: int
    trainable_groups: list = field(default_factory=list)
    frozen_groups: list = field(default_factory=list)

    def __post_init__(self):
        if self.stage not in STAGE_TRAINABLE:
            raise ConfigurationError(f"stage must be 1 or 2, got {self.stage}")
        if not self.trainable_groups:
            self.trainable_groups = list(STAGE_TRAINABLE[self.stage])
        if not self.frozen_groups:
            self.frozen_groups = [g for g in PARAMETER_GROUPS if g not in self.trainable_groups]
        both = set(self.trainable_groups) & set(self.frozen_groups)
        union = set(self.trainable_groups) | set(self.frozen_groups)
        if both or union != set(PARAMETER_GROUPS):
            raise ConfigurationError("trainable and frozen groups must partition all parameter groups")
        if self.epochs < 0 or self.learning_rate <= 0 or self.batch_size < 1:
            raise ConfigurationError("epochs >= 0, learning_rate > 0 and batch_size >= 1 required")

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig, stage: int) -> "StageConfig":
        if stage == 1:
            return cls(1, cfg.stage1_epochs, cfg.stage1_lr, cfg.batch_size, cfg.seed)
        return cls(2, cfg.stage2_epochs, cfg.stage2_lr, cfg.batch_size, cfg.seed)


def object_loss(pack: FeaturePack, normal_text, anomaly_text, sample: PreparedSample,
                cfg: ExperimentConfig, stage: int):
    """Return (total, (cla, seg, con)) for one object."""
    per_view = classify_view(pack.global_, normal_text, anomaly_text, cfg.tau)
    cla = loss_cla(per_view.mean(), sample.object_label)
    _, _, maps = segment_view(pack.local, normal_text, anomaly_text, pack.grid, sample.views.resolution,
                              cfg.tau, cfg.sigma)
    points = back_project_maps(maps, sample.operator)
    seg = loss_seg(points, sample.point_labels, maps, sample.view_labels)
    if stage == 2 and cfg.use_con_loss:
        con = loss_con(pack.global_)
    else:
        con = torch.zeros((), dtype=cla.dtype)
    return stage_total(cla, seg, con, stage, cfg.alpha), (cla, seg, con)


def check_classes(samples):
    labels = {s.object_label for s in samples}
    if labels != {0, 1}:
        raise ConfigurationError("training data needs at least one normal and one anomalous object")


class JsonLog:
    """Append-only JSON-lines sink; ``None`` path keeps records in memory only."""

    def __init__(self, path=None):
        self.path = path
        self.records = []

    def write(self, record: dict):
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def _batch_loss(model, batch, cache, cfg, stage):
    totals, parts = [], []
    for s in batch:
        if stage == 1:
            bundle = model.prompts(s)
            pack = model.features(s, 1, render=cache[s.sample_id])
            normal, anomaly = bundle.normal_embedding, bundle.anomaly_embedding
        else:
            render, (normal, anomaly) = cache[s.sample_id]
            pack = model.features(s, 2, render=render)
        total, comps = object_loss(pack, normal, anomaly, s, cfg, stage)
        totals.append(total)
        parts.append(comps)
    loss = torch.stack(totals).mean()
    comps = [float(torch.stack([p[i] for p in parts]).detach().mean()) for i in range(3)]
    return loss, comps


def _stage_cache(model, samples, stage, cfg):
    """Frozen quantities computed once per stage."""
    cache = {}
    with torch.no_grad():
        for s in samples:
            render = model.render_features(s) if (stage == 1 or cfg.stream != "depth") else None
            if stage == 1:
                cache[s.sample_id] = render
            else:
                b = model.prompts(s)
                cache[s.sample_id] = (render, (b.normal_embedding, b.anomaly_embedding))
    return cache


def train_stage(model: Detector, samples, stage_cfg: StageConfig, sink: JsonLog | None = None,
                val_samples=()) -> dict:
    """Optimise one stage in place; returns the per-epoch history and freeze ledger."""
    cfg = model.cfg
    check_classes(samples)
    stage = stage_cfg.stage
    sink = sink or JsonLog()
    model.set_stage(stage)
    trainable = [p for g in stage_cfg.trainable_groups for p in model.group_parameters(g)]
    opt = torch.optim.Adam(trainable, lr=stage_cfg.learning_rate)
    cache = _stage_cache(model, list(samples) + list(val_samples), stage, cfg)

    start = model.checksums()
    ledger = [start]
    history = []
    step = 0
    for epoch in range(stage_cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([stage_cfg.seed, stage, epoch]).permutation(len(samples))
        sums, count = np.zeros(4), 0
        for b in range(0, len(order), stage_cfg.batch_size):
            batch = [samples[i] for i in order[b:b + stage_cfg.batch_size]]
            opt.zero_grad()
            loss, comps = _batch_loss(model, batch, cache, cfg, stage)
            if not torch.isfinite(loss):
                raise NumericFailure(f"non-finite loss at stage {stage} epoch {epoch} step {step}")
            loss.backward()
            opt.step()
            report = LossReport(*comps, float(loss.detach()), stage)
            sink.write({"kind": "step", "epoch": epoch, "step": step, **report.to_dict()})
            sums += np.array([*comps, float(loss.detach())]) * len(batch)
            count += len(batch)
            step += 1
        sums /= max(count, 1)
        record = {"kind": "epoch", "stage": stage, "epoch": epoch, "cla": sums[0], "seg": sums[1],
                  "con": sums[2], "total": sums[3], "seconds": round(time.perf_counter() - t0, 3)}
        if val_samples:
            with torch.no_grad():
                record["val_total"] = float(_batch_loss(model, list(val_samples), cache, cfg, stage)[0])
        sums_now = model.checksums()
        ledger.append(sums_now)
        broken = [g for g in stage_cfg.frozen_groups if sums_now[g] != start[g]]
        if broken:
            raise ProtocolViolation(f"frozen groups changed during stage {stage}: {broken}")
        sink.write(record)
        history.append(record)
        log.info("stage %d epoch %d loss %.4f", stage, epoch, sums[3])
    model.set_stage(stage)
    return {"history": history, "ledger": ledger, "frozen": stage_cfg.frozen_groups,
            "trainable": stage_cfg.trainable_groups}


def train_stage1(model: Detector, samples, stage_cfg: StageConfig | None = None, sink=None, val_samples=()):
    stage_cfg = stage_cfg or StageConfig.from_experiment(model.cfg, 1)
    if stage_cfg.stage != 1:
        raise ConfigurationError("train_stage1 needs a stage-1 StageConfig")
    return train_stage(model, samples, stage_cfg, sink, val_samples)


def train_stage2(model: Detector, samples, stage_cfg: StageConfig | None = None, sink=None, val_samples=()):
    stage_cfg = stage_cfg or StageConfig.from_experiment(model.cfg, 2)
    if stage_cfg.stage != 2:
        raise ConfigurationError("train_stage2 needs a stage-2 StageConfig")
    return train_stage(model, samples, stage_cfg, sink, val_samples)


def mode_for_stage(stage: int) -> str:
    return "render-only" if stage == 1 else "full"


def infer(model: Detector, sample: PreparedSample, mode: str = "full"):
    """Score one object; returns a ScoreResult."""
    if mode not in EVAL_MODES:
        raise ConfigurationError(f"mode must be one of {EVAL_MODES}")
    cfg = model.cfg
    with torch.no_grad():
        bundle = model.prompts(sample)
        if mode == "render-only":
            pack = model.features(sample, 1)
        elif mode == "depth-only":
            d = model.depth_features(sample)
            pack = FeaturePack(d.global_, d.local, d.patch_grid, global_depth=d.global_, local_depth=d.local)
        else:
            pack = model.features(sample, 2)
    return score_object(pack, bundle.normal_embedding, bundle.anomaly_embedding, sample.views,
                        cfg.tau, cfg.sigma, cfg.backproject)


def evaluate(model: Detector, samples, train_categories, mode: str = "full", keep_results: bool = False):
    """Metric table over ``samples`` (grouped by category) plus optional per-object results."""
    categories = sorted({s.category for s in samples})
    check_zero_shot(train_categories, categories)
    per_category, counts, results = {}, {}, {}
    for cat in categories:
        group = [s for s in samples if s.category == cat]
        obj_scores, obj_labels, pts, labels, regions = [], [], [], [], []
        for s in group:
            r = infer(model, s, mode)
            if not np.all(np.isfinite(r.point_scores)) or not np.isfinite(r.object_prob):
                raise NumericFailure(f"non-finite scores for {s.sample_id}")
            obj_scores.append(r.object_prob)
            obj_labels.append(s.object_label)
            pts.append(r.point_scores)
            labels.append(s.cloud.point_labels)
            regions.append(s.cloud.region_ids)
            if keep_results:
                results[s.sample_id] = r
        per_category[cat] = category_metrics(obj_scores, obj_labels, pts, labels, regions,
                                             model.cfg.pro_fpr_limit)
        counts[cat] = {"objects": len(group), "anomalous": int(sum(obj_labels)),
                       "points": int(sum(len(p) for p in pts))}
    table = summarize(per_category, counts)
    return (table, results) if keep_results else table


def history_summary(result: dict) -> dict:
    h = result["history"]
    if not h:
        return {}
    return {"first_total": h[0]["total"], "last_total": h[-1]["total"], "epochs": len(h)}


__all__ = [
    "StageConfig", "JsonLog", "object_loss", "train_stage", "train_stage1", "train_stage2", "infer",
    "evaluate", "mode_for_stage", "history_summary", "EVAL_MODES",
]
