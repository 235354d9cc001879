"""Run-directory level operations shared by the CLI and the ablation driver.

Run directory layout::

    config.json              resolved ExperimentConfig
    checkpoints/stage1.safetensors, checkpoints/stage2.safetensors
    logs/metrics.jsonl       step, epoch and evaluation records
    maps/                    render-maps output
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint, load_into, read_metadata, save_checkpoint
from .config import ExperimentConfig
from .data import check_zero_shot, load_manifest, load_split, prepare, write_ply
from .errors import ConfigurationError, ProtocolViolation
from .model import Detector
from .training import JsonLog, evaluate, history_summary, infer, mode_for_stage, train_stage1, train_stage2

log = logging.getLogger(__name__)

CHECKPOINT_NAMES = {1: "stage1.safetensors", 2: "stage2.safetensors"}


def init_run_dir(out_dir, cfg: ExperimentConfig) -> Path:
    out = Path(out_dir)
    for sub in ("checkpoints", "logs", "maps"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    return out


def prepare_split(data_dir, split: str, cfg: ExperimentConfig, categories=None):
    return [prepare(sid, cloud, cfg) for sid, cloud in load_split(data_dir, split, categories)]


def manifest_categories(data_dir):
    m = load_manifest(data_dir)
    check_zero_shot(m["train_categories"], m["test_categories"])
    return m["train_categories"], m["test_categories"]


def train_run(cfg: ExperimentConfig, data_dir, out_dir, stage: str = "all", init_checkpoint=None,
              samples=None) -> dict:
    """Train stage 1, stage 2 or both into ``out_dir``; returns a summary dict.

    ``samples`` may carry already prepared (train, val) lists to skip preprocessing.
    """
    if stage not in ("1", "2", "all"):
        raise ConfigurationError(f"stage must be 1, 2 or all, got {stage!r}")
    train_categories, _ = manifest_categories(data_dir)
    out = init_run_dir(out_dir, cfg)
    sink = JsonLog(out / "logs" / "metrics.jsonl")
    if samples is None:
        samples = (prepare_split(data_dir, "train", cfg), prepare_split(data_dir, "val", cfg))
    train, val = samples
    model = Detector(cfg)
    summary = {}
    if stage in ("1", "all"):
        result = train_stage1(model, train, sink=sink, val_samples=val)
        path = out / "checkpoints" / CHECKPOINT_NAMES[1]
        save_checkpoint(path, model, 1, train_categories, {"history": history_summary(result)})
        summary["stage1"] = {"checkpoint": str(path), **history_summary(result)}
    else:
        src = Path(init_checkpoint) if init_checkpoint else out / "checkpoints" / CHECKPOINT_NAMES[1]
        meta = load_into(model, src)
        if meta["stage"] != 1:
            raise ConfigurationError(f"{src} is not a stage-1 checkpoint")
        if sorted(meta["train_categories"]) != sorted(train_categories):
            raise ProtocolViolation("stage-1 checkpoint was trained on different categories")
    if stage in ("2", "all"):
        if cfg.needs_stage2:
            result = train_stage2(model, train, sink=sink, val_samples=val)
            summary["stage2"] = history_summary(result)
        else:
            summary["stage2"] = {"skipped": "render stream has no stage-2 parameters in use"}
        path = out / "checkpoints" / CHECKPOINT_NAMES[2]
        save_checkpoint(path, model, 2, train_categories, {"history": summary["stage2"]})
        summary["stage2"]["checkpoint"] = str(path)
    return summary


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def eval_run(checkpoint, data_dir, split: str = "test", mode: str | None = None, out_dir=None,
             samples=None):
    """Evaluate a checkpoint; writes metrics JSON and a text table next to the run."""
    meta = read_metadata(checkpoint)
    manifest = load_manifest(data_dir)
    check_zero_shot(meta["train_categories"], manifest["test_categories"])
    check_zero_shot(manifest["train_categories"], manifest["test_categories"])
    model, meta = load_checkpoint(checkpoint)
    mode = mode or mode_for_stage(meta["stage"])
    if samples is None:
        samples = prepare_split(data_dir, split, model.cfg)
    if split != "test":
        # in-distribution diagnostics: the zero-shot check does not apply to held-in splits
        table = evaluate(model, samples, [], mode)
    else:
        check_zero_shot(meta["train_categories"], {s.category for s in samples})
        table = evaluate(model, samples, meta["train_categories"], mode)
    result = {"checkpoint": Path(checkpoint).name, "split": split, "mode": mode, "stage": meta["stage"],
              "metrics": table.to_dict()}
    out = Path(out_dir) if out_dir else Path(checkpoint).resolve().parent.parent
    out.mkdir(parents=True, exist_ok=True)
    stem = f"metrics_{split}_{Path(checkpoint).stem}"
    (out / f"{stem}.json").write_text(_dumps(result))
    (out / f"{stem}.txt").write_text(table.format() + "\n")
    logs = out / "logs"
    if logs.is_dir():
        JsonLog(logs / "metrics.jsonl").write({"kind": "eval", **result})
    return table, result


def heat_colors(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to RGB along a blue-cyan-yellow-red ramp."""
    stops = np.array([[0, 0, 160], [0, 200, 255], [255, 230, 0], [230, 0, 0]], dtype=np.float64)
    x = np.clip(values, 0, 1) * (len(stops) - 1)
    lo = np.minimum(x.astype(int), len(stops) - 2)
    frac = (x - lo)[..., None]
    return (stops[lo] * (1 - frac) + stops[lo + 1] * frac).astype(np.uint8)


def overlay(rendered: np.ndarray, score_map: np.ndarray, foreground: np.ndarray, alpha: float = 0.5):
    gray = np.repeat((np.clip(rendered, 0, 1) * 255)[..., None], 3, axis=-1)
    blend = (1 - alpha) * gray + alpha * heat_colors(score_map)
    out = np.where(foreground[..., None], blend, gray)
    return out.astype(np.uint8)


def render_maps(checkpoint, data_dir, out_dir, split: str = "test", ids=None, mode: str | None = None) -> dict:
    """Per-view heatmaps and a per-point score PLY for the selected objects."""
    model, meta = load_checkpoint(checkpoint)
    mode = mode or mode_for_stage(meta["stage"])
    pairs = load_split(data_dir, split)
    if ids:
        wanted = set(ids)
        pairs = [p for p in pairs if p[0] in wanted]
        missing = wanted - {p[0] for p in pairs}
        if missing:
            raise ConfigurationError(f"unknown sample ids in split {split!r}: {sorted(missing)}")
    else:
        pairs = default_pair(pairs)
    out = Path(out_dir)
    summary = {}
    for sid, cloud in pairs:
        sample = prepare(sid, cloud, model.cfg)
        r = infer(model, sample, mode)
        d = out / sid
        d.mkdir(parents=True, exist_ok=True)
        fg = sample.views.foreground()
        for i in range(sample.views.v):
            Image.fromarray(overlay(sample.views.rendered[i], r.maps_final[i], fg[i])).save(d / f"view_{i:02d}.png")
        write_ply(d / "scores.ply", cloud.points, r.point_scores)
        summary[sid] = {"object_label": cloud.object_label, "object_prob": r.object_prob,
                        "map_p99": float(np.percentile(r.maps_final[fg], 99)),
                        "point_p99": float(np.percentile(r.point_scores, 99))}
    (out / "summary.json").write_text(_dumps(summary))
    return summary


def default_pair(pairs):
    """The first normal and the first anomalous object of a split."""
    normal = next((p for p in pairs if p[1].object_label == 0), None)
    anomalous = next((p for p in pairs if p[1].object_label == 1), None)
    return [p for p in (normal, anomalous) if p is not None]
