"""Module ablation grid and hyperparameter sweeps.

Grid rows share stage-1 weights whenever their prompt toggles agree, so the
seven rows cost four stage-1 runs and six stage-2 runs.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .data import load_manifest
from .model import Detector
from .pipeline import init_run_dir, manifest_categories, prepare_split
from .training import JsonLog, evaluate, history_summary, train_stage1, train_stage2

log = logging.getLogger(__name__)

SWEEPS = {"k": (4, 8, 12, 16, 20), "n_prototypes": (8, 16, 32, 64), "views": (1, 3, 5, 7, 9)}


@dataclass(frozen=True)
class GridRow:
    name: str
    stream: str
    srm: bool
    shape_prompt: bool
    defect_prompt: bool
    con_loss: bool

    @property
    def mode(self) -> str:
        return "render-only" if self.stream == "render" else "full"

    def apply(self, cfg: ExperimentConfig) -> ExperimentConfig:
        return cfg.replace(stream=self.stream, use_srm=self.srm, use_shape_prompt=self.shape_prompt,
                           use_defect_prompt=self.defect_prompt, use_con_loss=self.con_loss)

    def marks(self) -> list:
        return ["x" if f else "" for f in (self.srm, self.shape_prompt, self.defect_prompt, self.con_loss)]


GRID = (
    GridRow("renderings", "render", False, False, False, False),
    GridRow("depth map", "depth", False, False, False, False),
    GridRow("srm", "both", True, False, False, False),
    GridRow("srm+sp", "both", True, True, False, False),
    GridRow("srm+dp", "both", True, False, True, False),
    GridRow("srm+sp+dp", "both", True, True, True, False),
    GridRow("full", "both", True, True, True, True),
)


def _record(table) -> dict:
    return {"o_auroc": table.o_auroc, "o_ap": table.o_ap, "p_auroc": table.p_auroc, "p_pro": table.p_pro}


def run_config(cfg: ExperimentConfig, train, val, test, train_categories, out_dir, mode="full",
               stage1_state=None) -> tuple:
    """Train (or reuse stage 1) and evaluate one configuration; returns (metrics, stage-1 state)."""
    out = init_run_dir(out_dir, cfg)
    sink = JsonLog(out / "logs" / "metrics.jsonl")
    model = Detector(cfg)
    if stage1_state is None:
        result = train_stage1(model, train, sink=sink, val_samples=val)
        save_checkpoint(out / "checkpoints" / "stage1.safetensors", model, 1, train_categories,
                        {"history": history_summary(result)})
        stage1_state = copy.deepcopy(model.state_dict())
    else:
        model.load_state_dict(stage1_state)
    if mode != "render-only" and cfg.needs_stage2:
        result = train_stage2(model, train, sink=sink, val_samples=val)
        save_checkpoint(out / "checkpoints" / "stage2.safetensors", model, 2, train_categories,
                        {"history": history_summary(result)})
    table = evaluate(model, test, train_categories, mode)
    (out / "metrics.json").write_text(json.dumps(table.to_dict(), indent=2, sort_keys=True) + "\n")
    sink.write({"kind": "eval", "mode": mode, **_record(table)})
    return table, stage1_state


def run_grid(cfg: ExperimentConfig, data_dir, out_dir, prepared=None) -> list:
    """Evaluate every grid row; returns [{row fields, metrics}]."""
    train_categories, _ = manifest_categories(data_dir)
    train, val, test = prepared or [prepare_split(data_dir, s, cfg) for s in ("train", "val", "test")]
    stage1 = {}
    rows = []
    for i, row in enumerate(GRID, start=1):
        t0 = time.perf_counter()
        row_cfg = row.apply(cfg)
        key = (row.shape_prompt, row.defect_prompt)
        table, state = run_config(row_cfg, train, val, test, train_categories,
                                  Path(out_dir) / f"row{i}-{row.name.replace(' ', '-')}", row.mode,
                                  stage1.get(key))
        stage1.setdefault(key, state)
        rows.append({"row": i, "name": row.name, "stream": row.stream, "srm": row.srm,
                     "shape_prompt": row.shape_prompt, "defect_prompt": row.defect_prompt,
                     "con_loss": row.con_loss, **_record(table)})
        log.info("grid row %d %s done in %.0fs", i, row.name, time.perf_counter() - t0)
    return rows


def format_grid(rows) -> str:
    head = f"{'SRM':>4} {'SP':>3} {'DP':>3} {'Lcon':>5}   {'O-AUROC':>8} {'O-AP':>6}   {'P-AUROC':>8} {'P-PRO':>6}"
    lines = [head]
    for r, row in zip(rows, GRID):
        srm, sp, dp, con = row.marks()
        if row.stream != "both":
            srm = f"({row.name})"
        lines.append(f"{srm:>4} {sp:>3} {dp:>3} {con:>5}   {100 * r['o_auroc']:8.1f} {100 * r['o_ap']:6.1f}"
                     f"   {100 * r['p_auroc']:8.1f} {100 * r['p_pro']:6.1f}")
    return "\n".join(lines)


def run_sweeps(cfg: ExperimentConfig, data_dir, out_dir, sweeps=None, reference=None, prepared=None) -> dict:
    """One-at-a-time sweeps around the full configuration.

    ``reference`` holds the full model's metrics; values equal to the base
    config reuse it instead of retraining.
    """
    sweeps = sweeps or SWEEPS
    train_categories, _ = manifest_categories(data_dir)
    cache = {cfg.views: prepared} if prepared else {}
    out = {}
    for name, values in sweeps.items():
        out[name] = []
        for value in values:
            if value == getattr(cfg, name) and reference is not None:
                out[name].append({"value": value, **reference})
                continue
            run_cfg = cfg.replace(**{name: value})
            views = run_cfg.views
            if views not in cache:
                cache[views] = [prepare_split(data_dir, s, run_cfg) for s in ("train", "val", "test")]
            train, val, test = cache[views]
            table, _ = run_config(run_cfg, train, val, test, train_categories, Path(out_dir) / f"{name}-{value}")
            out[name].append({"value": value, **_record(table)})
            log.info("sweep %s=%s done", name, value)
    return out


def ablate(cfg: ExperimentConfig, data_dir, out_dir, what: str = "all") -> dict:
    """Grid and/or sweeps; writes ablation.json and ablation.txt under ``out_dir``."""
    out = init_run_dir(out_dir, cfg)
    load_manifest(data_dir)
    prepared = [prepare_split(data_dir, s, cfg) for s in ("train", "val", "test")]
    result = {}
    text = []
    if what in ("grid", "all"):
        result["grid"] = run_grid(cfg, data_dir, out / "grid", prepared)
        text.append(format_grid(result["grid"]))
    if what in ("sweeps", "all"):
        reference = None
        if "grid" in result:
            reference = {k: result["grid"][-1][k] for k in ("o_auroc", "o_ap", "p_auroc", "p_pro")}
        result["sweeps"] = run_sweeps(cfg, data_dir, out / "sweeps", reference=reference, prepared=prepared)
        for name, entries in result["sweeps"].items():
            text.append(f"{name}: " + ", ".join(
                f"{e['value']}={100 * e['o_auroc']:.1f}/{100 * e['p_pro']:.1f}" for e in entries))
    (out / "ablation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    (out / "ablation.txt").write_text("\n\n".join(text) + "\n")
    return result
