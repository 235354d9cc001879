"""Checkpoints as safetensors files with the config and freeze flags in the header."""

from __future__ import annotations

import json
from pathlib import Path

from safetensors import SafetensorError
from safetensors.torch import load_file, safe_open, save_file

from .config import ExperimentConfig
from .errors import ConfigurationError
from .model import PARAMETER_GROUPS, STAGE_TRAINABLE, Detector, state_arrays

HEADER_KEY = "zsad3d"


def save_checkpoint(path, model: Detector, stage: int, train_categories, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frozen = {name: name not in STAGE_TRAINABLE[stage] for name in PARAMETER_GROUPS}
    meta = {
        "config": json.dumps(model.cfg.to_dict(), sort_keys=True),
        "stage": str(stage),
        "frozen": json.dumps(frozen, sort_keys=True),
        "train_categories": json.dumps(sorted(train_categories)),
        "checksums": json.dumps(model.checksums(), sort_keys=True),
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    # one header key: safetensors writes metadata keys in arbitrary order
    save_file(state_arrays(model), str(path), metadata={HEADER_KEY: json.dumps(meta, sort_keys=True)})


def read_metadata(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint {path} not found")
    try:
        with safe_open(str(path), framework="pt") as f:
            header = (f.metadata() or {}).get(HEADER_KEY)
    except SafetensorError as err:
        raise ConfigurationError(f"cannot read checkpoint {path}: {err}") from err
    if header is None:
        raise ConfigurationError(f"{path} carries no zsad3d header")
    raw = json.loads(header)
    return {
        "config": ExperimentConfig.from_dict(json.loads(raw["config"])),
        "stage": int(raw["stage"]),
        "frozen": json.loads(raw["frozen"]),
        "train_categories": json.loads(raw["train_categories"]),
        "checksums": json.loads(raw["checksums"]),
        "extra": json.loads(raw.get("extra", "{}")),
    }


def load_into(model: Detector, path) -> dict:
    """Load checkpoint weights into ``model``; architectures must agree."""
    meta = read_metadata(path)
    mine, theirs = model.cfg.architecture(), meta["config"].architecture()
    diff = sorted(k for k in mine if mine[k] != theirs[k])
    if diff:
        raise ConfigurationError(f"checkpoint architecture differs in {diff}")
    state = load_file(str(path))
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise ConfigurationError(f"checkpoint tensors do not match the model: {sorted(missing)[:5]}")
    model.load_state_dict(state)
    return meta


def load_checkpoint(path, overrides: dict | None = None):
    """Build a Detector from a checkpoint's own config (optionally overridden)."""
    meta = read_metadata(path)
    cfg = meta["config"] if not overrides else meta["config"].replace(**overrides)
    model = Detector(cfg)
    load_into(model, path)
    return model, meta
