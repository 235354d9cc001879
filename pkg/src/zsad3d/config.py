"""Experiment configuration: every hyperparameter and ablation toggle in one place."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError
from .geometry import CATEGORIES, DEFECT_KINDS

STREAMS = ("render", "depth", "both")
BACKPROJECT_MODES = ("views", "visible")

# fields that change parameter shapes; a checkpoint only loads into a model that agrees on them
ARCHITECTURE_FIELDS = (
    "resolution", "patch", "width", "vision_depth", "vision_heads", "text_depth", "text_heads",
    "context", "point_dim", "global_dim", "point_k", "point_hidden", "n_learnable", "k",
    "n_prototypes", "distiller_heads", "lora_rank",
)


@dataclass
class ExperimentConfig:
    # data
    data_dir: str = "data"
    train_categories: list = field(default_factory=lambda: ["sphere", "cube", "torus"])
    test_categories: list = field(default_factory=lambda: ["cylinder"])
    defect_kinds: list = field(default_factory=lambda: list(DEFECT_KINDS))
    train_per_category: int = 40
    test_per_category: int = 40
    anomaly_ratio: float = 0.5
    n_points: int = 2048
    radius_range: tuple = (0.35, 0.5)
    magnitude_range: tuple = (0.2, 0.3)
    max_axis_alignment: float = 0.5
    val_fraction: float = 0.1
    seed: int = 0

    # projection
    views: int = 9
    resolution: int = 112
    splat_radius: int = 5
    backproject: str = "views"

    # encoders
    patch: int = 16
    width: int = 64
    vision_depth: int = 4
    vision_heads: int = 4
    text_depth: int = 2
    text_heads: int = 4
    context: int = 32
    point_dim: int = 64
    global_dim: int = 128
    point_k: int = 16
    point_hidden: int = 32

    # prompts
    n_learnable: int = 8
    k: int = 12
    n_prototypes: int = 32
    distiller_heads: int = 2

    # fusion
    lora_rank: int = 8
    lora_alpha: float = 16.0

    # scoring and losses
    tau: float = 0.07
    sigma: float = 4.0
    alpha: float = 1.0
    pro_fpr_limit: float = 0.3

    # optimisation
    stage1_epochs: int = 15
    stage1_lr: float = 0.002
    stage2_epochs: int = 10
    stage2_lr: float = 0.0005
    batch_size: int = 4

    # ablation toggles
    stream: str = "both"
    use_srm: bool = True
    use_shape_prompt: bool = True
    use_defect_prompt: bool = True
    use_con_loss: bool = True

    def __post_init__(self):
        self.radius_range = tuple(self.radius_range)
        self.magnitude_range = tuple(self.magnitude_range)
        self.train_categories = list(self.train_categories)
        self.test_categories = list(self.test_categories)
        self.defect_kinds = list(self.defect_kinds)
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigurationError(msg)

        need(self.stream in STREAMS, f"stream must be one of {STREAMS}, got {self.stream!r}")
        need(self.backproject in BACKPROJECT_MODES, f"backproject must be one of {BACKPROJECT_MODES}")
        for c in self.train_categories + self.test_categories:
            need(c in CATEGORIES, f"unknown category {c!r}")
        for kind in self.defect_kinds:
            need(kind in DEFECT_KINDS, f"unknown defect kind {kind!r}")
        need(self.views >= 1, "views must be >= 1")
        need(self.resolution >= 32 and self.resolution % self.patch == 0,
             "resolution must be >= 32 and divisible by the patch size")
        need(self.tau > 0, "temperature must be positive")
        need(self.sigma >= 0, "sigma must be non-negative")
        need(self.k >= 1 and self.k <= self.n_points, "k must lie in [1, n_points]")
        need(self.n_prototypes >= 1, "prototype bank needs at least one entry")
        need(self.n_learnable >= 0, "n_learnable must be non-negative")
        need(1 + self.n_learnable + self.k <= self.context, "anomaly prompt does not fit the text context")
        need(0.0 < self.max_axis_alignment <= 1.0, "max_axis_alignment must lie in (0, 1]")
        need(0.0 < self.anomaly_ratio < 1.0, "anomaly_ratio must lie in (0, 1)")
        need(0.0 <= self.val_fraction < 1.0, "val_fraction must lie in [0, 1)")
        need(0.0 < self.pro_fpr_limit <= 1.0, "pro_fpr_limit must lie in (0, 1]")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.stage1_epochs >= 0 and self.stage2_epochs >= 0, "epochs must be non-negative")
        need(self.n_points >= self.point_k * 2, "cloud too small for the point encoder grouping")

    # the SRM only has something to fuse when both streams are active
    @property
    def fused(self) -> bool:
        return self.stream == "both" and self.use_srm

    @property
    def needs_stage2(self) -> bool:
        return self.stream != "render"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["radius_range"] = list(self.radius_range)
        d["magnitude_range"] = list(self.magnitude_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        return cls(**d)

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)

    def architecture(self) -> dict:
        d = self.to_dict()
        return {k: d[k] for k in ARCHITECTURE_FIELDS}

    def save(self, path):
        path = Path(path)
        if path.suffix == ".toml":
            path.write_text(_to_toml(self.to_dict()))
        else:
            path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} not found")
        text = path.read_text()
        try:
            if path.suffix == ".toml":
                import tomli

                d = tomli.loads(text)
            else:
                d = json.loads(text)
        except ValueError as err:
            raise ConfigurationError(f"cannot parse {path}: {err}") from err
        return cls.from_dict(d)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigurationError(f"cannot write {type(v).__name__} to TOML")


def _to_toml(d: dict) -> str:
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in sorted(d.items()))
