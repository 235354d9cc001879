"""On-disk synthetic datasets and per-sample preprocessing.

Layout of a dataset directory::

    manifest.json          splits, categories and generation settings
    clouds/<id>.ply        xyz vertices
    clouds/<id>.json       labels (run-length encoded), region ids, defect specs

Manifest splits: ``train`` and ``val`` hold objects of the training
categories, ``test`` holds only held-out categories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from plyfile import PlyData, PlyElement

from .config import ExperimentConfig
from .encoders import knn_indices, oriented_normals
from .errors import ConfigurationError, ProtocolViolation
from .geometry import CATEGORIES, DefectSpec, PointCloud, generate_shape, make_anomalous
from .projection import ViewSet, backprojection_matrix, label_maps, project_views
from .scoring import sparse_operator

SPLITS = ("train", "val", "test")


def rle_encode(labels) -> list:
    """[[start, length], ...] runs of ones."""
    labels = np.asarray(labels).astype(np.int8)
    edges = np.diff(np.r_[0, labels, 0])
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [[int(s), int(e - s)] for s, e in zip(starts, ends)]


def rle_decode(runs, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=np.uint8)
    for start, length in runs:
        out[start:start + length] = 1
    return out


def write_ply(path, points, quality=None):
    """Binary PLY with float64 xyz (lossless round trip) and an optional float32 quality field."""
    names = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    if quality is not None:
        names.append(("quality", "f4"))
    vertex = np.empty(len(points), dtype=names)
    vertex["x"], vertex["y"], vertex["z"] = np.asarray(points, dtype=np.float64).T
    if quality is not None:
        vertex["quality"] = np.asarray(quality, dtype=np.float32)
    PlyData([PlyElement.describe(vertex, "vertex")]).write(str(path))


def read_ply(path):
    v = PlyData.read(str(path))["vertex"]
    pts = np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)
    names = v.data.dtype.names
    return pts, (np.asarray(v["quality"], dtype=np.float64) if "quality" in names else None)


def save_cloud(cloud: PointCloud, directory, sample_id: str):
    d = Path(directory)
    write_ply(d / f"{sample_id}.ply", cloud.points)
    side = {
        "category": cloud.category,
        "n": cloud.n,
        "object_label": cloud.object_label,
        "label_runs": rle_encode(cloud.point_labels),
        "region_runs": {str(r): rle_encode(cloud.region_ids == r)
                        for r in np.unique(cloud.region_ids[cloud.region_ids > 0]).tolist()},
        "defects": [s.to_dict() for s in cloud.defects],
    }
    (d / f"{sample_id}.json").write_text(json.dumps(side))


def load_cloud(directory, sample_id: str) -> PointCloud:
    d = Path(directory)
    pts, _ = read_ply(d / f"{sample_id}.ply")
    side = json.loads((d / f"{sample_id}.json").read_text())
    n = side["n"]
    if len(pts) != n:
        raise ConfigurationError(f"{sample_id}: PLY has {len(pts)} points, sidecar says {n}")
    regions = np.zeros(n, dtype=np.int64)
    for rid, runs in side["region_runs"].items():
        regions[rle_decode(runs, n).astype(bool)] = int(rid)
    return PointCloud(pts, rle_decode(side["label_runs"], n), side["object_label"], side["category"],
                      regions, [DefectSpec.from_dict(s) for s in side["defects"]])


def make_sample(category: str, index: int, anomalous: bool, cfg: ExperimentConfig) -> PointCloud:
    """Deterministic object ``index`` of ``category`` under the config seed."""
    ss = np.random.SeedSequence([cfg.seed, CATEGORIES.index(category), index])
    shape_seed, defect_seed = ss.generate_state(2)
    cloud = generate_shape(category, cfg.n_points, int(shape_seed))
    if anomalous:
        rng = np.random.default_rng(int(defect_seed))
        cloud = make_anomalous(cloud, rng, cfg.defect_kinds, radius_range=cfg.radius_range,
                               magnitude_range=cfg.magnitude_range,
                               max_axis_alignment=cfg.max_axis_alignment)
    return cloud


def _anomalous_mask(count: int, ratio: float, rng) -> np.ndarray:
    n_anom = min(max(int(round(ratio * count)), 1), count - 1) if count > 1 else 0
    mask = np.zeros(count, dtype=bool)
    mask[rng.permutation(count)[:n_anom]] = True
    return mask


def generate_dataset(out_dir, cfg: ExperimentConfig) -> dict:
    """Write a dataset under ``out_dir`` and return its manifest."""
    overlap = set(cfg.train_categories) & set(cfg.test_categories)
    if overlap:
        raise ProtocolViolation(f"categories {sorted(overlap)} are both train and test")
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    samples = []
    plan = [(c, cfg.train_per_category, True) for c in cfg.train_categories]
    plan += [(c, cfg.test_per_category, False) for c in cfg.test_categories]
    for category, count, is_train in plan:
        rng = np.random.default_rng([cfg.seed, CATEGORIES.index(category), 10**6])
        anomalous = _anomalous_mask(count, cfg.anomaly_ratio, rng)
        val = np.zeros(count, dtype=bool)
        if is_train and cfg.val_fraction > 0:
            val[rng.permutation(count)[: int(round(cfg.val_fraction * count))]] = True
        for i in range(count):
            cloud = make_sample(category, i, bool(anomalous[i]), cfg)
            sid = f"{category}-{i:04d}"
            save_cloud(cloud, out / "clouds", sid)
            split = "test" if not is_train else ("val" if val[i] else "train")
            samples.append({"id": sid, "category": category, "split": split,
                            "object_label": cloud.object_label})
    manifest = {
        "seed": cfg.seed,
        "n_points": cfg.n_points,
        "train_categories": list(cfg.train_categories),
        "test_categories": list(cfg.test_categories),
        "samples": samples,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise ConfigurationError(f"no manifest.json in {data_dir}")
    return json.loads(path.read_text())


def check_zero_shot(train_categories, test_categories):
    overlap = set(train_categories) & set(test_categories)
    if overlap:
        raise ProtocolViolation(f"zero-shot protocol violated: {sorted(overlap)} seen in training and test")


def load_split(data_dir, split: str, categories=None):
    """Return [(sample id, PointCloud)] for one split, in manifest order."""
    if split not in SPLITS:
        raise ConfigurationError(f"split must be one of {SPLITS}")
    manifest = load_manifest(data_dir)
    check_zero_shot(manifest["train_categories"], manifest["test_categories"])
    out = []
    for s in manifest["samples"]:
        if s["split"] != split or (categories is not None and s["category"] not in categories):
            continue
        if split in ("train", "val") and s["category"] not in manifest["train_categories"]:
            raise ProtocolViolation(f"{s['id']} sits in the {split} split but its category is not a train category")
        if split == "test" and s["category"] in manifest["train_categories"]:
            raise ProtocolViolation(f"{s['id']} is a test sample of a training category")
        out.append((s["id"], load_cloud(Path(data_dir) / "clouds", s["id"])))
    return out


@dataclass
class PreparedSample:
    """Everything the model needs for one object, computed once."""

    sample_id: str
    cloud: PointCloud
    views: ViewSet
    points: torch.Tensor  # (n, 3)
    normals: torch.Tensor  # (n, 3), oriented outward
    neighbourhoods: tuple
    rendered: torch.Tensor  # (v, h, w)
    depth: torch.Tensor  # (v, h, w)
    view_labels: torch.Tensor  # (v, h, w)
    point_labels: torch.Tensor  # (n,)
    operator: torch.Tensor  # sparse (n, v*h*w)

    @property
    def category(self) -> str:
        return self.cloud.category

    @property
    def object_label(self) -> int:
        return self.cloud.object_label


def prepare(sample_id: str, cloud: PointCloud, cfg: ExperimentConfig, dtype=torch.float32) -> PreparedSample:
    normals = oriented_normals(cloud.points)
    views = project_views(cloud, cfg.views, (cfg.resolution, cfg.resolution), cfg.splat_radius, normals)
    pts = cloud.points
    nbh = (knn_indices(pts, cfg.point_k), knn_indices(pts, cfg.point_k, dilation=2))
    return PreparedSample(
        sample_id, cloud, views,
        torch.as_tensor(pts, dtype=dtype), torch.as_tensor(normals, dtype=dtype), nbh,
        torch.as_tensor(views.rendered, dtype=dtype),
        torch.as_tensor(views.depth, dtype=dtype),
        torch.as_tensor(label_maps(views, cloud.point_labels), dtype=dtype),
        torch.as_tensor(cloud.point_labels, dtype=dtype),
        sparse_operator(backprojection_matrix(views, cfg.backproject), dtype),
    )
