import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsad3d.config import ExperimentConfig
from zsad3d.data import (check_zero_shot, generate_dataset, load_cloud, load_manifest, load_split, read_ply,
                         rle_decode, rle_encode, save_cloud, write_ply)
from zsad3d.errors import ConfigurationError, ProtocolViolation
from zsad3d.geometry import generate_shape


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), max_size=200))
def test_rle_round_trip(bits):
    labels = np.array(bits, dtype=np.uint8)
    runs = rle_encode(labels)
    assert np.array_equal(rle_decode(runs, len(labels)), labels)
    assert sum(length for _, length in runs) == labels.sum()


def test_rle_hand_example():
    assert rle_encode([0, 1, 1, 0, 1]) == [[1, 2], [4, 1]]


def test_ply_round_trip(tmp_path, rng):
    pts = rng.normal(size=(50, 3))
    q = rng.random(50)
    write_ply(tmp_path / "a.ply", pts, q)
    back, quality = read_ply(tmp_path / "a.ply")
    assert np.array_equal(back, pts)
    assert np.allclose(quality, q, atol=1e-7)
    write_ply(tmp_path / "b.ply", pts)
    assert read_ply(tmp_path / "b.ply")[1] is None


def test_cloud_round_trip(tmp_path, tiny_config):
    from zsad3d.data import make_sample

    cloud = make_sample("cube", 1, True, tiny_config)
    save_cloud(cloud, tmp_path, "x")
    back = load_cloud(tmp_path, "x")
    assert np.array_equal(back.points, cloud.points)
    assert np.array_equal(back.point_labels, cloud.point_labels)
    assert np.array_equal(back.region_ids, cloud.region_ids)
    assert back.object_label == cloud.object_label == 1
    assert [d.to_dict() for d in back.defects] == [d.to_dict() for d in cloud.defects]


def test_dataset_splits(tmp_path, tiny_config):
    cfg = tiny_config.replace(train_per_category=10, test_per_category=6, val_fraction=0.2)
    manifest = generate_dataset(tmp_path, cfg)
    by_split = {}
    for s in manifest["samples"]:
        by_split.setdefault(s["split"], []).append(s)
    assert {s["category"] for s in by_split["test"]} == {"cylinder"}
    assert {s["category"] for s in by_split["train"] + by_split["val"]} == {"sphere", "cube", "torus"}
    assert len(by_split["val"]) == 3 * 2 and len(by_split["test"]) == 6
    for cat in ("sphere", "cube", "torus", "cylinder"):
        labels = {s["object_label"] for s in manifest["samples"] if s["category"] == cat}
        assert labels == {0, 1}
    assert load_manifest(tmp_path) == json.loads((tmp_path / "manifest.json").read_text())
    assert [sid for sid, _ in load_split(tmp_path, "test")] == [s["id"] for s in by_split["test"]]


def test_dataset_is_deterministic(tmp_path, tiny_config):
    generate_dataset(tmp_path / "a", tiny_config)
    generate_dataset(tmp_path / "b", tiny_config)
    for f in sorted((tmp_path / "a" / "clouds").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "clouds" / f.name).read_bytes()


def test_zero_shot_checks(tmp_path, tiny_config):
    check_zero_shot(["sphere"], ["cube"])
    with pytest.raises(ProtocolViolation):
        check_zero_shot(["sphere", "cube"], ["cube"])
    with pytest.raises(ProtocolViolation):
        generate_dataset(tmp_path, tiny_config.replace(test_categories=["sphere"]))
    generate_dataset(tmp_path, tiny_config)
    m = load_manifest(tmp_path)
    m["test_categories"] = ["cylinder", "torus"]
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ProtocolViolation):
        load_split(tmp_path, "test")
    with pytest.raises(ConfigurationError):
        load_split(tmp_path, "holdout")
    with pytest.raises(ConfigurationError):
        load_manifest(tmp_path / "missing")


def test_sample_of_wrong_split_is_rejected(tmp_path, tiny_config):
    generate_dataset(tmp_path, tiny_config)
    m = load_manifest(tmp_path)
    first_test = next(s for s in m["samples"] if s["split"] == "test")
    first_test["split"] = "train"
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ProtocolViolation):
        load_split(tmp_path, "train")


def test_ply_point_count_mismatch(tmp_path):
    cloud = generate_shape("sphere", 256, 0)
    save_cloud(cloud, tmp_path, "s")
    write_ply(tmp_path / "s.ply", cloud.points[:10])
    with pytest.raises(ConfigurationError):
        load_cloud(tmp_path, "s")
