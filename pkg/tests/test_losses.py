import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from zsad3d.errors import ScoringError
from zsad3d.losses import dice, focal, loss_cla, loss_con, loss_seg, stage_total


def test_cross_entropy_hand_values():
    assert loss_cla(torch.tensor(0.5), 1).item() == pytest.approx(math.log(2))
    assert loss_cla(torch.tensor(0.1, dtype=torch.float64), 1).item() == pytest.approx(2.3026, abs=1e-4)
    assert loss_cla(torch.tensor(0.1, dtype=torch.float64), 0).item() == pytest.approx(-math.log(0.9))
    # clamped, never infinite
    assert math.isfinite(loss_cla(torch.tensor(0.0), 1).item())
    assert math.isfinite(loss_cla(torch.tensor(1.0), 0).item())


def test_dice_hand_example():
    pred = torch.tensor([1.0, 0.0, 1.0, 0.0])
    target = torch.tensor([1.0, 1.0, 0.0, 0.0])
    assert dice(pred, target).item() == pytest.approx(1 - 3 / 5)
    assert dice(target, target).item() == pytest.approx(0.0)
    # all-normal target with all-zero prediction is a perfect match thanks to smoothing
    assert dice(torch.zeros(4), torch.zeros(4)).item() == pytest.approx(0.0)


def test_focal_hand_value():
    p = torch.tensor([0.8, 0.3], dtype=torch.float64)
    y = torch.tensor([1.0, 0.0], dtype=torch.float64)
    want = (-0.25 * 0.2**2 * math.log(0.8) - 0.75 * 0.3**2 * math.log(0.7)) / 2
    assert focal(p, y).item() == pytest.approx(want, abs=1e-12)


def test_consistency_hand_value_and_degenerate():
    g = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    assert loss_con(g).item() == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-12)
    assert loss_con(g).item() == pytest.approx(0.2929, abs=1e-4)
    assert loss_con(torch.ones(3, 4)).item() == pytest.approx(0.0, abs=1e-7)
    with pytest.raises(ScoringError):
        loss_con(torch.tensor([[1.0, 0.0], [-1.0, 0.0]]))
    with pytest.raises(ScoringError):
        loss_con(torch.tensor([[1.0, 0.0], [0.0, 0.0]]))


def test_stage_total():
    assert stage_total(1.0, 0.5, 0.2, 2) == pytest.approx(1.7)
    assert stage_total(1.0, 0.5, 0.2, 2, alpha=0.5) == pytest.approx(1.6)
    assert stage_total(1.0, 0.5, 123.0, 1) == pytest.approx(1.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_consistency_range_and_view_permutation(v, d, seed):
    g = torch.tensor(np.random.default_rng(seed).normal(size=(v, d)) + 0.5, dtype=torch.float64)
    if float(g.mean(0).norm()) < 1e-6:
        return
    value = loss_con(g).item()
    assert 0.0 <= value <= 2.0
    perm = torch.tensor(np.random.default_rng(seed + 1).permutation(v))
    assert loss_con(g[perm]).item() == pytest.approx(value, abs=1e-12)
    assert loss_con(3.0 * g).item() == pytest.approx(value, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_segmentation_loss_view_permutation(seed):
    rng = np.random.default_rng(seed)
    pts = torch.tensor(rng.random(20))
    lab = torch.tensor((rng.random(20) < 0.3).astype(float))
    maps = torch.tensor(rng.random((4, 5, 5)))
    vlab = torch.tensor((rng.random((4, 5, 5)) < 0.3).astype(float))
    perm = torch.tensor(rng.permutation(4))
    a = loss_seg(pts, lab, maps, vlab).item()
    b = loss_seg(pts, lab, maps[perm], vlab[perm]).item()
    assert a == pytest.approx(b, abs=1e-12)
    assert a >= 0
