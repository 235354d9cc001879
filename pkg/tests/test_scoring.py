import math

import numpy as np
import pytest
import torch
from scipy import ndimage

from oracles import bilinear_half_pixel, gather_back_project
from zsad3d.errors import ScoringError
from zsad3d.geometry import generate_shape
from zsad3d.projection import project_views
from zsad3d.scoring import (FeaturePack, classify_view, gaussian_filter, score_object, segment_view,
                            two_way_softmax, upsample)


def test_classify_view_values():
    t_n, t_a = torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])
    assert classify_view(torch.tensor([1.0, 1.0]), t_n, t_a, 0.07).item() == pytest.approx(0.5)
    # cosines 0.2 with T_N and 0.8 with T_A
    g = torch.tensor([0.2, 0.8, math.sqrt(1 - 0.68)], dtype=torch.float64)
    p = classify_view(g, torch.tensor([1.0, 0, 0], dtype=torch.float64),
                      torch.tensor([0, 1.0, 0], dtype=torch.float64), 0.07)
    assert p.item() == pytest.approx(1 / (1 + math.exp(-0.6 / 0.07)), abs=1e-12)
    assert p.item() == pytest.approx(0.99981, abs=1e-5)
    with pytest.raises(ScoringError):
        classify_view(torch.zeros(2), t_n, t_a)
    with pytest.raises(ScoringError):
        classify_view(torch.ones(2), t_n, t_a, tau=0.0)


def test_scale_invariance_and_monotonicity():
    torch.manual_seed(0)
    g, t_n, t_a = torch.randn(3, 8, dtype=torch.float64)
    p = classify_view(g, t_n, t_a)
    assert torch.allclose(classify_view(3.7 * g, t_n, t_a), p)
    assert torch.allclose(classify_view(g, 0.1 * t_n, 5 * t_a), p)
    # with cos(G, T_N) held at 0.3, a larger cos(G, T_A) gives a larger probability
    t_n2, t_a2 = torch.tensor([1.0, 0.0, 0.0]), torch.tensor([0.0, 1.0, 0.0])
    probs = []
    for c_a in (-0.5, 0.1, 0.2, 0.5, 0.9):
        g2 = torch.tensor([0.3, c_a, math.sqrt(1 - 0.09 - c_a**2)])
        probs.append(classify_view(g2, t_n2, t_a2).item())
    assert all(b > a for a, b in zip(probs, probs[1:]))


def test_bilinear_table():
    grid = torch.tensor([[0.0, 1.0], [2.0, 4.0]], dtype=torch.float64)
    got = upsample(grid, (4, 4)).numpy()
    assert np.allclose(got, bilinear_half_pixel(grid.numpy(), 4, 4), atol=1e-12)
    # hand table: interior samples sit at 1/4 and 3/4 between patch centres
    assert got[0].tolist() == pytest.approx([0.0, 0.25, 0.75, 1.0])
    assert got[1].tolist() == pytest.approx([0.5, 0.8125, 1.4375, 1.75])
    assert got[3].tolist() == pytest.approx([2.0, 2.5, 3.5, 4.0])


def test_bilinear_oracle_random(rng):
    grid = rng.random((7, 7))
    assert np.allclose(upsample(torch.tensor(grid), (112, 112)).numpy(), bilinear_half_pixel(grid, 112, 112),
                       atol=1e-12)


def test_gaussian_matches_scipy(rng):
    for shape, sigma in [((64, 64), 4.0), ((5, 7), 1.5), ((112, 112), 4.0), ((9, 33), 2.5)]:
        img = rng.random(shape)
        ref = ndimage.gaussian_filter(img, sigma, mode="mirror", truncate=4.0)
        assert np.allclose(gaussian_filter(torch.tensor(img), sigma).numpy(), ref, atol=1e-12)


def test_constant_maps_survive_filtering():
    c = torch.full((2, 3, 3), 0.3, dtype=torch.float64)
    assert torch.allclose(gaussian_filter(upsample(c, (32, 32)), 4.0), torch.full((2, 32, 32), 0.3,
                                                                                    dtype=torch.float64))


def test_segment_view_identities():
    torch.manual_seed(0)
    local = torch.randn(3, 16, 8, dtype=torch.float64)
    t_n, t_a = torch.randn(2, 8, dtype=torch.float64)
    normal, anomaly, final = segment_view(local, t_n, t_a, (4, 4), (32, 32), 0.07, 4.0)
    assert torch.allclose(normal + anomaly, torch.ones_like(normal), atol=1e-12)
    assert torch.allclose(final, gaussian_filter(anomaly, 4.0), atol=1e-12)


def test_score_object_aggregation():
    torch.manual_seed(0)
    cloud = generate_shape("sphere", 512, 0)
    views = project_views(cloud, 3, (32, 32), 2)
    local = torch.randn(3, 4, 8, dtype=torch.float64)
    g = torch.randn(8, dtype=torch.float64).expand(3, 8)
    t_n, t_a = torch.randn(2, 8, dtype=torch.float64)
    r = score_object(FeaturePack(g, local, (2, 2)), t_n, t_a, views, sigma=2.0)
    assert np.allclose(r.per_view_prob, r.per_view_prob[0])
    assert r.object_prob == pytest.approx(r.per_view_prob[0])
    assert np.allclose(r.point_scores, gather_back_project(r.maps_final, views), atol=1e-9)
    never = views.visibility.sum(axis=0) == 0
    assert (r.point_scores[never] == 0).all()
    assert np.isfinite(r.point_scores).all()
    assert ((0 < r.per_view_prob) & (r.per_view_prob < 1)).all()
