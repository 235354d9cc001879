"""Object- and point-level anomaly metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from .errors import UndefinedMetricError

PRO_FPR_LIMIT = 0.3


def _check_binary(labels):
    labels = np.asarray(labels).astype(bool)
    return labels, int(labels.sum()), int((~labels).sum())


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of P(positive outranks negative); ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels, n_pos, n_neg = _check_binary(labels)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative samples")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-wise area under the precision-recall curve, one step per distinct score."""
    scores = np.asarray(scores, dtype=np.float64)
    labels, n_pos, _ = _check_binary(labels)
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # evaluate only at the last element of each tie group
    last = np.r_[s[1:] != s[:-1], True]
    tp = tp[last]
    predicted = np.flatnonzero(last) + 1
    precision = tp / predicted
    recall_step = np.diff(np.r_[0, tp]) / n_pos
    return float((recall_step * precision).sum())


def regions_from_knn(points, labels, k: int = 8) -> np.ndarray:
    """Connected components of anomalous points over a symmetric k-NN graph.

    Returns region ids per point: 0 for normal points, 1.. for regions.
    """
    labels = np.asarray(labels).astype(bool)
    out = np.zeros(len(labels), dtype=np.int64)
    idx = np.flatnonzero(labels)
    if len(idx) == 0:
        return out
    pts = np.asarray(points)[idx]
    kk = min(k + 1, len(idx))
    _, nb = cKDTree(pts).query(pts, k=kk)
    nb = nb.reshape(len(idx), kk)
    rows = np.repeat(np.arange(len(idx)), kk)
    graph = coo_matrix((np.ones(rows.size), (rows, nb.ravel())), shape=(len(idx), len(idx)))
    _, comp = connected_components(graph, directed=False)
    out[idx] = comp + 1
    return out


def pro_curve(scores, region_ids):
    """(fpr, mean region overlap) after each distinct threshold, highest first."""
    scores = np.asarray(scores, dtype=np.float64)
    region_ids = np.asarray(region_ids)
    anomalous = region_ids > 0
    n_normal = int((~anomalous).sum())
    regions, sizes = np.unique(region_ids[anomalous], return_counts=True)
    if len(regions) == 0:
        raise UndefinedMetricError("PRO needs at least one anomalous region")
    if n_normal == 0:
        raise UndefinedMetricError("PRO needs at least one normal point")
    size_of = dict(zip(regions.tolist(), sizes.tolist()))
    weight = np.zeros(len(scores))
    weight[anomalous] = [1.0 / (len(regions) * size_of[r]) for r in region_ids[anomalous].tolist()]

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    overlap = np.cumsum(weight[order])
    fpr = np.cumsum(~anomalous[order]) / n_normal
    last = np.r_[s[1:] != s[:-1], True]
    return fpr[last], overlap[last]


def integrate_limited(x, y, limit: float) -> float:
    """Trapezoid area under a curve starting at (0, 0), cut at x = limit."""
    x = np.r_[0.0, x]
    y = np.r_[0.0, y]
    keep = x <= limit
    xs, ys = x[keep], y[keep]
    area = float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))
    nxt = int(keep.sum())
    if nxt < len(x) and xs[-1] < limit:
        # interpolate the segment that crosses the limit
        x0, x1, y0, y1 = xs[-1], x[nxt], ys[-1], y[nxt]
        y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        area += (limit - x0) * (y0 + y_lim) / 2.0
    return area


def pro(point_scores, point_labels=None, regions=None, fpr_limit: float = PRO_FPR_LIMIT,
        points=None) -> float:
    """Normalised area under the per-region-overlap curve up to ``fpr_limit``.

    ``regions`` gives a region id per point (0 = normal).  Without it, regions
    are the k-NN connected components of the labelled points, which then
    requires ``points``.
    """
    if regions is None:
        if point_labels is None or points is None:
            raise UndefinedMetricError("PRO needs region ids or labelled points with coordinates")
        regions = regions_from_knn(points, point_labels)
    fpr, overlap = pro_curve(point_scores, regions)
    return integrate_limited(fpr, overlap, fpr_limit) / fpr_limit


@dataclass
class MetricTable:
    o_auroc: float
    o_ap: float
    p_auroc: float
    p_pro: float
    per_category: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        lines = [f"{'category':<16}{'(O-R, O-A)':>16}{'(P-R, P-P)':>16}"]
        rows = list(self.per_category.items()) + [("mean", asdict(self))]
        for name, m in rows:
            obj = f"({100 * m['o_auroc']:.1f}, {100 * m['o_ap']:.1f})"
            pt = f"({100 * m['p_auroc']:.1f}, {100 * m['p_pro']:.1f})"
            lines.append(f"{name:<16}{obj:>16}{pt:>16}")
        return "\n".join(lines)


def category_metrics(object_scores, object_labels, point_scores, point_labels, region_ids,
                     fpr_limit: float = PRO_FPR_LIMIT) -> dict:
    """Metrics for one category; point arrays are lists with one entry per object."""
    offset, pooled_regions = 0, []
    for rid in region_ids:
        rid = np.asarray(rid)
        pooled_regions.append(np.where(rid > 0, rid + offset, 0))
        offset += int(rid.max(initial=0))
    ps = np.concatenate(point_scores)
    return {
        "o_auroc": auroc(object_scores, object_labels),
        "o_ap": average_precision(object_scores, object_labels),
        "p_auroc": auroc(ps, np.concatenate(point_labels)),
        "p_pro": pro(ps, regions=np.concatenate(pooled_regions), fpr_limit=fpr_limit),
    }


def summarize(per_category: dict, counts: dict) -> MetricTable:
    keys = ("o_auroc", "o_ap", "p_auroc", "p_pro")
    means = {k: float(np.mean([m[k] for m in per_category.values()])) for k in keys}
    return MetricTable(**means, per_category=per_category, counts=counts)
