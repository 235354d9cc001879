"""Synthetic point clouds and geometric defect injection.

Normal objects are surface samples of five primitive shapes, normalised to the
unit bounding sphere.  Defects are local displacements (dent, bump, crack) or a
removed patch (missing-region), labelled point-wise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import ConfigurationError, DefectRejected

CATEGORIES = ("sphere", "cube", "cylinder", "torus", "rounded-prism")
DEFECT_KINDS = ("dent", "bump", "crack", "missing-region")
MIN_POINTS = 256


@dataclass
class PointCloud:
    points: np.ndarray
    point_labels: np.ndarray
    object_label: int
    category: str
    # 0 for normal points, j >= 1 for points of the j-th injected defect
    region_ids: np.ndarray | None = None
    defects: list = field(default_factory=list)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.point_labels = np.asarray(self.point_labels, dtype=np.uint8)
        if self.region_ids is None:
            self.region_ids = self.point_labels.astype(np.int64)
        self.region_ids = np.asarray(self.region_ids, dtype=np.int64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ConfigurationError(f"points must be n x 3, got {self.points.shape}")
        if len(self.point_labels) != len(self.points) or len(self.region_ids) != len(self.points):
            raise ConfigurationError("label arrays must match the point count")
        if not np.all(np.isfinite(self.points)):
            raise ConfigurationError("point coordinates must be finite")
        self.object_label = int(self.point_labels.any())

    @property
    def n(self) -> int:
        return len(self.points)

    def copy(self) -> "PointCloud":
        return PointCloud(
            self.points.copy(),
            self.point_labels.copy(),
            self.object_label,
            self.category,
            self.region_ids.copy(),
            list(self.defects),
        )


@dataclass(frozen=True)
class DefectSpec:
    kind: str
    center: tuple
    radius: float
    magnitude: float

    def __post_init__(self):
        if self.kind not in DEFECT_KINDS:
            raise ConfigurationError(f"unknown defect kind {self.kind!r}")
        if not 0.0 < self.radius <= 0.5:
            raise ConfigurationError(f"defect radius must lie in (0, 0.5], got {self.radius}")
        if not 0.0 < self.magnitude <= 0.3:
            raise ConfigurationError(f"defect magnitude must lie in (0, 0.3], got {self.magnitude}")
        c = np.asarray(self.center, dtype=np.float64)
        norm = np.linalg.norm(c)
        if c.shape != (3,) or not np.isfinite(norm) or norm == 0:
            raise ConfigurationError("defect center must be a nonzero 3-vector")
        object.__setattr__(self, "center", tuple(float(x) for x in c / norm))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "center": list(self.center), "radius": self.radius,
                "magnitude": self.magnitude}

    @classmethod
    def from_dict(cls, d: dict) -> "DefectSpec":
        return cls(d["kind"], tuple(d["center"]), float(d["radius"]), float(d["magnitude"]))


def normalize(points: np.ndarray, center=None) -> np.ndarray:
    """Shift ``center`` (default: the bounding-box midpoint) to the origin and scale to max norm 1."""
    if center is None:
        center = 0.5 * (points.min(axis=0) + points.max(axis=0))
    centered = points - center
    return centered / np.linalg.norm(centered, axis=1).max()


def _sample_sphere(rng, n):
    p = rng.standard_normal((n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def _sample_box(rng, n, half):
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]) * 2
    face_axis = rng.choice(3, size=n, p=areas / areas.sum())
    p = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    sign = rng.choice([-1.0, 1.0], size=n)
    p[np.arange(n), face_axis] = sign * half[face_axis]
    return p


def _sample_cylinder(rng, n, radius, half_height):
    side = 2 * np.pi * radius * 2 * half_height
    cap = np.pi * radius**2
    on_side = rng.uniform(size=n) < side / (side + 2 * cap)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    r = np.where(on_side, radius, radius * np.sqrt(rng.uniform(size=n)))
    z = np.where(on_side, rng.uniform(-half_height, half_height, size=n),
                 rng.choice([-half_height, half_height], size=n))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _sample_torus(rng, n, major, minor):
    out = []
    while sum(len(o) for o in out) < n:
        u = rng.uniform(0, 2 * np.pi, size=2 * n)
        v = rng.uniform(0, 2 * np.pi, size=2 * n)
        # area element is proportional to (major + minor cos v)
        keep = rng.uniform(size=2 * n) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out.append(np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1))
    return np.concatenate(out)[:n]


def _triangle_vertices(side):
    angles = np.pi / 2 + np.array([0.0, 2.0, 4.0]) * np.pi / 3
    return side / np.sqrt(3) * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _dist_to_triangle(xy, verts):
    d = np.full(len(xy), np.inf)
    inside = np.ones(len(xy), dtype=bool)
    for i in range(3):
        a, b = verts[i], verts[(i + 1) % 3]
        ab = b - a
        t = np.clip(((xy - a) @ ab) / (ab @ ab), 0, 1)
        d = np.minimum(d, np.linalg.norm(xy - (a + t[:, None] * ab), axis=1))
        cross = ab[0] * (xy[:, 1] - a[1]) - ab[1] * (xy[:, 0] - a[0])
        inside &= cross >= 0
    return np.where(inside, 0.0, d)


def _sample_rounded_prism(rng, n, side, corner_radius, half_height):
    verts = _triangle_vertices(side)
    edge_len = side
    perimeter = 3 * edge_len + 2 * np.pi * corner_radius
    cap_area = np.sqrt(3) / 4 * side**2 + 3 * edge_len * corner_radius + np.pi * corner_radius**2
    side_area = perimeter * 2 * half_height
    on_side = rng.uniform(size=n) < side_area / (side_area + 2 * cap_area)
    n_side, n_cap = int(on_side.sum()), int((~on_side).sum())

    # outline: three offset edges and three arcs, parametrised by arc length
    s = rng.uniform(0, perimeter, size=n_side)
    xy_side = np.empty((n_side, 2))
    seg = edge_len + 2 * np.pi * corner_radius / 3
    for i in range(3):
        a, b = verts[i], verts[(i + 1) % 3]
        ab = (b - a) / edge_len
        normal = np.array([ab[1], -ab[0]])
        local = s - i * seg
        on_edge = (local >= 0) & (local < edge_len)
        xy_side[on_edge] = a + local[on_edge, None] * ab + corner_radius * normal
        on_arc = (local >= edge_len) & (local < seg)
        phi0 = np.arctan2(normal[1], normal[0])
        phi = phi0 + (local[on_arc] - edge_len) / corner_radius
        xy_side[on_arc] = b + corner_radius * np.stack([np.cos(phi), np.sin(phi)], axis=1)
    z_side = rng.uniform(-half_height, half_height, size=n_side)

    bound = side / np.sqrt(3) + corner_radius
    caps = []
    while sum(len(c) for c in caps) < n_cap:
        xy = rng.uniform(-bound, bound, size=(4 * n_cap + 16, 2))
        caps.append(xy[_dist_to_triangle(xy, verts) <= corner_radius])
    xy_cap = np.concatenate(caps)[:n_cap]
    z_cap = rng.choice([-half_height, half_height], size=n_cap)
    pts = np.empty((n, 3))
    pts[on_side] = np.column_stack([xy_side, z_side])
    pts[~on_side] = np.column_stack([xy_cap, z_cap])
    return pts


def generate_shape(category: str, n: int, seed: int) -> PointCloud:
    """Sample ``n`` surface points of a randomly posed primitive.

    Apart from the sphere, each shape gets mild seeded proportions so the
    members of a category are not all identical.
    """
    if category not in CATEGORIES:
        raise ConfigurationError(f"unknown category {category!r}; expected one of {CATEGORIES}")
    if n < MIN_POINTS:
        raise ConfigurationError(f"need at least {MIN_POINTS} points, got {n}")
    rng = np.random.default_rng(seed)
    if category == "sphere":
        pts = _sample_sphere(rng, n)
    elif category == "cube":
        pts = _sample_box(rng, n, rng.uniform(0.85, 1.15, size=3))
    elif category == "cylinder":
        pts = _sample_cylinder(rng, n, rng.uniform(0.45, 0.6), rng.uniform(0.6, 0.9))
    elif category == "torus":
        pts = _sample_torus(rng, n, rng.uniform(0.6, 0.75), rng.uniform(0.22, 0.32))
    else:
        pts = _sample_rounded_prism(rng, n, rng.uniform(1.0, 1.3), rng.uniform(0.12, 0.22),
                                    rng.uniform(0.5, 0.8))
    pts = Rotation.random(random_state=rng).apply(pts)
    # every primitive is built around the origin, so scale about it
    return PointCloud(normalize(pts, np.zeros(3)), np.zeros(n, dtype=np.uint8), 0, category)


def estimate_normals(points: np.ndarray, k: int = 16) -> np.ndarray:
    """Unit normals from a plane fit to each point's k nearest neighbours."""
    k = min(k, len(points))
    _, idx = cKDTree(points).query(points, k=k)
    nb = points[idx] - points[idx].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def _anchor(points: np.ndarray, direction: np.ndarray) -> int:
    """Index of the outermost point near the ray from the origin along ``direction``."""
    along = points @ direction
    perp = np.linalg.norm(points - along[:, None] * direction, axis=1)
    perp = np.where(along > 0, perp, np.inf)
    if not np.isfinite(perp.min()):
        raise DefectRejected("no surface point in the direction of the defect center")
    near = perp <= perp.min() + 0.05
    return int(np.argmax(np.where(near, along, -np.inf)))


def defect_region(cloud: PointCloud, spec: DefectSpec, seed: int = 0):
    """Points affected by ``spec`` and the anchor they are measured from.

    ``spec.radius`` is an arc length on the unit sphere; membership uses the
    equivalent chord ``2 sin(radius / 2)`` from the anchor point.

    Returns (mask, anchor_index, chord_radius).
    """
    pts = cloud.points
    a = _anchor(pts, np.asarray(spec.center))
    chord = 2.0 * np.sin(spec.radius / 2.0)
    dist = np.linalg.norm(pts - pts[a], axis=1)
    mask = dist <= chord
    if spec.kind == "crack":
        normal = estimate_normals(pts)[a]
        rng = np.random.default_rng(seed)
        t = rng.standard_normal(3)
        t -= (t @ normal) * normal
        t /= np.linalg.norm(t)
        rel = pts - pts[a]
        width = np.linalg.norm(rel - np.outer(rel @ t, t) - np.outer(rel @ normal, normal), axis=1)
        mask &= width <= 0.2 * chord
    return mask, a, chord


def inject_defect(cloud: PointCloud, spec: DefectSpec, seed: int = 0) -> PointCloud:
    """Return a labelled copy of a normal ``cloud`` carrying the defect ``spec``.

    dent/crack push region points inward along the anchor normal, bump pushes
    them outward, with a raised-cosine falloff from the anchor.  A
    missing-region defect deletes the region; the surviving rim within
    1.25x the radius is labelled, since removed points cannot carry labels.
    """
    if cloud.object_label:
        raise ConfigurationError("inject_defect expects a normal object")
    mask, a, chord = defect_region(cloud, spec, seed)
    if not mask.any():
        raise DefectRejected("defect region captured zero points")
    out = cloud.copy()
    region_id = 1 + int(out.region_ids.max())

    if spec.kind == "missing-region":
        dist = np.linalg.norm(cloud.points - cloud.points[a], axis=1)
        keep = ~mask
        rim = keep & (dist <= 1.25 * chord)
        if not rim.any():
            raise DefectRejected("missing-region left no labelled rim points")
        out = PointCloud(
            cloud.points[keep], rim[keep].astype(np.uint8), 1, cloud.category,
            np.where(rim, region_id, cloud.region_ids)[keep], [spec],
        )
        return out

    pts = cloud.points
    normal = estimate_normals(pts)[a]
    if normal @ pts[a] < 0:
        normal = -normal
    sign = 1.0 if spec.kind == "bump" else -1.0
    dist = np.linalg.norm(pts[mask] - pts[a], axis=1)
    falloff = 0.5 * (1.0 + np.cos(np.pi * dist / chord))
    moved = out.points
    moved[mask] = pts[mask] + (sign * spec.magnitude * falloff)[:, None] * normal
    out.point_labels[mask] = 1
    out.region_ids[mask] = region_id
    out.object_label = 1
    out.defects.append(spec)
    return out


def random_defect(rng: np.random.Generator, kinds=DEFECT_KINDS, radius_range=(0.35, 0.5),
                  magnitude_range=(0.2, 0.3), max_axis_alignment: float = 1.0) -> DefectSpec:
    """Draw a defect; ``max_axis_alignment`` bounds |cos| between the center and the
    x axis, which keeps defects off the rim of every X-axis rotation view."""
    kind = kinds[rng.integers(len(kinds))]
    while True:
        center = rng.standard_normal(3)
        if abs(center[0]) <= max_axis_alignment * np.linalg.norm(center):
            break
    return DefectSpec(kind, tuple(center), float(rng.uniform(*radius_range)),
                      float(rng.uniform(*magnitude_range)))


def make_anomalous(cloud: PointCloud, rng: np.random.Generator, kinds=DEFECT_KINDS,
                   max_tries: int = 20, **ranges) -> PointCloud:
    """Inject one random defect, redrawing the center when a draw is rejected."""
    for _ in range(max_tries):
        spec = random_defect(rng, kinds, **ranges)
        try:
            return inject_defect(cloud, spec, seed=int(rng.integers(2**31)))
        except DefectRejected:
            continue
    raise DefectRejected(f"no valid defect after {max_tries} tries")
