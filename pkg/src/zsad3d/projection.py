"""Multi-view orthographic rendering of point clouds and score back-projection.

Each view rotates the cloud about the X axis and looks down the Z axis from
+Z (larger z is nearer).  Points are splatted as small discs into a z-buffer;
a pixel is owned by every point whose depth lies within ``DEPTH_TOLERANCE_PX``
pixel widths of the nearest one.  Ownership pairs drive both the visibility
mask and the exact back-projection of pixel scores onto points.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from PIL import Image

from .errors import ConfigurationError
from .geometry import PointCloud, estimate_normals

# faces seen edge-on by every X rotation need a few pixels of slack to stay visible
DEPTH_TOLERANCE_PX = 3.0
FRAME_FILL = 0.8
AMBIENT = 0.15
# light fixed in the camera frame, tilted up and to the left of the view axis so
# that small surface tilts on camera-facing surfaces change the shading linearly
LIGHT_DIRECTION = np.array([-0.5, 0.5, 1.0]) / np.sqrt(1.5)
DEPTH_FLOOR = 0.1
MIN_RESOLUTION = 32


@dataclass
class ViewSet:
    rendered: np.ndarray  # (v, h, w) float32 in [0, 1]
    depth: np.ndarray  # (v, h, w) float32 in [0, 1], 0 = background
    visibility: np.ndarray  # (v, n) uint8
    pixel_map: np.ndarray  # (v, h, w) int32, nearest owner or -1
    angles: np.ndarray  # (v,) radians
    owner_pixels: list  # per view: flat pixel index of each ownership pair
    owner_points: list  # per view: point index of each ownership pair

    @property
    def v(self) -> int:
        return len(self.angles)

    @property
    def resolution(self) -> tuple:
        return self.rendered.shape[1:]

    @property
    def n(self) -> int:
        return self.visibility.shape[1]

    def foreground(self) -> np.ndarray:
        return self.pixel_map >= 0


def view_angles(v: int) -> np.ndarray:
    """Rotation angles spread evenly over [4pi/5, -4pi/5]; a single view looks head-on."""
    if v < 1:
        raise ConfigurationError(f"need at least one view, got {v}")
    if v == 1:
        return np.zeros(1)
    return np.array([np.pi * (4.0 - 8.0 * i / (v - 1)) / 5.0 for i in range(v)])


def rotation_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _disc_offsets(radius: int):
    r = int(radius)
    dr, dc = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dr**2 + dc**2 <= radius**2
    return dr[keep], dc[keep]


def rasterize(points_view: np.ndarray, resolution, splat_radius: int = 5):
    """Z-buffer splat of already-rotated points.

    Returns (pixel_map, zbuf, owner_pixels, owner_points); ``zbuf`` is -inf on
    background pixels.
    """
    h, w = resolution
    scale = FRAME_FILL * min(h, w) / 2.0
    col = np.floor(w / 2.0 + points_view[:, 0] * scale).astype(np.int64)
    row = np.floor(h / 2.0 - points_view[:, 1] * scale).astype(np.int64)
    dr, dc = _disc_offsets(splat_radius)
    rr = (row[:, None] + dr[None, :]).ravel()
    cc = (col[:, None] + dc[None, :]).ravel()
    pt = np.repeat(np.arange(len(points_view)), len(dr))
    inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    pix, pt = rr[inside] * w + cc[inside], pt[inside]
    z = points_view[pt, 2]

    zbuf = np.full(h * w, -np.inf)
    np.maximum.at(zbuf, pix, z)
    own = z >= zbuf[pix] - DEPTH_TOLERANCE_PX / scale
    pix, pt, z = pix[own], pt[own], z[own]

    # nearest owner first, ties to the lower point index
    order = np.lexsort((pt, -z, pix))
    pix, pt = pix[order], pt[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pixel_map = np.full(h * w, -1, dtype=np.int32)
    pixel_map[pix[first]] = pt[first]
    return pixel_map.reshape(h, w), zbuf.reshape(h, w), pix, pt


def project_views(cloud: PointCloud, v: int = 9, resolution=(112, 112), splat_radius: int = 5,
                  normals: np.ndarray | None = None) -> ViewSet:
    """Render shaded and depth images of ``cloud`` from ``v`` X-axis rotations."""
    h, w = resolution
    if h < MIN_RESOLUTION or w < MIN_RESOLUTION:
        raise ConfigurationError(f"resolution must be at least {MIN_RESOLUTION}x{MIN_RESOLUTION}")
    angles = view_angles(v)
    if normals is None:
        normals = estimate_normals(cloud.points)
    n = cloud.n
    rendered = np.zeros((v, h, w), dtype=np.float32)
    depth = np.zeros((v, h, w), dtype=np.float32)
    pixel_maps = np.empty((v, h, w), dtype=np.int32)
    visibility = np.zeros((v, n), dtype=np.uint8)
    owner_pixels, owner_points = [], []
    for i, angle in enumerate(angles):
        rot = rotation_x(angle)
        pv = cloud.points @ rot.T
        pmap, zbuf, pix, pt = rasterize(pv, resolution, splat_radius)
        fg = pmap >= 0
        owner = pmap[fg]
        # two-sided Lambertian (PCA normals carry no reliable sign), averaged over
        # every owner of a pixel so single noisy normals do not show as flat splats
        shade = np.abs(normals @ (rot.T @ LIGHT_DIRECTION))
        total = np.bincount(pix, weights=shade[pt], minlength=h * w)
        count = np.bincount(pix, minlength=h * w)
        mean_shade = (total / np.maximum(count, 1)).reshape(h, w)
        rendered[i][fg] = AMBIENT + (1.0 - AMBIENT) * mean_shade[fg]
        z = zbuf[fg]
        span = z.max() - z.min() if z.size else 0.0
        rel = (z - z.min()) / span if span > 0 else np.ones_like(z)
        depth[i][fg] = DEPTH_FLOOR + (1.0 - DEPTH_FLOOR) * rel
        pixel_maps[i] = pmap
        visibility[i, pt] = 1
        owner_pixels.append(pix)
        owner_points.append(pt)
    return ViewSet(rendered, depth, visibility, pixel_maps, angles, owner_pixels, owner_points)


def backprojection_matrix(views: ViewSet, normalize: str = "views") -> sp.csr_matrix:
    """Sparse (n, v*h*w) operator mapping stacked score maps to point scores.

    Each visible point takes the mean of its owned pixels per view.  With
    ``normalize="views"`` the per-view scores are averaged over all v views,
    so occluded views contribute zero; ``"visible"`` averages only over the
    views in which the point is visible.
    """
    if normalize not in ("views", "visible"):
        raise ConfigurationError(f"unknown back-projection normalisation {normalize!r}")
    h, w = views.resolution
    n, v = views.n, views.v
    rows, cols, vals = [], [], []
    if normalize == "visible":
        vis_count = views.visibility.sum(axis=0).astype(np.float64)
    for i in range(v):
        pix, pt = views.owner_pixels[i], views.owner_points[i]
        count = np.bincount(pt, minlength=n).astype(np.float64)
        denom = count[pt] * (vis_count[pt] if normalize == "visible" else v)
        rows.append(pt)
        cols.append(pix + i * h * w)
        vals.append(1.0 / denom)
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, v * h * w)
    )
    return mat.tocsr()


def back_project(score_maps: np.ndarray, views: ViewSet, normalize: str = "views") -> np.ndarray:
    """Per-point scores from per-view maps of shape (v, h, w)."""
    score_maps = np.asarray(score_maps, dtype=np.float64)
    if score_maps.shape != (views.v, *views.resolution):
        raise ConfigurationError(
            f"score maps {score_maps.shape} do not match views {(views.v, *views.resolution)}"
        )
    return backprojection_matrix(views, normalize) @ score_maps.ravel()


def label_maps(views: ViewSet, point_labels: np.ndarray) -> np.ndarray:
    """Per-view pixel labels: each foreground pixel takes its nearest owner's label."""
    labels = np.asarray(point_labels)
    out = np.zeros(views.pixel_map.shape, dtype=np.float32)
    fg = views.pixel_map >= 0
    out[fg] = labels[views.pixel_map[fg]]
    return out


def save_viewset(views: ViewSet, directory) -> None:
    """Write 16-bit PNGs per view plus raw arrays and a JSON header."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i in range(views.v):
        for name, img in (("rendered", views.rendered[i]), ("depth", views.depth[i])):
            q = np.round(np.clip(img, 0, 1) * 65535).astype(np.uint16)
            Image.fromarray(q).save(d / f"{name}_{i:02d}.png")
    arrays = {"visibility": views.visibility, "pixel_map": views.pixel_map,
              "owner_pixels": np.concatenate(views.owner_pixels),
              "owner_points": np.concatenate(views.owner_points).astype(np.int64),
              "owner_counts": np.array([len(p) for p in views.owner_pixels], dtype=np.int64)}
    header = {"angles": views.angles.tolist(), "arrays": {}}
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        (d / f"{name}.bin").write_bytes(arr.astype(dtype).tobytes())
        header["arrays"][name] = {"shape": list(arr.shape), "dtype": dtype.str}
    (d / "header.json").write_text(json.dumps(header, indent=2))


def load_viewset(directory) -> ViewSet:
    """Inverse of ``save_viewset``; images come back quantised to 16 bits."""
    d = Path(directory)
    header = json.loads((d / "header.json").read_text())
    arrays = {
        name: np.frombuffer((d / f"{name}.bin").read_bytes(), dtype=np.dtype(meta["dtype"]))
        .reshape(meta["shape"])
        for name, meta in header["arrays"].items()
    }
    v = len(header["angles"])
    imgs = {
        name: np.stack([np.asarray(Image.open(d / f"{name}_{i:02d}.png"), dtype=np.float32) / 65535
                        for i in range(v)])
        for name in ("rendered", "depth")
    }
    splits = np.cumsum(arrays["owner_counts"])[:-1]
    return ViewSet(
        imgs["rendered"], imgs["depth"], arrays["visibility"].copy(), arrays["pixel_map"].copy(),
        np.asarray(header["angles"]), np.split(arrays["owner_pixels"], splits),
        np.split(arrays["owner_points"], splits),
    )
