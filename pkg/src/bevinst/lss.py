"""Bird's-eye-view branch: depth distribution, frustum lifting, voxel pooling,
temporal alignment and the residual temporal encoder.

BEV arrays are ``C x H_bev x W_bev`` with the width axis along ego ``x`` and
the height axis along ego ``y``; cell ``(i, j)`` covers
``range_min + [i, i+1) * cell_size`` in x and ``[j, j+1)`` in y.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, SpecMismatch
from .geometry import CameraModel, SE3Transform, unproject_pixels
from .grid_ops import FeatureGrid, LinearMap, sample_bilinear, softmax_normalize


@dataclass(frozen=True)
class BEVSpec:
    range_min: tuple = (-51.2, -51.2)
    voxel_size: float = 0.8
    upsample_factor: float = 1.0
    grid_height: int = 128
    grid_width: int = 128
    z_bounds: tuple = (-5.0, 3.0)

    def __post_init__(self):
        if self.grid_height <= 0 or self.grid_width <= 0:
            raise ValueError("BEV grid dims must be positive")
        if not (self.voxel_size > 0 and self.upsample_factor > 0):
            raise ValueError("voxel size and upsample factor must be positive")
        if not self.z_bounds[0] < self.z_bounds[1]:
            raise ValueError("z_bounds must be increasing")
        object.__setattr__(self, "range_min", tuple(float(v) for v in self.range_min))
        object.__setattr__(self, "z_bounds", tuple(float(v) for v in self.z_bounds))

    @property
    def cell_size(self) -> float:
        return self.upsample_factor * self.voxel_size

    @property
    def range_max(self) -> tuple:
        return (
            self.range_min[0] + self.grid_width * self.cell_size,
            self.range_min[1] + self.grid_height * self.cell_size,
        )

    def cell_centers(self) -> np.ndarray:
        """``(H, W, 2)`` ego-frame ``(x, y)`` of every cell center."""
        xs = self.range_min[0] + (np.arange(self.grid_width) + 0.5) * self.cell_size
        ys = self.range_min[1] + (np.arange(self.grid_height) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)


@dataclass(eq=False)
class DepthDistribution:
    bins: np.ndarray  # (D,)
    probs: np.ndarray  # (D, H, W)


@dataclass(eq=False)
class FrustumCloud:
    points: np.ndarray  # (M, 3)
    features: np.ndarray  # (M, C)
    weights: np.ndarray  # (M,)


@dataclass(eq=False)
class BEVGrid:
    spec: BEVSpec
    data: np.ndarray  # (C, H_bev, W_bev)
    frame: int = 0

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def uniform_depth_bins(count: int = 16, near: float = 1.0, far: float = 60.0) -> np.ndarray:
    return np.linspace(near, far, count)


def predict_depth_distribution(feature: FeatureGrid, head: LinearMap, bins) -> DepthDistribution:
    """Per-pixel softmax over ``D`` logits from a 1x1 linear head."""
    bins = np.asarray(bins, dtype=np.float64)
    if bins.ndim != 1 or bins.shape[0] < 2 or np.any(np.diff(bins) <= 0):
        raise ValueError("depth bins must be a strictly increasing 1-D array with D >= 2")
    if head.in_dim != feature.channels or head.out_dim != bins.shape[0]:
        raise DimensionMismatch(
            f"{head.name}: expected {feature.channels} -> {bins.shape[0]}, got {head.in_dim} -> {head.out_dim}"
        )
    logits = head(np.moveaxis(feature.data, 0, -1))  # (H, W, D)
    probs = softmax_normalize(logits, axis=-1)
    return DepthDistribution(bins, np.moveaxis(probs, -1, 0))


def lift_frustum(feature: FeatureGrid, depth: DepthDistribution, cam: CameraModel) -> FrustumCloud:
    """Emit one weighted point per (depth bin, pixel), ordered bin-major then row-major."""
    c, h, w = feature.data.shape
    d = depth.bins.shape[0]
    if depth.probs.shape != (d, h, w):
        raise DimensionMismatch(f"depth probs {depth.probs.shape} do not match feature {(d, h, w)}")
    vv, uu = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dd = np.broadcast_to(depth.bins[:, None, None], (d, h, w))
    points = unproject_pixels(cam, uu[None], vv[None], dd).reshape(-1, 3)
    pix_feat = feature.data.reshape(c, h * w).T
    features = np.tile(pix_feat, (d, 1))
    return FrustumCloud(points, features, depth.probs.reshape(-1).copy())


def _cell_indices(xy: np.ndarray, z: np.ndarray, spec: BEVSpec):
    cs = spec.cell_size
    ix = np.floor((xy[:, 0] - spec.range_min[0]) / cs).astype(np.int64)
    iy = np.floor((xy[:, 1] - spec.range_min[1]) / cs).astype(np.int64)
    inside = (
        (ix >= 0) & (ix < spec.grid_width) & (iy >= 0) & (iy < spec.grid_height)
        & (z >= spec.z_bounds[0]) & (z <= spec.z_bounds[1])
    )
    return ix, iy, inside


def voxel_pool(cloud: FrustumCloud, spec: BEVSpec, frame: int = 0) -> BEVGrid:
    """Sum ``weight * feature`` of every in-range point into its BEV cell."""
    pts = np.asarray(cloud.points, dtype=np.float64)
    ix, iy, inside = _cell_indices(pts[:, :2], pts[:, 2], spec)
    c = cloud.features.shape[1]
    ncell = spec.grid_height * spec.grid_width
    flat_idx = (iy * spec.grid_width + ix)[inside]
    contrib = cloud.features[inside] * cloud.weights[inside, None]
    data = np.empty((c, ncell))
    for ch in range(c):
        data[ch] = np.bincount(flat_idx, weights=contrib[:, ch], minlength=ncell)
    return BEVGrid(spec, data.reshape(c, spec.grid_height, spec.grid_width), frame)


def align_bev(grid: BEVGrid, m_t: SE3Transform) -> BEVGrid:
    """Resample a historical BEV grid into the current ego frame.

    ``m_t`` maps current-ego coordinates to the historical frame (as returned
    by :func:`geometry.temporal_transform`). Each current cell center is
    carried into the historical frame and read bilinearly; z is ignored.
    """
    spec = grid.spec
    centers = spec.cell_centers()
    pts = np.concatenate([centers, np.zeros(centers.shape[:2] + (1,))], axis=-1)
    hist = m_t.apply(pts)[..., :2]
    cont = (hist - np.asarray(spec.range_min)) / spec.cell_size - 0.5
    data = sample_bilinear(grid.data, cont)  # (H, W, C)
    return BEVGrid(spec, np.moveaxis(data, -1, 0), 0)


def bev_temporal_encode(aligned: Sequence[BEVGrid], reducer: LinearMap) -> BEVGrid:
    """Channel concat (current first), 1x1 reduction to ``C``, plus a residual from the current grid."""
    if not aligned:
        raise SpecMismatch("need at least one BEV grid")
    cur = aligned[0]
    for g in aligned[1:]:
        if g.spec != cur.spec or g.data.shape != cur.data.shape:
            raise SpecMismatch("all BEV grids must share spec and shape")
    stacked = np.concatenate([g.data for g in aligned], axis=0)
    if reducer.in_dim != stacked.shape[0] or reducer.out_dim != cur.channels:
        raise DimensionMismatch(
            f"{reducer.name}: expected {stacked.shape[0]} -> {cur.channels}, got {reducer.in_dim} -> {reducer.out_dim}"
        )
    reduced = np.moveaxis(reducer(np.moveaxis(stacked, 0, -1)), -1, 0)
    return BEVGrid(cur.spec, reduced + cur.data, cur.frame)
