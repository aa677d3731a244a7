"""Camera + LiDAR to BEV data path.

LiDAR points are voxelized into per-voxel statistics; camera pixel features
are lifted along their rays into depth bins, weighted by a per-pixel depth
distribution. Both volumes are sum-pooled over z and the two BEV maps are
concatenated along channels and passed through a fixed mass-preserving box
filter in place of a learned BEV encoder.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .scene import CLASSES, CameraModel, Scene
from .sensors import FeatureImage, PointCloud

LIDAR_CHANNELS = ("lidar/point_count", "lidar/mean_intensity", "lidar/mean_z_offset")
OCCUPANCY_CHANNELS = frozenset({"lidar/point_count", "cam/occupancy"})
SENSOR_MODES = ("C", "L", "C+L")
DEFAULT_CAMERA_CHANNELS = tuple(f"cam/{c}" for c in ("occupancy",) + CLASSES)


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple[float, float] = (-54.0, 54.0)
    y_range: tuple[float, float] = (-54.0, 54.0)
    z_range: tuple[float, float] = (-5.0, 3.0)
    resolution: tuple[float, float, float] = (0.3, 0.3, 0.5)

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if not hi > lo:
                raise ValueError("grid ranges must be nonempty")
        if min(self.resolution) <= 0:
            raise ValueError("grid resolution must be positive")
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        object.__setattr__(self, "y_range", tuple(float(v) for v in self.y_range))
        object.__setattr__(self, "z_range", tuple(float(v) for v in self.z_range))
        object.__setattr__(self, "resolution", tuple(float(v) for v in self.resolution))

    @property
    def dims(self) -> tuple[int, int, int]:
        # round() first so that e.g. 108 / 0.3 = 360.00000000000006 gives 360
        return tuple(int(math.ceil(round((hi - lo) / r, 9)))
                     for (lo, hi), r in zip((self.x_range, self.y_range, self.z_range), self.resolution))

    @property
    def mins(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def maxs(self) -> np.ndarray:
        return np.array([self.x_range[1], self.y_range[1], self.z_range[1]])

    def cell_index(self, xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Integer (i, j, k) for each point and a mask of in-range points.

        A point on a cell's max edge goes to the next cell; points on the grid
        max are clipped into the last cell.
        """
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        mins, maxs = self.mins, self.maxs
        inside = np.all((xyz >= mins) & (xyz <= maxs), axis=1)
        idx = np.floor((xyz - mins) / np.array(self.resolution)).astype(np.int64)
        idx = np.minimum(idx, np.array(self.dims) - 1)
        return idx, inside

    def cell_centers_xy(self) -> tuple[np.ndarray, np.ndarray]:
        X, Y, _ = self.dims
        rx, ry, _ = self.resolution
        return (self.x_range[0] + (np.arange(X) + 0.5) * rx,
                self.y_range[0] + (np.arange(Y) + 0.5) * ry)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    spec: GridSpec
    data: np.ndarray  # X, Y, Z, C
    channel_names: tuple[str, ...]

    def __post_init__(self):
        if self.data.shape != (*self.spec.dims, len(self.channel_names)):
            raise ValueError(f"voxel data {self.data.shape} inconsistent with spec {self.spec.dims}")


@dataclass(frozen=True, eq=False)
class BEVGrid:
    spec: GridSpec
    data: np.ndarray  # X, Y, C
    channel_names: tuple[str, ...]

    def __post_init__(self):
        X, Y, _ = self.spec.dims
        if self.data.shape != (X, Y, len(self.channel_names)):
            raise ValueError(f"BEV data {self.data.shape} inconsistent with spec ({X}, {Y})")

    def channel(self, name: str) -> np.ndarray:
        return self.data[..., self.channel_names.index(name)]

    def equals(self, other: BEVGrid) -> bool:
        return (self.spec == other.spec and self.channel_names == other.channel_names
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class DepthDistribution:
    probs: np.ndarray  # H, W, D
    bin_edges: np.ndarray  # D + 1

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly increasing with at least 2 entries")
        if self.probs.shape[-1] != len(edges) - 1:
            raise ValueError("probability vectors must have one entry per bin")
        object.__setattr__(self, "bin_edges", edges)

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])


@dataclass(frozen=True)
class DepthConfig:
    z_near: float = 1.0
    z_far: float = 60.0
    bins: int = 59
    mode: str = "oracle"  # "oracle" or "uniform"
    tau: float = 0.5

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.z_near, self.z_far, self.bins + 1)


@dataclass(frozen=True)
class BEVEncoderSpec:
    radius: int = 0  # box-filter radius in cells; 0 is the identity


@dataclass(frozen=True)
class PipelineConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    depth: DepthConfig = field(default_factory=DepthConfig)
    encoder: BEVEncoderSpec = field(default_factory=BEVEncoderSpec)
    sensor_mode: str = "C+L"

    def __post_init__(self):
        if self.sensor_mode not in SENSOR_MODES:
            raise ValueError(f"sensor_mode must be one of {SENSOR_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        d = dict(d)
        if "grid" in d:
            d["grid"] = GridSpec(**{k: tuple(v) for k, v in d["grid"].items()})
        if "depth" in d:
            d["depth"] = DepthConfig(**d["depth"])
        if "encoder" in d:
            d["encoder"] = BEVEncoderSpec(**d["encoder"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> PipelineConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


# --- LiDAR -------------------------------------------------------------------

def _voxel_stats(cloud: PointCloud, spec: GridSpec):
    """Occupied voxels as (linear index, count, mean intensity, mean z offset)."""
    idx, inside = spec.cell_index(cloud.xyz)
    idx = idx[inside]
    X, Y, Z = spec.dims
    lin = (idx[:, 0] * Y + idx[:, 1]) * Z + idx[:, 2]
    if len(lin) == 0:
        empty = np.zeros(0)
        return np.zeros(0, dtype=np.int64), empty, empty, empty
    z_center = spec.z_range[0] + (idx[:, 2] + 0.5) * spec.resolution[2]
    z_off = cloud.xyz[inside, 2] - z_center
    occ, inv = np.unique(lin, return_inverse=True)
    count = np.bincount(inv, minlength=len(occ)).astype(np.float64)
    mean_i = np.bincount(inv, weights=cloud.intensity[inside], minlength=len(occ)) / count
    mean_z = np.bincount(inv, weights=z_off, minlength=len(occ)) / count
    return occ, count, mean_i, mean_z


def voxelize(cloud: PointCloud, spec: GridSpec) -> VoxelGrid:
    X, Y, Z = spec.dims
    data = np.zeros((X * Y * Z, len(LIDAR_CHANNELS)))
    occ, count, mean_i, mean_z = _voxel_stats(cloud, spec)
    data[occ, 0] = count
    data[occ, 1] = mean_i
    data[occ, 2] = mean_z
    return VoxelGrid(spec, data.reshape(X, Y, Z, -1), LIDAR_CHANNELS)


def lidar_bev(cloud: PointCloud, spec: GridSpec) -> BEVGrid:
    """``bev_pool(voxelize(cloud, spec))`` computed from occupied voxels only."""
    X, Y, Z = spec.dims
    occ, count, mean_i, mean_z = _voxel_stats(cloud, spec)
    col = occ // Z
    data = np.stack([np.bincount(col, weights=w, minlength=X * Y) for w in (count, mean_i, mean_z)],
                    axis=-1)
    return BEVGrid(spec, data.reshape(X, Y, -1), LIDAR_CHANNELS)


# --- camera ------------------------------------------------------------------

def estimate_depth_distribution(image: FeatureImage, D: int, mode: str = "oracle",
                                tau: float = 0.5, z_near: float = 1.0,
                                z_far: float = 60.0) -> DepthDistribution:
    """Per-pixel categorical distribution over ``D`` equal-width depth bins.

    ``uniform`` spreads every occupied pixel evenly over the bins; ``oracle``
    places a Gaussian of width ``tau`` around the rendered depth, evaluated at
    the bin centers and normalized. Pixels without a rendered surface (depth 0)
    get an all-zero vector in both modes. With ``tau = 0`` the oracle is
    one-hot on the bin containing the depth.
    """
    if D < 1:
        raise ValueError("D must be >= 1")
    edges = np.linspace(z_near, z_far, D + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    depth = image.depth
    occupied = depth > 0
    probs = np.zeros((*depth.shape, D))
    if mode == "uniform":
        probs[occupied] = 1.0 / D
    elif mode == "oracle":
        d = depth[occupied][:, None]
        if tau == 0:
            k = np.clip(np.searchsorted(edges, d[:, 0], side="right") - 1, 0, D - 1)
            p = np.zeros((len(d), D))
            p[np.arange(len(d)), k] = 1.0
        else:
            logits = -((centers[None, :] - d) ** 2) / (2.0 * tau * tau)
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
        probs[occupied] = p
    else:
        raise ValueError(f"unknown depth mode {mode!r}")
    return DepthDistribution(probs, edges)


def _lift_entries(image: FeatureImage, dist: DepthDistribution, camera: CameraModel, spec: GridSpec):
    """Nonzero (voxel index, weighted feature) contributions of one image."""
    H, W = image.shape
    if dist.probs.shape[:2] != (H, W):
        raise ValueError("depth distribution does not match image shape")
    feat = image.grid
    pix = np.nonzero(dist.probs.any(axis=2) & feat.any(axis=2))
    vs, us = pix
    p = dist.probs[vs, us]  # P, D
    pi, di = np.nonzero(p > 0)
    fx, fy, cx, cy = camera.intrinsics
    depth = dist.bin_centers[di]
    ray = np.column_stack([(us[pi] + 0.5 - cx) / fx, (vs[pi] + 0.5 - cy) / fy, np.ones(len(pi))])
    pts_ego = camera.pose.inverse().apply(ray * depth[:, None])
    idx, inside = spec.cell_index(pts_ego)
    weight = p[pi, di][inside][:, None] * feat[vs[pi[inside]], us[pi[inside]]]
    return idx[inside], weight


def camera_channel_names(image: FeatureImage) -> tuple[str, ...]:
    return tuple(f"cam/{c}" for c in image.channel_names)


def lift_camera_features(image: FeatureImage, dist: DepthDistribution, camera: CameraModel,
                         spec: GridSpec) -> VoxelGrid:
    """Sum-scatter ``p_d * f(u, v)`` into the voxel holding each ray point."""
    X, Y, Z = spec.dims
    idx, weight = _lift_entries(image, dist, camera, spec)
    lin = (idx[:, 0] * Y + idx[:, 1]) * Z + idx[:, 2]
    C = image.grid.shape[2]
    data = np.stack([np.bincount(lin, weights=weight[:, c], minlength=X * Y * Z) for c in range(C)],
                    axis=-1)
    return VoxelGrid(spec, data.reshape(X, Y, Z, C), camera_channel_names(image))


def camera_bev(images: Sequence[FeatureImage], cameras: Sequence[CameraModel], spec: GridSpec,
               depth: DepthConfig) -> BEVGrid:
    """Lift every camera and pool straight to BEV; the z axis is never materialized."""
    X, Y, _ = spec.dims
    cam_by_id = {c.id: c for c in cameras}
    names = None
    cols, weights = [], []
    for img in images:
        dist = estimate_depth_distribution(img, depth.bins, depth.mode, depth.tau,
                                           depth.z_near, depth.z_far)
        idx, w = _lift_entries(img, dist, cam_by_id[img.camera_id], spec)
        cols.append(idx[:, 0] * Y + idx[:, 1])
        weights.append(w)
        names = names or camera_channel_names(img)
    if names is None:
        raise ValueError("no camera images given")
    col = np.concatenate(cols)
    w = np.concatenate(weights)
    data = np.stack([np.bincount(col, weights=w[:, c], minlength=X * Y) for c in range(w.shape[1])],
                    axis=-1)
    return BEVGrid(spec, data.reshape(X, Y, -1), names)


# --- pooling and fusion ------------------------------------------------------

def bev_pool(grid: VoxelGrid) -> BEVGrid:
    return BEVGrid(grid.spec, grid.data.sum(axis=2), grid.channel_names)


def _window_counts(n: int, radius: int) -> np.ndarray:
    i = np.arange(n)
    return (np.minimum(i + radius, n - 1) - np.maximum(i - radius, 0) + 1).astype(np.float64)


def box_spread(data: np.ndarray, radius: int) -> np.ndarray:
    """Mass-preserving box filter over the first two axes.

    Each cell spreads its value evenly over the in-grid cells of its
    (2r+1)^2 window, so per-channel totals are preserved at the borders.
    """
    if radius == 0:
        return data
    X, Y = data.shape[:2]
    share = data / (_window_counts(X, radius)[:, None] * _window_counts(Y, radius)[None, :])[..., None]
    out = share
    for axis in (0, 1):
        c = np.cumsum(out, axis=axis)
        n = out.shape[axis]
        pad = [(0, 0)] * out.ndim
        pad[axis] = (1, 0)
        c = np.pad(c, pad)
        hi = np.minimum(np.arange(n) + radius + 1, n)
        lo = np.maximum(np.arange(n) - radius, 0)
        out = np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)
    return out


def fuse_bev(cam: BEVGrid, lidar: BEVGrid, encoder: BEVEncoderSpec = BEVEncoderSpec()) -> BEVGrid:
    if cam.spec != lidar.spec:
        raise ValueError("camera and LiDAR BEV grids must share a GridSpec")
    cat = np.concatenate([cam.data, lidar.data], axis=-1)
    return BEVGrid(cam.spec, box_spread(cat, encoder.radius), cam.channel_names + lidar.channel_names)


def zero_bev(spec: GridSpec, channel_names: Sequence[str]) -> BEVGrid:
    X, Y, _ = spec.dims
    return BEVGrid(spec, np.zeros((X, Y, len(channel_names))), tuple(channel_names))


def run_pipeline(images: Sequence[FeatureImage], cloud: PointCloud, cameras: Sequence[CameraModel],
                 config: PipelineConfig, sensor_mode: str | None = None) -> BEVGrid:
    """Full sensors-to-fused-BEV path.

    The channel layout is fixed (camera channels then LiDAR channels); a
    branch disabled by ``sensor_mode`` contributes all-zero channels.
    """
    mode = sensor_mode or config.sensor_mode
    if mode not in SENSOR_MODES:
        raise ValueError(f"sensor_mode must be one of {SENSOR_MODES}")
    if mode == "L":
        names = camera_channel_names(images[0]) if images else DEFAULT_CAMERA_CHANNELS
        cam = zero_bev(config.grid, names)
    else:
        cam = camera_bev(images, cameras, config.grid, config.depth)
    lid = lidar_bev(cloud, config.grid) if mode != "C" else zero_bev(config.grid, LIDAR_CHANNELS)
    return fuse_bev(cam, lid, config.encoder)


def run_scene_pipeline(scene: Scene, images, cloud, config: PipelineConfig,
                       sensor_mode: str | None = None) -> BEVGrid:
    return run_pipeline(images, cloud, scene.cameras, config, sensor_mode)


def dump_bev(bev: BEVGrid, path) -> None:
    """``<path>.npy`` raw (X, Y, C) float64 tensor + ``<path>.json`` channel manifest."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), bev.data)
    manifest = {"channel_names": list(bev.channel_names), "shape": list(bev.data.shape),
                "grid": asdict(bev.spec), "dtype": "float64", "layout": "x,y,channel"}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))
