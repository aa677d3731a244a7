"""Rendering a Scene into raw sensor outputs.

The LiDAR is a surface sampler with inverse-square density falloff; the
cameras produce low-resolution *feature images* (occupancy + class one-hot)
with a z-buffered depth map that serves as the depth oracle downstream.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .scene import CLASSES, ObjectBox, Scene, box_corners
from .seeding import rng_for

GROUND_ID = -1
NONE_ID = -2

BVPC_MAGIC = b"BVPC"
BVPC_VERSION = 1
_BVPC_HEADER = struct.Struct("<4sIQ")

# depth below this (meters, camera z) is treated as behind the camera
NEAR_CLIP = 0.05

# face index -> corner indices (see box_corners ordering): 4 sides then top
_FACES = ((0, 1, 5, 4), (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7), (4, 5, 6, 7))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """``xyz`` (N, 3) in the ego frame, ``intensity`` (N,), ``object_id`` (N,).

    ``object_id`` is diagnostic only: the box id, ``GROUND_ID`` or ``NONE_ID``.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    object_id: np.ndarray

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        oid = np.asarray(self.object_id, dtype=np.int64).reshape(-1)
        if not len(xyz) == len(inten) == len(oid):
            raise ValueError("point cloud arrays must have equal length")
        if len(inten) and (inten.min() < 0 or inten.max() > 1):
            raise ValueError("intensity must lie in [0, 1]")
        for name, arr in (("xyz", xyz), ("intensity", inten), ("object_id", oid)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.xyz)

    @classmethod
    def empty(cls) -> PointCloud:
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64))

    @property
    def points(self) -> np.ndarray:
        """(N, 4) array of x, y, z, intensity."""
        return np.column_stack([self.xyz, self.intensity])

    def take(self, index) -> PointCloud:
        return PointCloud(self.xyz[index], self.intensity[index], self.object_id[index])

    def equals(self, other: PointCloud) -> bool:
        return (np.array_equal(self.xyz, other.xyz) and np.array_equal(self.intensity, other.intensity)
                and np.array_equal(self.object_id, other.object_id))


@dataclass(frozen=True, eq=False)
class FeatureImage:
    """Per-camera feature map ``grid`` (H, W, C) plus oracle ``depth`` (H, W)."""

    camera_id: str
    grid: np.ndarray
    depth: np.ndarray
    channel_names: tuple[str, ...] = ("occupancy",) + CLASSES

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        if grid.ndim != 3 or depth.shape != grid.shape[:2]:
            raise ValueError(f"grid {grid.shape} and depth {depth.shape} disagree")
        if grid.shape[2] != len(self.channel_names):
            raise ValueError("channel_names length must match the channel axis")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape[:2]

    @property
    def occupancy(self) -> np.ndarray:
        return self.grid[..., self.channel_names.index("occupancy")]

    def replace_grid(self, grid: np.ndarray) -> FeatureImage:
        return FeatureImage(self.camera_id, grid, self.depth, self.channel_names)

    def equals(self, other: FeatureImage) -> bool:
        return (self.camera_id == other.camera_id and self.channel_names == other.channel_names
                and np.array_equal(self.grid, other.grid) and np.array_equal(self.depth, other.depth))


@dataclass(frozen=True)
class GroundConfig:
    """Ground returns on an annulus around the sensor, same inverse-square falloff."""

    inner_radius: float = 3.0
    outer_radius: float = 50.0
    points_per_m2_at_10m: float = 5.0


def _faces(box: ObjectBox) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(origin corner, edge a, edge b) for the 4 side faces and the top."""
    c = box_corners(box)
    return [(c[i], c[j] - c[i], c[l] - c[i]) for i, j, _, l in _FACES]


def visible_face_area(box: ObjectBox) -> float:
    w, l, h = box.size
    return 2.0 * (w + l) * h + w * l


def render_lidar(scene: Scene, seed: int, ground: GroundConfig | None = None) -> PointCloud:
    lidar = scene.lidar
    origin = lidar.origin
    xyz_parts, id_parts = [], []
    for box in scene.objects:
        d = float(np.linalg.norm(np.asarray(box.center) - origin))
        rng = rng_for(seed, "lidar", box.id)
        falloff = (10.0 / max(d, 1e-6)) ** 2
        for c0, ea, eb in _faces(box):
            area = float(np.linalg.norm(np.cross(ea, eb)))
            n = int(rng.poisson(area * lidar.points_per_m2_at_10m * falloff))
            ab = rng.random((n, 2))
            pts = c0 + ab[:, :1] * ea + ab[:, 1:] * eb
            xyz_parts.append(pts)
            id_parts.append(np.full(n, box.id, dtype=np.int64))
    if ground is not None:
        rng = rng_for(seed, "ground")
        r0, r1 = ground.inner_radius, ground.outer_radius
        area = np.pi * (r1 ** 2 - r0 ** 2)
        n = int(rng.poisson(area * ground.points_per_m2_at_10m))
        rad = np.sqrt(rng.uniform(r0 ** 2, r1 ** 2, n))
        ang = rng.uniform(-np.pi, np.pi, n)
        keep_u = rng.random(n)
        pts = np.column_stack([rad * np.cos(ang), rad * np.sin(ang), np.zeros(n)])
        dist = np.linalg.norm(pts - origin, axis=1)
        pts = pts[keep_u < np.minimum(1.0, (10.0 / dist) ** 2)]
        inside = np.zeros(len(pts), dtype=bool)
        for box in scene.objects:
            inside |= _in_footprint(pts[:, :2], box)
        pts = pts[~inside]
        xyz_parts.append(pts)
        id_parts.append(np.full(len(pts), GROUND_ID, dtype=np.int64))
    if not xyz_parts:
        return PointCloud.empty()
    xyz = np.concatenate(xyz_parts)
    ids = np.concatenate(id_parts)
    dist = np.linalg.norm(xyz - origin, axis=1)
    keep = dist <= lidar.max_range
    xyz, ids, dist = xyz[keep], ids[keep], dist[keep]
    return PointCloud(xyz, np.clip(1.0 - dist / lidar.max_range, 0.0, 1.0), ids)


def _in_footprint(xy: np.ndarray, box: ObjectBox) -> np.ndarray:
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rel = xy - np.asarray(box.center[:2])
    lx = rel[:, 0] * c + rel[:, 1] * s
    ly = -rel[:, 0] * s + rel[:, 1] * c
    return (np.abs(lx) <= box.size[0] / 2) & (np.abs(ly) <= box.size[1] / 2)


def _pixel_window(cam, corners_cam: np.ndarray) -> tuple[int, int, int, int] | None:
    H, W = cam.image_size
    z = corners_cam[:, 2]
    if np.all(z <= NEAR_CLIP):
        return None
    if np.any(z <= NEAR_CLIP):
        return 0, H, 0, W
    fx, fy, cx, cy = cam.intrinsics
    u = fx * corners_cam[:, 0] / z + cx
    v = fy * corners_cam[:, 1] / z + cy
    u0, u1 = max(int(np.floor(u.min())) - 1, 0), min(int(np.ceil(u.max())) + 1, W)
    v0, v1 = max(int(np.floor(v.min())) - 1, 0), min(int(np.ceil(v.max())) + 1, H)
    if u0 >= u1 or v0 >= v1:
        return None
    return v0, v1, u0, u1


def render_camera(scene: Scene, camera_id: str) -> FeatureImage:
    """Z-buffered ray casting of every box's sides and top through one camera."""
    cam = scene.camera(camera_id)
    H, W = cam.image_size
    fx, fy, cx, cy = cam.intrinsics
    depth = np.full((H, W), np.inf)
    label = np.full((H, W), -1, dtype=np.int64)
    class_index = {c: i for i, c in enumerate(CLASSES)}
    for box in scene.objects:
        k = class_index.get(box.class_label)
        if k is None:
            raise ValueError(f"unknown class {box.class_label!r}")
        for c0, ea, eb in _faces(box):
            quad = np.stack([c0, c0 + ea, c0 + ea + eb, c0 + eb])
            qc = cam.pose.apply(quad)
            win = _pixel_window(cam, qc)
            if win is None:
                continue
            v0, v1, u0, u1 = win
            o = qc[0]
            a = qc[1] - o
            b = qc[3] - o
            normal = np.cross(a, b)
            vv, uu = np.mgrid[v0:v1, u0:u1]
            rx = (uu + 0.5 - cx) / fx
            ry = (vv + 0.5 - cy) / fy
            denom = normal[0] * rx + normal[1] * ry + normal[2]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (normal @ o) / denom
            px, py = t * rx - o[0], t * ry - o[1]
            pz = t - o[2]
            sa = (px * a[0] + py * a[1] + pz * a[2]) / (a @ a)
            sb = (px * b[0] + py * b[1] + pz * b[2]) / (b @ b)
            hit = (np.abs(denom) > 1e-12) & (t > NEAR_CLIP) & (sa >= 0) & (sa <= 1) & (sb >= 0) & (sb <= 1)
            sub_d = depth[v0:v1, u0:u1]
            closer = hit & (t < sub_d)
            sub_d[closer] = t[closer]
            label[v0:v1, u0:u1][closer] = k
    occupied = label >= 0
    grid = np.zeros((H, W, 1 + len(CLASSES)))
    grid[..., 0] = occupied
    vs, us = np.nonzero(occupied)
    grid[vs, us, 1 + label[vs, us]] = 1.0
    return FeatureImage(cam.id, grid, np.where(occupied, depth, 0.0))


def render_cameras(scene: Scene) -> list[FeatureImage]:
    return [render_camera(scene, cam.id) for cam in scene.cameras]


# --- serialization -----------------------------------------------------------

def write_point_cloud(cloud: PointCloud, path) -> None:
    """Binary ``.bvpc`` file plus a ``.json`` sidecar holding object ids.

    Layout (little-endian): magic ``BVPC``, u32 version, u64 count, then
    ``count`` records of four float32 (x, y, z, intensity).
    """
    path = Path(path)
    body = cloud.points.astype("<f4").tobytes()
    path.write_bytes(_BVPC_HEADER.pack(BVPC_MAGIC, BVPC_VERSION, len(cloud)) + body)
    sidecar = {"count": len(cloud), "object_id": cloud.object_id.tolist()}
    path.with_suffix(".json").write_text(json.dumps(sidecar))


def read_point_cloud(path) -> PointCloud:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _BVPC_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, count = _BVPC_HEADER.unpack_from(raw)
    if magic != BVPC_MAGIC or version != BVPC_VERSION:
        raise ValueError(f"{path}: not a BVPC v{BVPC_VERSION} file")
    data = np.frombuffer(raw, dtype="<f4", count=count * 4, offset=_BVPC_HEADER.size)
    data = data.reshape(count, 4).astype(np.float64)
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        ids = np.asarray(json.loads(sidecar.read_text())["object_id"], dtype=np.int64)
    else:
        ids = np.full(count, NONE_ID, dtype=np.int64)
    return PointCloud(data[:, :3], np.clip(data[:, 3], 0.0, 1.0), ids)


def write_feature_image(image: FeatureImage, path) -> None:
    """``.npz`` with float64 ``grid`` (H, W, C), ``depth`` (H, W), names and camera id."""
    with open(path, "wb") as fh:
        np.savez(fh, grid=image.grid, depth=image.depth,
                 channel_names=np.array(image.channel_names), camera_id=np.array(image.camera_id))


def read_feature_image(path) -> FeatureImage:
    with np.load(path) as z:
        return FeatureImage(str(z["camera_id"]), z["grid"], z["depth"],
                            tuple(str(s) for s in z["channel_names"]))


def write_sensor_dir(out_dir, images: Sequence[FeatureImage], cloud: PointCloud) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_point_cloud(cloud, out / "lidar.bvpc")
    for img in images:
        write_feature_image(img, out / f"{img.camera_id}.npz")


def read_sensor_dir(in_dir) -> tuple[list[FeatureImage], PointCloud]:
    d = Path(in_dir)
    if not (d / "lidar.bvpc").exists():
        raise FileNotFoundError(f"{d / 'lidar.bvpc'} not found")
    images = [read_feature_image(p) for p in sorted(d.glob("*.npz"))]
    return images, read_point_cloud(d / "lidar.bvpc")
