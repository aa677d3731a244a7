"""Synthetic world model: annotated boxes, ego pose and a calibrated sensor rig.

Conventions
-----------
Ego frame is z-up, x-forward, y-left, with the ground plane at z = 0. A box of
size ``(w, l, h)`` at ``yaw = 0`` spans ``±w/2`` along x and ``±l/2`` along y,
so its heading (the length axis) is ``(-sin(yaw), cos(yaw))``.

Camera frames follow the pinhole convention: x right, y down, z along the
optical axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SCENE_FORMAT = "bevbench-scene/1"

CLASSES: tuple[str, ...] = ("car", "pedestrian", "truck", "barrier")

# (width, length, height) in meters
SIZE_PRIORS: dict[str, tuple[float, float, float]] = {
    "car": (1.9, 4.6, 1.7),
    "pedestrian": (0.7, 0.7, 1.75),
    "truck": (2.5, 7.0, 3.0),
    "barrier": (2.0, 0.5, 1.0),
}

STATIC_CLASSES = frozenset({"barrier"})


class PlacementInfeasible(RuntimeError):
    """Rejection sampling could not place the requested number of objects."""


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a > math.pi:
        a -= 2.0 * math.pi
    elif a <= -math.pi:
        a += 2.0 * math.pi
    return a


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class RigidTransform:
    """``p' = R p + t`` with ``R`` a proper rotation."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation=(0.0, 0.0, 0.0)):
        R = np.array(rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(translation, dtype=np.float64).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def __setattr__(self, name, value):
        raise AttributeError("RigidTransform is immutable")

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3))

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> RigidTransform:
        return cls(d["rotation"], d["translation"])


def transform_points(points, T: RigidTransform) -> np.ndarray:
    return T.apply(points)


@dataclass(frozen=True)
class ObjectBox:
    id: int
    class_label: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        object.__setattr__(self, "yaw", float(self.yaw))
        if len(self.center) != 3 or len(self.size) != 3 or len(self.velocity) != 2:
            raise ValueError("center/size must be 3-vectors and velocity a 2-vector")
        if min(self.size) <= 0:
            raise ValueError(f"box {self.id}: size components must be > 0, got {self.size}")
        if not -math.pi < self.yaw <= math.pi:
            raise ValueError(f"box {self.id}: yaw {self.yaw} outside (-pi, pi]")

    def to_dict(self) -> dict:
        return {"id": self.id, "class_label": self.class_label, "center": list(self.center),
                "size": list(self.size), "yaw": self.yaw, "velocity": list(self.velocity)}

    @classmethod
    def from_dict(cls, d: dict) -> ObjectBox:
        return cls(int(d["id"]), d["class_label"], d["center"], d["size"], d["yaw"],
                   d.get("velocity", (0.0, 0.0)))


def box_corners(box: ObjectBox) -> np.ndarray:
    """The 8 corners of ``box`` in the ego frame, shape (8, 3).

    Order: bottom face then top face, each counter-clockwise starting from
    (-w/2, -l/2).
    """
    w, l, h = box.size
    local = np.array([[-w / 2, -l / 2, -h / 2], [w / 2, -l / 2, -h / 2],
                      [w / 2, l / 2, -h / 2], [-w / 2, l / 2, -h / 2],
                      [-w / 2, -l / 2, h / 2], [w / 2, -l / 2, h / 2],
                      [w / 2, l / 2, h / 2], [-w / 2, l / 2, h / 2]])
    return local @ yaw_rotation(box.yaw).T + np.asarray(box.center)


def bev_footprint(box: ObjectBox) -> np.ndarray:
    """Footprint rectangle corners in the x-y plane, shape (4, 2), CCW."""
    return box_corners(box)[:4, :2]


def footprints_overlap(a: np.ndarray, b: np.ndarray, margin: float = 0.0) -> bool:
    """Separating-axis test for two convex polygons.

    Returns True when the polygons overlap with positive area, or come closer
    than ``margin`` along every candidate axis.
    """
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=0) - poly
        normals = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        pa = a @ normals.T
        pb = b @ normals.T
        gap = np.maximum(pb.min(axis=0) - pa.max(axis=0), pa.min(axis=0) - pb.max(axis=0))
        if np.any(gap >= margin):
            return False
    return True


@dataclass(frozen=True, eq=False)
class CameraModel:
    id: str
    intrinsics: tuple[float, float, float, float]  # fx, fy, cx, cy
    image_size: tuple[int, int]  # H, W
    pose: RigidTransform  # ego -> camera

    def __post_init__(self):
        fx, fy, cx, cy = (float(v) for v in self.intrinsics)
        H, W = (int(v) for v in self.image_size)
        object.__setattr__(self, "intrinsics", (fx, fy, cx, cy))
        object.__setattr__(self, "image_size", (H, W))
        if fx <= 0 or fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= cx < W and 0 <= cy < H):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        fx, fy, cx, cy = self.intrinsics
        return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])

    def project(self, points_ego) -> tuple[np.ndarray, np.ndarray]:
        """Project ego points; returns ((u, v) pixel coordinates, camera-frame depth)."""
        pc = self.pose.apply(points_ego)
        z = pc[..., 2]
        fx, fy, cx, cy = self.intrinsics
        with np.errstate(divide="ignore", invalid="ignore"):
            u = fx * pc[..., 0] / z + cx
            v = fy * pc[..., 1] / z + cy
        return np.stack([u, v], axis=-1), z

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (self.id, self.intrinsics, self.image_size, self.pose) == \
            (other.id, other.intrinsics, other.image_size, other.pose)

    def to_dict(self) -> dict:
        return {"id": self.id, "intrinsics": list(self.intrinsics),
                "image_size": list(self.image_size), "pose": self.pose.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> CameraModel:
        return cls(d["id"], tuple(d["intrinsics"]), tuple(d["image_size"]),
                   RigidTransform.from_dict(d["pose"]))


@dataclass(frozen=True, eq=False)
class LidarModel:
    pose: RigidTransform  # ego -> sensor
    max_range: float = 80.0
    points_per_m2_at_10m: float = 200.0

    def __post_init__(self):
        if self.max_range <= 0 or self.points_per_m2_at_10m <= 0:
            raise ValueError("max_range and density must be positive")

    @property
    def origin(self) -> np.ndarray:
        """Sensor origin in the ego frame."""
        return self.pose.inverse().translation

    def __eq__(self, other):
        if not isinstance(other, LidarModel):
            return NotImplemented
        return (self.pose, self.max_range, self.points_per_m2_at_10m) == \
            (other.pose, other.max_range, other.points_per_m2_at_10m)

    def to_dict(self) -> dict:
        return {"pose": self.pose.to_dict(), "max_range": self.max_range,
                "points_per_m2_at_10m": self.points_per_m2_at_10m}

    @classmethod
    def from_dict(cls, d: dict) -> LidarModel:
        return cls(RigidTransform.from_dict(d["pose"]), float(d["max_range"]),
                   float(d["points_per_m2_at_10m"]))


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: str
    ego_pose: RigidTransform  # world -> ego
    objects: tuple[ObjectBox, ...]
    cameras: tuple[CameraModel, ...]
    lidar: LidarModel
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if not self.cameras:
            raise ValueError("scene rig needs at least one camera")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique within a scene")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def camera(self, camera_id: str) -> CameraModel:
        for cam in self.cameras:
            if cam.id == camera_id:
                return cam
        raise KeyError(camera_id)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return scene_to_dict(self) == scene_to_dict(other)

    __hash__ = None


@dataclass(frozen=True)
class RigConfig:
    n_cameras: int = 6
    image_size: tuple[int, int] = (96, 176)
    hfov_deg: float = 70.0
    camera_height: float = 1.6
    camera_offset: float = 1.0  # horizontal distance from ego origin
    lidar_height: float = 1.8
    max_range: float = 80.0
    points_per_m2_at_10m: float = 200.0


@dataclass(frozen=True)
class SceneGenConfig:
    count_range: tuple[int, int] = (8, 20)
    class_mix: dict = field(default_factory=lambda: {"car": 0.5, "pedestrian": 0.25,
                                                     "truck": 0.1, "barrier": 0.15})
    extent: float = 50.0  # objects lie inside [-extent, extent]^2
    min_radius: float = 4.0  # keep-out disc around the ego origin
    speed_range: tuple[float, float] = (0.0, 10.0)
    size_jitter: float = 0.1
    clearance: float = 0.5  # minimum BEV gap between footprints
    max_attempts: int = 200
    rig: RigConfig = field(default_factory=RigConfig)

    @classmethod
    def from_dict(cls, d: dict) -> SceneGenConfig:
        d = dict(d)
        if "rig" in d:
            rig = dict(d["rig"])
            if "image_size" in rig:
                rig["image_size"] = tuple(rig["image_size"])
            d["rig"] = RigConfig(**rig)
        for key in ("count_range", "speed_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return asdict(self)


def camera_pose_for_azimuth(azimuth: float, position) -> RigidTransform:
    """Ego->camera transform for a level camera looking along ``azimuth``."""
    c, s = math.cos(azimuth), math.sin(azimuth)
    forward = np.array([c, s, 0.0])
    right = np.array([s, -c, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    R = np.stack([right, down, forward])
    return RigidTransform(R, -R @ np.asarray(position, dtype=np.float64))


def default_rig(cfg: RigConfig = RigConfig()) -> tuple[tuple[CameraModel, ...], LidarModel]:
    H, W = cfg.image_size
    fx = (W / 2.0) / math.tan(math.radians(cfg.hfov_deg) / 2.0)
    cams = []
    for k in range(cfg.n_cameras):
        az = 2.0 * math.pi * k / cfg.n_cameras
        pos = (cfg.camera_offset * math.cos(az), cfg.camera_offset * math.sin(az), cfg.camera_height)
        cams.append(CameraModel(f"cam{k}", (fx, fx, W / 2.0, H / 2.0), (H, W),
                                camera_pose_for_azimuth(az, pos)))
    lidar = LidarModel(RigidTransform(np.eye(3), (0.0, 0.0, -cfg.lidar_height)),
                       cfg.max_range, cfg.points_per_m2_at_10m)
    return tuple(cams), lidar


def generate_scene(gen_config: SceneGenConfig, seed: int, scene_id: str | None = None) -> Scene:
    """Sample a scene with non-overlapping boxes; a pure function of (config, seed)."""
    rng = np.random.default_rng(seed)
    lo, hi = gen_config.count_range
    n = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    labels = sorted(gen_config.class_mix)
    probs = np.array([gen_config.class_mix[c] for c in labels], dtype=np.float64)
    probs /= probs.sum()
    ext = gen_config.extent
    placed: list[ObjectBox] = []
    footprints: list[np.ndarray] = []
    for i in range(n):
        label = labels[int(rng.choice(len(labels), p=probs))]
        prior = np.array(SIZE_PRIORS.get(label, (1.0, 1.0, 1.0)))
        for _ in range(gen_config.max_attempts):
            size = prior * (1.0 + gen_config.size_jitter * rng.uniform(-1.0, 1.0, 3))
            yaw = wrap_angle(rng.uniform(-math.pi, math.pi))
            x, y = rng.uniform(-ext, ext, 2)
            if math.hypot(x, y) < gen_config.min_radius:
                continue
            if label in STATIC_CLASSES:
                vel = (0.0, 0.0)
            else:
                speed = rng.uniform(*gen_config.speed_range)
                vel = (-speed * math.sin(yaw), speed * math.cos(yaw))
            box = ObjectBox(i, label, (x, y, size[2] / 2.0), tuple(size), yaw, vel)
            fp = bev_footprint(box)
            if np.any(np.abs(fp) > ext):
                continue
            if any(footprints_overlap(fp, other, gen_config.clearance) for other in footprints):
                continue
            placed.append(box)
            footprints.append(fp)
            break
        else:
            raise PlacementInfeasible(
                f"could not place object {i + 1} of {n} within ±{ext} m after "
                f"{gen_config.max_attempts} attempts (seed={seed})")
    cams, lidar = default_rig(gen_config.rig)
    return Scene(scene_id if scene_id is not None else f"scene-{seed:016x}",
                 RigidTransform.identity(), tuple(placed), cams, lidar, seed)


def scene_to_dict(scene: Scene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "ego_pose": scene.ego_pose.to_dict(),
        "objects": [o.to_dict() for o in scene.objects],
        "rig": {"cameras": [c.to_dict() for c in scene.cameras], "lidar": scene.lidar.to_dict()},
    }


def scene_from_dict(d: dict) -> Scene:
    if d.get("format") != SCENE_FORMAT:
        raise ValueError(f"unsupported scene format {d.get('format')!r}, expected {SCENE_FORMAT!r}")
    return Scene(d["scene_id"], RigidTransform.from_dict(d["ego_pose"]),
                 tuple(ObjectBox.from_dict(o) for o in d["objects"]),
                 tuple(CameraModel.from_dict(c) for c in d["rig"]["cameras"]),
                 LidarModel.from_dict(d["rig"]["lidar"]), int(d["seed"]))


# json writes floats with repr(), the shortest string that round-trips exactly
def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), indent=1)


def loads_scene(text: str) -> Scene:
    return scene_from_dict(json.loads(text))


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(dumps_scene(scene))


def load_scene(path) -> Scene:
    return loads_scene(Path(path).read_text())


def with_objects(scene: Scene, objects: Sequence[ObjectBox]) -> Scene:
    return Scene(scene.scene_id, scene.ego_pose, tuple(objects), scene.cameras, scene.lidar, scene.seed)
