"""Experiment driver: seeded scene batches swept over sensor modes and occlusion levels.

A sweep is a list of cells ``(sensor_mode, occluded_sensor, severity)``. Every
scene is generated, rendered and degraded once per distinct input, the fused
BEV is run through the detector, and each cell is evaluated once on the
detections pooled across all scenes.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .bevpipe import (LIDAR_CHANNELS, SENSOR_MODES, PipelineConfig, camera_bev, camera_channel_names,
                      fuse_bev, lidar_bev, zero_bev)
from .degrade import (CameraDegradeSpec, LidarDegradeSpec, apply_camera_occlusion, generate_soiling_mask,
                      lidar_dropout, load_mask)
from .detect import Detection, DetectorParams, detect
from .metrics import EvalConfig, EvalResult, evaluate
from .scene import CLASSES, ObjectBox, RigConfig, SceneGenConfig, generate_scene
from .seeding import derive_seed, scene_seed
from .sensors import render_cameras, render_lidar

TARGETS = ("none", "camera", "lidar")
TABLE_II_LEVELS = (0.0, 0.3, 0.6, 0.7, 0.8, 0.9)
CONFIG_FORMAT = "bevbench-experiment/1"


class ConfigError(ValueError):
    pass


class SweepError(RuntimeError):
    pass


def default_camera_sigma(image_width: int) -> float:
    """9 px at a 1600 px wide image, scaled to the rendered width."""
    return 9.0 * image_width / 1600.0


def _default_targets() -> dict:
    return {"C": ("none", "camera"), "L": ("none", "lidar"), "C+L": ("none", "camera", "lidar")}


@dataclass(frozen=True)
class ExperimentConfig:
    n_scenes: int = 100
    master_seed: int = 0
    gen_config: SceneGenConfig = field(default_factory=SceneGenConfig)
    pipeline_config: PipelineConfig = field(default_factory=PipelineConfig)
    detector_params: DetectorParams = field(default_factory=DetectorParams)
    eval_config: EvalConfig = field(default_factory=EvalConfig)
    camera_degrade: CameraDegradeSpec | None = field(
        default_factory=lambda: CameraDegradeSpec(sigma=default_camera_sigma(RigConfig().image_size[1])))
    camera_coverages: tuple[float, ...] = (0.25, 0.5)
    lidar_levels: tuple[float, ...] = TABLE_II_LEVELS
    sensor_modes: tuple[str, ...] = SENSOR_MODES
    occlusion_targets: dict = field(default_factory=_default_targets)
    output_dir: str = "bevbench-out"

    def __post_init__(self):
        object.__setattr__(self, "camera_coverages", tuple(float(c) for c in self.camera_coverages))
        object.__setattr__(self, "lidar_levels", tuple(float(r) for r in self.lidar_levels))
        object.__setattr__(self, "sensor_modes", tuple(self.sensor_modes))
        object.__setattr__(self, "occlusion_targets",
                           {m: tuple(t) for m, t in self.occlusion_targets.items()})
        if self.n_scenes < 1:
            raise ConfigError("n_scenes must be >= 1")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ConfigError("master_seed must be an unsigned 64-bit integer")
        for name, levels in (("lidar_levels", self.lidar_levels), ("camera_coverages", self.camera_coverages)):
            if any(not 0.0 <= v <= 1.0 for v in levels):
                raise ConfigError(f"{name} must lie in [0, 1]")
            if list(levels) != sorted(levels):
                raise ConfigError(f"{name} must be sorted ascending")
        if not self.sensor_modes or any(m not in SENSOR_MODES for m in self.sensor_modes):
            raise ConfigError(f"sensor_modes must be a nonempty subset of {SENSOR_MODES}")
        for mode in self.sensor_modes:
            for t in self.targets_for(mode):
                if t not in TARGETS:
                    raise ConfigError(f"unknown occlusion target {t!r} for mode {mode}")
                if t == "camera" and mode == "L" or t == "lidar" and mode == "C":
                    raise ConfigError(f"mode {mode} has no {t} input to occlude")
                if t == "camera" and self.camera_degrade is None:
                    raise ConfigError(f"mode {mode} occludes the camera but camera_degrade is not set")

    def targets_for(self, mode: str) -> tuple[str, ...]:
        return self.occlusion_targets.get(mode, ("none",))

    def camera_severities(self) -> tuple:
        if self.camera_degrade is not None and self.camera_degrade.mask_path:
            return (self.camera_degrade.mask_path,)
        return self.camera_coverages

    def to_dict(self) -> dict:
        """Serializable form; ``output_dir`` is left out so reports do not depend on it."""
        ev = self.eval_config
        return {
            "format": CONFIG_FORMAT,
            "n_scenes": self.n_scenes,
            "master_seed": self.master_seed,
            "gen": self.gen_config.to_dict(),
            "pipeline": self.pipeline_config.to_dict(),
            "detector": self.detector_params.to_dict(),
            "eval": {"classes": list(ev.classes), "thresholds": list(ev.thresholds),
                     "tp_threshold": ev.tp_threshold, "symmetric_classes": sorted(ev.symmetric_classes)},
            "camera_degrade": None if self.camera_degrade is None else {
                "sigma": self.camera_degrade.sigma, "blob_count": self.camera_degrade.blob_count,
                "mask_path": self.camera_degrade.mask_path},
            "camera_coverages": list(self.camera_coverages),
            "lidar_levels": list(self.lidar_levels),
            "sensor_modes": list(self.sensor_modes),
            "occlusion_targets": {m: list(t) for m, t in self.occlusion_targets.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        fmt = d.pop("format", CONFIG_FORMAT)
        if fmt != CONFIG_FORMAT:
            raise ConfigError(f"unsupported config format {fmt!r}")
        kw = {}
        try:
            for key in ("n_scenes", "master_seed", "camera_coverages", "lidar_levels", "sensor_modes",
                        "occlusion_targets", "output_dir"):
                if key in d:
                    kw[key] = d.pop(key)
            gen = SceneGenConfig.from_dict(d.pop("gen", {}))
            kw["gen_config"] = gen
            if "pipeline" in d:
                kw["pipeline_config"] = PipelineConfig.from_dict(d.pop("pipeline"))
            if "detector" in d:
                kw["detector_params"] = DetectorParams.from_dict(d.pop("detector"))
            if "eval" in d:
                ev = dict(d.pop("eval"))
                kw["eval_config"] = EvalConfig(
                    classes=tuple(ev.get("classes", CLASSES)),
                    thresholds=tuple(ev.get("thresholds", EvalConfig.thresholds)),
                    tp_threshold=float(ev.get("tp_threshold", EvalConfig.tp_threshold)),
                    symmetric_classes=frozenset(ev.get("symmetric_classes", EvalConfig.symmetric_classes)))
            if "camera_degrade" in d:
                cd = d.pop("camera_degrade")
                if cd is not None:
                    cd = dict(cd)
                    cd.setdefault("sigma", default_camera_sigma(gen.rig.image_size[1]))
                    cd.pop("coverage", None)
                    kw["camera_degrade"] = CameraDegradeSpec(**cd)
                else:
                    kw["camera_degrade"] = None
            else:
                kw["camera_degrade"] = CameraDegradeSpec(sigma=default_camera_sigma(gen.rig.image_size[1]))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        if d:
            raise ConfigError(f"unknown config keys: {sorted(d)}")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(data)


@dataclass(frozen=True)
class Cell:
    sensor_mode: str
    occluded_sensor: str
    severity: float | str

    @property
    def label(self) -> str:
        if self.occluded_sensor == "none":
            return self.sensor_mode
        tag = "C-occluded" if self.occluded_sensor == "camera" else "L-occluded"
        if self.sensor_mode == "C+L":
            return f"C+L ({tag})"
        return tag

    def inputs(self) -> tuple[str, float | str, float]:
        """(mode, camera severity, LiDAR ratio) that feed the pipeline."""
        cam = self.severity if self.occluded_sensor == "camera" else 0.0
        r = self.severity if self.occluded_sensor == "lidar" else 0.0
        return (self.sensor_mode, cam, r)


def sweep_cells(config: ExperimentConfig) -> list[Cell]:
    cells = []
    for mode in config.sensor_modes:
        for target in config.targets_for(mode):
            if target == "none":
                cells.append(Cell(mode, "none", 0.0))
            elif target == "camera":
                cells.extend(Cell(mode, "camera", s) for s in config.camera_severities())
            else:
                cells.extend(Cell(mode, "lidar", r) for r in config.lidar_levels)
    return cells


@dataclass
class ReportRow:
    sensor_mode: str
    occluded_sensor: str
    severity: float | str
    mAP: float
    NDS: float
    per_class_ap: dict
    n_scenes: int
    wall_time: float = 0.0
    result: EvalResult | None = field(default=None, repr=False)

    @property
    def label(self) -> str:
        return Cell(self.sensor_mode, self.occluded_sensor, self.severity).label


def _camera_masks(images, degrade: CameraDegradeSpec, coverage, seed: int):
    if degrade.mask_path:
        return [load_mask(degrade.mask_path, img.shape) for img in images]
    return [generate_soiling_mask(img.shape, coverage, degrade.blob_count,
                                  derive_seed(seed, "mask", img.camera_id)) for img in images]


def degrade_cameras(images, degrade: CameraDegradeSpec, coverage, seed: int):
    """Occlude every camera with its own mask; coverage 0 returns the inputs unchanged."""
    if not degrade.mask_path and coverage == 0:
        return list(images)
    masks = _camera_masks(images, degrade, coverage, seed)
    return [apply_camera_occlusion(img, m, degrade.sigma) for img, m in zip(images, masks)]


def degrade_lidar(cloud, r: float, seed: int):
    return lidar_dropout(cloud, LidarDegradeSpec(r, derive_seed(seed, "drop")))


def run_scene(config: ExperimentConfig, index: int, inputs: Sequence[tuple]) -> tuple:
    """Generate, render, degrade and detect one scene for every distinct cell input.

    Returns (scene_id, ground-truth boxes, {input: detections}, {input: seconds}).
    """
    seed = scene_seed(config.master_seed, index)
    try:
        scene = generate_scene(config.gen_config, seed, scene_id=f"scene-{index:04d}")
        images = render_cameras(scene)
        cloud = render_lidar(scene, derive_seed(seed, "lidar"))
        pc = config.pipeline_config
        cam_names = camera_channel_names(images[0])
        cam_cache, lidar_cache = {}, {}
        dets, times = {}, {}
        for key in inputs:
            t0 = time.perf_counter()
            mode, cam_sev, r = key
            if mode == "L":
                cam = zero_bev(pc.grid, cam_names)
            else:
                if cam_sev not in cam_cache:
                    occluded = degrade_cameras(images, config.camera_degrade, cam_sev, seed) \
                        if cam_sev != 0.0 else images
                    cam_cache[cam_sev] = camera_bev(occluded, scene.cameras, pc.grid, pc.depth)
                cam = cam_cache[cam_sev]
            if mode == "C":
                lid = zero_bev(pc.grid, LIDAR_CHANNELS)
            else:
                if r not in lidar_cache:
                    lidar_cache[r] = lidar_bev(degrade_lidar(cloud, r, seed), pc.grid)
                lid = lidar_cache[r]
            dets[key] = detect(fuse_bev(cam, lid, pc.encoder), config.detector_params)
            times[key] = time.perf_counter() - t0
    except Exception as e:
        raise SweepError(f"scene {index} (seed {seed}) failed: {type(e).__name__}: {e}") from e
    return scene.scene_id, list(scene.objects), dets, times


def _run_scene_task(task):
    return run_scene(*task)


def run_sweep(config: ExperimentConfig, workers: int = 1, cells: Sequence[Cell] | None = None,
              progress=None) -> list[ReportRow]:
    """Run every cell of the sweep; rows come back in cell order.

    Scenes are processed in parallel when ``workers > 1`` and gathered in
    index order, so the rows do not depend on the worker count.
    """
    cells = list(cells) if cells is not None else sweep_cells(config)
    if not cells:
        raise ConfigError("sweep has no cells")
    inputs = list(dict.fromkeys(c.inputs() for c in cells))
    tasks = [(config, i, inputs) for i in range(config.n_scenes)]
    gts: dict[str, list[ObjectBox]] = {}
    dets: dict[tuple, dict[str, list[Detection]]] = {k: {} for k in inputs}
    times = dict.fromkeys(inputs, 0.0)

    def collect(out):
        scene_id, objects, scene_dets, scene_times = out
        gts[scene_id] = objects
        for k in inputs:
            dets[k][scene_id] = scene_dets[k]
            times[k] += scene_times[k]
        if progress is not None:
            progress(len(gts), config.n_scenes)

    if workers <= 1:
        for t in tasks:
            collect(_run_scene_task(t))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for out in pool.map(_run_scene_task, tasks):
                collect(out)

    results: dict[tuple, tuple[EvalResult, float]] = {}
    rows = []
    for cell in cells:
        key = cell.inputs()
        if key not in results:
            t0 = time.perf_counter()
            res = evaluate(dets[key], gts, config.eval_config)
            results[key] = (res, times[key] + time.perf_counter() - t0)
        res, wall = results[key]
        per_class = {c: sum(v.values()) / len(v) for c, v in res.per_class_ap.items()}
        rows.append(ReportRow(cell.sensor_mode, cell.occluded_sensor, cell.severity, res.mAP, res.nds,
                              per_class, config.n_scenes, wall, res))
    return rows

