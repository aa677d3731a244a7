"""Deterministic reference detector on fused BEV features.

A center heatmap is formed from the occupancy-bearing channels. Each peak is
moved to the nearby mass mode by Gaussian mean shift, modes are thinned by
greedy radial NMS, and every occupied cell within ``cluster_radius`` joins
the cluster of its nearest surviving mode. Box attributes come from cluster
moments: mass-weighted centroid, principal-axis yaw, extremal-projection extent.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bevpipe import OCCUPANCY_CHANNELS, BEVGrid
from .scene import CLASSES, SIZE_PRIORS, wrap_angle

DETS_FORMAT = "bevbench-dets/1"


@dataclass(frozen=True)
class Detection:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float]
    class_label: str
    score: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        if min(self.size) <= 0:
            raise ValueError("detection size must be positive")
        if not self.score > 0:
            raise ValueError("detection score must be positive")

    def to_dict(self) -> dict:
        return {"class_label": self.class_label, "center": list(self.center), "size": list(self.size),
                "yaw": self.yaw, "velocity": list(self.velocity), "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> Detection:
        return cls(tuple(d["center"]), tuple(d["size"]), float(d["yaw"]),
                   tuple(d.get("velocity", (0.0, 0.0))), d["class_label"], float(d["score"]))


@dataclass(frozen=True)
class DetectorParams:
    peak_threshold: float = 1.5
    nms_radius: float = 3.0
    cluster_radius: float = 4.0
    min_cluster_cells: int = 2
    kappa: float = 50.0
    # cells at or below this mass are ignored when growing clusters
    cell_floor: float = 0.05
    mean_shift_iters: int = 20
    occupancy_weights: dict = field(default_factory=lambda: {"lidar/point_count": 1.0,
                                                             "cam/occupancy": 1.0})

    def __post_init__(self):
        for name in ("peak_threshold", "nms_radius", "cluster_radius", "min_cluster_cells", "kappa"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DetectorParams:
        return cls(**d)


def _occupancy_mass(bev: BEVGrid, weights: dict | None = None) -> np.ndarray:
    names = [n for n in bev.channel_names if n in OCCUPANCY_CHANNELS]
    if not names:
        raise ValueError(f"BEV grid has no occupancy channel among {bev.channel_names}")
    weights = weights or {}
    mass = np.zeros(bev.data.shape[:2])
    for n in names:
        mass += weights.get(n, 1.0) * bev.channel(n)
    return mass


def _smooth3(a: np.ndarray) -> np.ndarray:
    """Separable [1, 2, 1] / 4 filter, zero padded."""
    p = np.pad(a, 1)
    a = 0.25 * p[:-2, :] + 0.5 * p[1:-1, :] + 0.25 * p[2:, :]
    return 0.25 * a[:, :-2] + 0.5 * a[:, 1:-1] + 0.25 * a[:, 2:]


def center_heatmap(bev: BEVGrid, weights: dict | None = None) -> np.ndarray:
    """Weighted sum of occupancy channels smoothed with a radius-1 binomial kernel."""
    return _smooth3(_occupancy_mass(bev, weights))


def find_peaks(heatmap: np.ndarray, threshold: float) -> np.ndarray:
    """Cells that beat all 8 neighbours under the order (value, -raster index).

    Equal values are won by the lexicographically smaller cell, so plateaus
    yield exactly one peak. Returns (K, 2) integer cell indices.
    """
    X, Y = heatmap.shape
    p = np.pad(heatmap, 1, constant_values=-np.inf)
    is_peak = heatmap >= threshold
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = p[1 + di:1 + di + X, 1 + dj:1 + dj + Y]
            earlier = di < 0 or (di == 0 and dj < 0)
            is_peak &= (heatmap > nb) if earlier else (heatmap >= nb)
    return np.argwhere(is_peak)


def _fold_yaw(yaw: float) -> float:
    """Reduce a line direction to (-pi/2, pi/2]."""
    y = math.fmod(yaw, math.pi)
    if y > math.pi / 2:
        y -= math.pi
    elif y <= -math.pi / 2:
        y += math.pi
    return y


def principal_box(offsets: np.ndarray, mass: np.ndarray, cell: np.ndarray) -> tuple[float, float, float]:
    """(yaw, minor extent, major extent) of a weighted 2-D point set.

    Yaw follows the box convention with the major axis as the length axis
    (length axis = (-sin yaw, cos yaw)), reduced to (-pi/2, pi/2]. Extents
    are extremal projections, floored at one cell pitch.
    """
    c = np.average(offsets, axis=0, weights=mass)
    d = offsets - c
    cov = (d * mass[:, None]).T @ d / mass.sum()
    _, evecs = np.linalg.eigh(cov)
    major = evecs[:, 1]
    minor = evecs[:, 0]
    yaw = _fold_yaw(math.atan2(major[1], major[0]) - math.pi / 2)
    pm = d @ major
    pn = d @ minor
    floor = float(min(cell))
    return yaw, max(float(pn.max() - pn.min()), floor), max(float(pm.max() - pm.min()), floor)


def classify_by_size(minor: float, major: float, classes: Sequence[str] = CLASSES) -> int:
    """Nearest class prior in (short side, long side); ties go to the lower index."""
    cost = [(minor - min(SIZE_PRIORS[c][:2])) ** 2 + (major - max(SIZE_PRIORS[c][:2])) ** 2
            for c in classes]
    return int(np.argmin(cost))


def extract_detections(bev: BEVGrid, heatmap: np.ndarray | None = None,
                       params: DetectorParams = DetectorParams()) -> list[Detection]:
    mass = _occupancy_mass(bev, params.occupancy_weights)
    if heatmap is None:
        heatmap = _smooth3(mass)
    if heatmap.shape != mass.shape:
        raise ValueError("heatmap shape does not match BEV grid")
    spec = bev.spec
    X, Y = mass.shape
    res = np.array(spec.resolution[:2])
    class_idx = [bev.channel_names.index(f"cam/{c}") if f"cam/{c}" in bev.channel_names else None
                 for c in CLASSES]

    peaks = find_peaks(heatmap, params.peak_threshold)
    if len(peaks) == 0:
        return []
    values = heatmap[peaks[:, 0], peaks[:, 1]]
    order = np.lexsort((peaks[:, 1], peaks[:, 0], -values))

    R = params.cluster_radius
    bw = R / 2.0
    half = np.ceil(2.0 * R / res).astype(int)
    modes: list[tuple[int, int, np.ndarray, float]] = []
    for k in order:
        pi, pj = (int(v) for v in peaks[k])
        i0, i1 = max(pi - half[0], 0), min(pi + half[0] + 1, X)
        j0, j1 = max(pj - half[1], 0), min(pj + half[1] + 1, Y)
        win = mass[i0:i1, j0:j1]
        ii, jj = np.nonzero(win > params.cell_floor)
        if len(ii) == 0:
            continue
        # offsets relative to the peak cell keep the arithmetic shift-invariant
        off = np.column_stack([ii + i0 - pi, jj + j0 - pj]) * res
        m = win[ii, jj]
        center = np.zeros(2)
        for _ in range(params.mean_shift_iters):
            d2 = ((off - center) ** 2).sum(axis=1)
            w = m * np.exp(-0.5 * d2 / (bw * bw))
            new_center = (off * w[:, None]).sum(axis=0) / w.sum()
            if np.abs(new_center - center).max() < 1e-4:
                center = new_center
                break
            center = new_center
        xy = np.array([pi, pj]) * res + center
        # radial NMS on the converged modes, strongest peak first
        if any(np.hypot(*(xy - q[2])) <= params.nms_radius for q in modes):
            continue
        modes.append((pi, pj, xy, float(values[k])))

    found = []
    mode_xy = np.array([q[2] for q in modes]).reshape(-1, 2)
    for n, (pi, pj, xy, peak_value) in enumerate(modes):
        i0, i1 = max(pi - half[0], 0), min(pi + half[0] + 1, X)
        j0, j1 = max(pj - half[1], 0), min(pj + half[1] + 1, Y)
        win = mass[i0:i1, j0:j1]
        ii, jj = np.nonzero(win > params.cell_floor)
        off = np.column_stack([ii + i0 - pi, jj + j0 - pj]) * res
        m = win[ii, jj]
        rel = off - (xy - np.array([pi, pj]) * res)
        dist = np.hypot(rel[:, 0], rel[:, 1])
        # each cell belongs to its nearest mode (earlier mode on ties)
        cell_xy = off + np.array([pi, pj]) * res
        near = np.hypot(cell_xy[:, None, 0] - mode_xy[None, :, 0], cell_xy[:, None, 1] - mode_xy[None, :, 1])
        sel = (dist <= R) & (np.argmin(near, axis=1) == n)
        if sel.sum() < params.min_cluster_cells:
            continue
        co, cm = off[sel], m[sel]
        center = np.average(co, axis=0, weights=cm)
        yaw, minor, major = principal_box(co, cm, res)
        ci, cj = ii[sel] + i0, jj[sel] + j0
        class_mass = np.array([bev.data[ci, cj, c].sum() if c is not None else 0.0 for c in class_idx])
        if class_mass.sum() > 0:
            label = int(np.argmax(class_mass))
        else:
            label = classify_by_size(minor, major)
        cls = CLASSES[label]
        prior_w, prior_l, height = SIZE_PRIORS[cls]
        if prior_w > prior_l:
            # classes wider than long: the major axis is the width axis
            width, length, yaw = major, minor, _fold_yaw(yaw + math.pi / 2)
        else:
            width, length = minor, major
        x = spec.x_range[0] + (pi + 0.5) * res[0] + center[0]
        y = spec.y_range[0] + (pj + 0.5) * res[1] + center[1]
        score = 1.0 - math.exp(-peak_value / params.kappa)
        if score <= 0:
            continue
        found.append(((-score, pi, pj),
                      Detection((x, y, height / 2.0), (width, length, height), yaw, (0.0, 0.0), cls, score)))
    found.sort(key=lambda t: t[0])
    return [d for _, d in found]


def detect(bev: BEVGrid, params: DetectorParams = DetectorParams()) -> list[Detection]:
    return extract_detections(bev, center_heatmap(bev, params.occupancy_weights), params)


def dumps_detections(dets: Sequence[Detection], scene_id: str | None = None) -> str:
    return json.dumps({"format": DETS_FORMAT, "scene_id": scene_id,
                       "detections": [d.to_dict() for d in dets]}, indent=1)


def loads_detections(text: str) -> list[Detection]:
    d = json.loads(text)
    if isinstance(d, list):
        return [Detection.from_dict(x) for x in d]
    if d.get("format") != DETS_FORMAT:
        raise ValueError(f"unsupported detections format {d.get('format')!r}")
    return [Detection.from_dict(x) for x in d["detections"]]


def save_detections(dets: Sequence[Detection], path, scene_id: str | None = None) -> None:
    Path(path).write_text(dumps_detections(dets, scene_id))


def load_detections(path) -> list[Detection]:
    return loads_detections(Path(path).read_text())
