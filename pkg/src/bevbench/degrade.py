"""Sensor occlusion operators.

Camera: a binary soiling mask ``M`` selects the contaminated pixels; those are
blurred and composited back,

    I_occ = G_sigma * (I ⊙ M)
    I'    = I ⊙ (1 - M) + I_occ

LiDAR: a fixed fraction ``r`` of points is removed uniformly at random, keeping
``round_half_up(N * (1 - r))`` points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .sensors import FeatureImage, PointCloud


class MaskGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SoilMask:
    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2:
            raise ValueError("mask must be 2-D")
        if not np.isin(g, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        g = g.astype(np.uint8)
        g.flags.writeable = False
        object.__setattr__(self, "grid", g)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def coverage(self) -> float:
        return int(self.grid.sum()) / self.grid.size

    @classmethod
    def zeros(cls, shape) -> SoilMask:
        return cls(np.zeros(shape, dtype=np.uint8))


@dataclass(frozen=True)
class CameraDegradeSpec:
    """``mask_path`` overrides the procedural generator when set."""

    sigma: float = 1.0
    coverage: float = 0.25
    blob_count: int = 3
    seed: int = 0
    mask_path: str | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError("coverage must lie in [0, 1]")


@dataclass(frozen=True)
class LidarDegradeSpec:
    r: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"dropout ratio {self.r} outside [0, 1]")


def _smooth_noise(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    n = gaussian_filter(rng.standard_normal(shape), sigma=max(scale, 0.5), mode="wrap")
    sd = n.std()
    return n / sd if sd > 0 else n


def generate_soiling_mask(shape, coverage: float, blob_count: int, seed: int) -> SoilMask:
    """Irregular blob mask with exactly ``round(coverage * H * W)`` occluded pixels.

    A soft field is built from randomly placed, randomly scaled and rotated
    elliptical bumps whose radius is modulated by smooth noise; the top pixels
    of that field form the mask. Raises MaskGenerationError if the pixel grid
    cannot realize the coverage within 10% relative.
    """
    H, W = (int(s) for s in shape)
    if not 0.0 <= coverage <= 1.0:
        raise ValueError("coverage must lie in [0, 1]")
    if coverage == 0.0:
        return SoilMask.zeros((H, W))
    if coverage == 1.0:
        return SoilMask(np.ones((H, W), dtype=np.uint8))
    if blob_count < 1:
        raise ValueError("blob_count must be >= 1 when coverage > 0")
    n_on = int(math.floor(coverage * H * W + 0.5))
    if n_on == 0 or abs(n_on / (H * W) - coverage) > 0.1 * coverage:
        raise MaskGenerationError(
            f"coverage {coverage} cannot be realized within 10% on a {H}x{W} grid")

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    base = math.sqrt(coverage * H * W / (blob_count * math.pi))
    wobble = _smooth_noise(rng, (H, W), base / 3.0)
    field = np.zeros((H, W))
    for _ in range(blob_count):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        r = base * rng.uniform(0.6, 1.4)
        aspect = rng.uniform(0.5, 2.0)
        ang = rng.uniform(0, math.pi)
        ca, sa = math.cos(ang), math.sin(ang)
        dx, dy = xx - cx, yy - cy
        ex = (dx * ca + dy * sa) / (r * math.sqrt(aspect))
        ey = (-dx * sa + dy * ca) * math.sqrt(aspect) / r
        q = np.sqrt(ex * ex + ey * ey)
        field = np.maximum(field, np.exp(-0.5 * q * q) * (1.0 + 0.25 * wobble))
    # stable sort: equal field values fall back to raster order
    order = np.argsort(-field.ravel(), kind="stable")
    grid = np.zeros(H * W, dtype=np.uint8)
    grid[order[:n_on]] = 1
    return SoilMask(grid.reshape(H, W))


def load_mask(path, shape=None) -> SoilMask:
    """Read a single-channel PNG/PGM; nonzero means occluded.

    With ``shape`` given, the mask is resized (nearest neighbour) to (H, W).
    """

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mask file {path} not found")
    with Image.open(path) as im:
        im = im.convert("L")
        if shape is not None and im.size != (shape[1], shape[0]):
            im = im.resize((shape[1], shape[0]), Image.NEAREST)
        arr = np.asarray(im)
    return SoilMask((arr > 0).astype(np.uint8))


def save_mask(mask: SoilMask, path) -> None:

    Image.fromarray(mask.grid * 255).save(path)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian truncated at radius ceil(3 sigma), normalized to sum 1."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur over the first two axes with zero padding."""
    k = gaussian_kernel(sigma)
    radius = len(k) // 2
    out = np.asarray(arr, dtype=np.float64)
    for axis in (0, 1):
        n = out.shape[axis]
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad)
        acc = np.zeros_like(out)
        for j, w in enumerate(k):
            acc += w * np.take(padded, np.arange(j, j + n), axis=axis)
        out = acc
    return out


def apply_camera_occlusion(image: FeatureImage, mask: SoilMask, sigma: float) -> FeatureImage:
    """Blur the masked region of every feature channel; depth is left untouched."""
    if mask.shape != image.shape:
        raise ValueError(f"mask shape {mask.shape} does not match image shape {image.shape}")
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    if not mask.grid.any():
        return image
    m = mask.grid.astype(np.float64)[..., None]
    occluded = gaussian_blur(image.grid * m, sigma)
    return image.replace_grid(image.grid * (1.0 - m) + occluded)


def retained_count(n: int, r: float) -> int:
    """round_half_up(n * (1 - r)), evaluated on the decimal value of ``r``."""
    exact = n * (1 - Fraction(repr(float(r))))
    return int(math.floor(exact + Fraction(1, 2)))


def lidar_dropout(cloud: PointCloud, spec: LidarDegradeSpec) -> PointCloud:
    """Keep a uniformly random subset of points, preserving their order.

    The subset is a prefix of one seeded permutation, so for a fixed seed a
    higher ratio always removes a superset of the points removed at a lower one.
    """
    n = len(cloud)
    k = retained_count(n, spec.r)
    if k == n:
        return cloud
    perm = np.random.default_rng(spec.seed).permutation(n)
    keep = np.sort(perm[:k])
    return cloud.take(keep)
