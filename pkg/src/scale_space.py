"""Gaussian / difference-of-Gaussians scale space and 3D keypoint detection."""

import logging
import math
from collections import Counter
from dataclasses import dataclass
from enum import StrEnum
from functools import partial

import numpy as np
from scipy import ndimage

from .config import ScaleSpaceConfig
from .errors import VolumeTooSmall
from .parallel import parallel_map
from .volume_io import Volume

logger = logging.getLogger("volprint")

MIN_BASE_DIM = 8
MIN_OCTAVE_DIM = 4


class Polarity(StrEnum):
    MAXIMUM = "maximum"
    MINIMUM = "minimum"


@dataclass(frozen=True)
class Keypoint:
    """Scale-space extremum. position is in base-grid voxel coordinates."""

    position: tuple[float, float, float]
    sigma: float
    dog_value: float
    octave: int
    level: int
    polarity: Polarity

    @property
    def local_index(self) -> tuple[int, int, int]:
        """Voxel index inside the keypoint's own octave."""
        step = 2**self.octave
        x, y, z = self.position
        return round(x / step), round(y / step), round(z / step)


@dataclass(frozen=True)
class DogOctave:
    octave: int
    levels: np.ndarray  # (n_levels, x, y, z)
    sigmas: tuple[float, ...]  # per DoG level, in base-grid voxels


@dataclass(frozen=True)
class DogStack:
    base_dims: tuple[int, int, int]
    octaves: tuple[DogOctave, ...]


@dataclass(frozen=True)
class KeypointReport:
    found: int
    rejected_contrast: int
    rejected_edge: int

    @property
    def kept(self) -> int:
        return self.found - self.rejected_contrast - self.rejected_edge


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized sampled 1D Gaussian with radius ceil(3 sigma)."""
    radius = max(1, math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x**2) / (2.0 * sigma**2))
    normalized: np.ndarray = kernel / kernel.sum()
    return normalized


def gaussian_smooth(values: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing with edge-clamp boundaries."""
    if sigma <= 0:
        return values.astype(np.float64, copy=True)
    kernel = gaussian_kernel(sigma)
    out = values.astype(np.float64)
    for axis in range(out.ndim):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="nearest")
    return out


def build_dog_stack(v: Volume, cfg: ScaleSpaceConfig, threads: int = 1) -> DogStack:
    """Build per-octave DoG levels; octave o+1 starts from octave o at 2x sigma."""
    if min(v.dims) < MIN_BASE_DIM:
        raise VolumeTooSmall(
            f"Volume {v.dims} has a dimension below {MIN_BASE_DIM} voxels"
        )

    per_octave = cfg.scales_per_octave
    local_sigmas = [
        cfg.base_sigma * 2.0 ** (s / per_octave) for s in range(per_octave + 3)
    ]

    octaves: list[DogOctave] = []
    seed = v.data.astype(np.float64)
    seed_blur = 0.0
    for o in range(cfg.octaves):
        if min(seed.shape) < MIN_OCTAVE_DIM:
            logger.debug(f"Stopping at octave {o}: dims {seed.shape} too small")
            break

        extras = [
            math.sqrt(max(sigma**2 - seed_blur**2, 0.0)) for sigma in local_sigmas
        ]
        gaussians = parallel_map(partial(gaussian_smooth, seed), extras, threads)
        levels = np.stack(
            [gaussians[s + 1] - gaussians[s] for s in range(per_octave + 2)]
        ).astype(np.float32)
        # float32-representable so persisted keypoints compare exactly
        sigmas = tuple(
            float(np.float32(cfg.base_sigma * 2.0 ** (o + s / per_octave)))
            for s in range(per_octave + 2)
        )
        octaves.append(DogOctave(octave=o, levels=levels, sigmas=sigmas))
        logger.debug(f"Octave {o}: dims {seed.shape}, {len(sigmas)} DoG levels")

        seed = gaussians[per_octave][::2, ::2, ::2]
        seed_blur = cfg.base_sigma

    return DogStack(base_dims=v.dims, octaves=tuple(octaves))


_NEIGHBORHOOD = np.ones((3, 3, 3, 3), dtype=bool)
_NEIGHBORHOOD[1, 1, 1, 1] = False


def _octave_extrema(octave: DogOctave) -> list[Keypoint]:
    levels = octave.levels
    if levels.shape[0] < 3 or min(levels.shape[1:]) < 3:
        return []

    neighbor_max = ndimage.maximum_filter(
        levels, footprint=_NEIGHBORHOOD, mode="nearest"
    )
    neighbor_min = ndimage.minimum_filter(
        levels, footprint=_NEIGHBORHOOD, mode="nearest"
    )
    interior = (slice(1, -1),) * 4
    core = levels[interior]
    is_max = core > neighbor_max[interior]
    is_min = core < neighbor_min[interior]

    found = np.argwhere(is_max | is_min) + 1
    # Position-major order so results never depend on the scan layout.
    order = np.lexsort((found[:, 0], found[:, 3], found[:, 2], found[:, 1]))
    step = float(2**octave.octave)

    keypoints: list[Keypoint] = []
    for s, x, y, z in found[order].tolist():
        value = float(levels[s, x, y, z])
        keypoints.append(
            Keypoint(
                position=(float(x) * step, float(y) * step, float(z) * step),
                sigma=octave.sigmas[s],
                dog_value=value,
                octave=octave.octave,
                level=int(s),
                polarity=Polarity.MAXIMUM
                if is_max[s - 1, x - 1, y - 1, z - 1]
                else Polarity.MINIMUM,
            )
        )
    return keypoints


def detect_extrema(
    stack: DogStack, cfg: ScaleSpaceConfig, threads: int = 1
) -> list[Keypoint]:
    """Strict 80-neighbor extrema over space and scale, sorted by octave."""
    del cfg  # detection itself is parameter-free
    per_octave = parallel_map(_octave_extrema, stack.octaves, threads)
    return [kp for octave_kps in per_octave for kp in octave_kps]


def dog_hessian(level: np.ndarray, x: int, y: int, z: int) -> np.ndarray:
    """3x3 spatial Hessian of a DoG level by central differences."""
    c = level[x - 1 : x + 2, y - 1 : y + 2, z - 1 : z + 2].astype(np.float64)
    center = c[1, 1, 1]
    dxx = c[2, 1, 1] - 2 * center + c[0, 1, 1]
    dyy = c[1, 2, 1] - 2 * center + c[1, 0, 1]
    dzz = c[1, 1, 2] - 2 * center + c[1, 1, 0]
    dxy = (c[2, 2, 1] - c[2, 0, 1] - c[0, 2, 1] + c[0, 0, 1]) / 4
    dxz = (c[2, 1, 2] - c[2, 1, 0] - c[0, 1, 2] + c[0, 1, 0]) / 4
    dyz = (c[1, 2, 2] - c[1, 2, 0] - c[1, 0, 2] + c[1, 0, 0]) / 4
    return np.array([[dxx, dxy, dxz], [dxy, dyy, dyz], [dxz, dyz, dzz]])


def passes_edge_test(hessian: np.ndarray, ratio_threshold: float) -> bool:
    """Curvature-ratio test on Hessian eigenvalues sorted by magnitude."""
    eig = np.linalg.eigvalsh(hessian)
    eig = eig[np.argsort(-np.abs(eig), kind="stable")]
    largest, smallest = eig[0], eig[2]
    if smallest == 0 or np.sign(smallest) != np.sign(largest):
        return False
    return bool(abs(largest) / abs(smallest) <= ratio_threshold)


def _rejection_reason(
    kp: Keypoint, stack: DogStack, cfg: ScaleSpaceConfig
) -> str | None:
    if abs(kp.dog_value) < cfg.contrast_threshold:
        return "contrast"
    level = stack.octaves[kp.octave].levels[kp.level]
    x, y, z = kp.local_index
    if not all(1 <= i < n - 1 for i, n in zip((x, y, z), level.shape)):
        return "edge"
    if not passes_edge_test(dog_hessian(level, x, y, z), cfg.edge_ratio_threshold):
        return "edge"
    return None


def reject_keypoints(
    kps: list[Keypoint], stack: DogStack, cfg: ScaleSpaceConfig
) -> list[Keypoint]:
    """Drop low-contrast and edge-like keypoints."""
    return [kp for kp in kps if _rejection_reason(kp, stack, cfg) is None]


def detect_keypoints(
    v: Volume, cfg: ScaleSpaceConfig, threads: int = 1
) -> tuple[list[Keypoint], KeypointReport]:
    """Full detection stage for one normalized volume."""
    stack = build_dog_stack(v, cfg, threads)
    candidates = detect_extrema(stack, cfg, threads)
    reasons = [_rejection_reason(kp, stack, cfg) for kp in candidates]
    kept = [kp for kp, reason in zip(candidates, reasons) if reason is None]
    counts = Counter(reasons)
    report = KeypointReport(
        found=len(candidates),
        rejected_contrast=counts["contrast"],
        rejected_edge=counts["edge"],
    )
    logger.debug(
        f"{v.subject_id}/{v.modality_id}: {report.found} extrema, "
        f"{report.rejected_contrast} low contrast, {report.rejected_edge} edge-like"
    )
    return kept, report
