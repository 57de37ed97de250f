"""3D histogram-of-oriented-gradients descriptors at keypoint scale."""

import logging
import math
from dataclasses import dataclass
from functools import cache

import numpy as np
from scipy import ndimage

from .config import DescriptorConfig
from .scale_space import Keypoint
from .volume_io import Volume

logger = logging.getLogger("volprint")

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0


@dataclass(frozen=True, eq=False)
class Descriptor:
    vector: np.ndarray  # float32, unit norm or all zero
    keypoint: Keypoint
    subject_id: str
    modality_id: str


@cache
def orientation_directions(n: int) -> np.ndarray:
    """Unit bin directions: icosahedron vertices for 12, else a Fibonacci sphere."""
    if n == 12:
        phi = GOLDEN_RATIO
        vertices = []
        for a in (-1.0, 1.0):
            for b in (-phi, phi):
                vertices += [(0.0, a, b), (a, b, 0.0), (b, 0.0, a)]
        dirs = np.array(vertices, dtype=np.float64)
    else:
        i = np.arange(n, dtype=np.float64) + 0.5
        z = 1.0 - 2.0 * i / n
        r = np.sqrt(1.0 - z**2)
        theta = 2.0 * np.pi * i / GOLDEN_RATIO
        dirs = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs.setflags(write=False)
    return dirs


def gradient_field(v: Volume) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Central-difference gradient of the volume along x, y, z."""
    gx, gy, gz = np.gradient(v.data.astype(np.float64))
    return gx, gy, gz


def sample_offsets(kp_sigma: float, cfg: DescriptorConfig) -> np.ndarray:
    """Symmetric 1D sample offsets at half-sigma steps across the window."""
    half_width = cfg.window_radius_sigmas * kp_sigma
    step = kp_sigma / 2.0
    n_half = max(1, math.ceil(half_width / step))
    return (np.arange(2 * n_half, dtype=np.float64) - n_half + 0.5) * step


def within_margin(v: Volume, kp: Keypoint, cfg: DescriptorConfig) -> bool:
    half_width = cfg.window_radius_sigmas * kp.sigma
    return all(
        p - half_width >= 0 and p + half_width <= n - 1
        for p, n in zip(kp.position, v.dims)
    )


def compute_descriptor(
    v: Volume,
    kp: Keypoint,
    cfg: DescriptorConfig,
    gradients: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> Descriptor | None:
    """HOG descriptor around kp; None when the window leaves the volume."""
    if not within_margin(v, kp, cfg):
        return None
    if gradients is None:
        gradients = gradient_field(v)

    half_width = cfg.window_radius_sigmas * kp.sigma
    offsets = sample_offsets(kp.sigma, cfg)
    ox, oy, oz = np.meshgrid(offsets, offsets, offsets, indexing="ij")
    ox, oy, oz = ox.ravel(), oy.ravel(), oz.ravel()
    coords = np.stack(
        [ox + kp.position[0], oy + kp.position[1], oz + kp.position[2]]
    )

    grad = np.stack(
        [
            ndimage.map_coordinates(g, coords, order=1, mode="nearest")
            for g in gradients
        ],
        axis=1,
    )
    magnitude = np.linalg.norm(grad, axis=1)
    moving = magnitude > 0

    dim = cfg.subregions**3 * cfg.orientation_bins
    if not np.any(moving):
        return _descriptor(np.zeros(dim, dtype=np.float32), v, kp)

    directions = orientation_directions(cfg.orientation_bins)
    unit = grad[moving] / magnitude[moving, None]
    dots = unit @ directions.T
    nearest = np.argsort(-dots, axis=1, kind="stable")[:, :2]
    near_dots = np.clip(np.take_along_axis(dots, nearest, axis=1), 0.0, None)
    totals = near_dots.sum(axis=1)
    share = np.zeros_like(near_dots)
    share[:, 0] = 1.0
    positive = totals > 0
    share[positive] = near_dots[positive] / totals[positive, None]

    window_sigma = 0.5 * half_width
    spatial = np.exp(-(ox**2 + oy**2 + oz**2) / (2.0 * window_sigma**2))
    weight = (magnitude * spatial)[moving]

    cell = 2.0 * half_width / cfg.subregions
    cells = [
        np.clip(np.floor((o[moving] + half_width) / cell), 0, cfg.subregions - 1)
        for o in (ox, oy, oz)
    ]
    region = (
        cells[0] * cfg.subregions**2 + cells[1] * cfg.subregions + cells[2]
    ).astype(np.intp)

    hist = np.zeros((cfg.subregions**3, cfg.orientation_bins), dtype=np.float64)
    for j in range(2):
        np.add.at(hist, (region, nearest[:, j]), weight * share[:, j])

    vector = hist.ravel()
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        return _descriptor(np.zeros(dim, dtype=np.float32), v, kp)
    vector = np.minimum(vector, cfg.clamp * norm)
    vector /= np.linalg.norm(vector)
    return _descriptor(vector.astype(np.float32), v, kp)


def _descriptor(vector: np.ndarray, v: Volume, kp: Keypoint) -> Descriptor:
    vector.setflags(write=False)
    return Descriptor(
        vector=vector, keypoint=kp, subject_id=v.subject_id, modality_id=v.modality_id
    )


def compute_descriptors(
    v: Volume, kps: list[Keypoint], cfg: DescriptorConfig
) -> tuple[list[Descriptor], int]:
    """Descriptors for all keypoints; returns (descriptors, dropped_at_margin)."""
    gradients = gradient_field(v)
    descriptors: list[Descriptor] = []
    dropped = 0
    for kp in kps:
        d = compute_descriptor(v, kp, cfg, gradients)
        if d is None:
            dropped += 1
        else:
            descriptors.append(d)
    if dropped:
        logger.debug(
            f"{v.subject_id}/{v.modality_id}: dropped {dropped} keypoints at margin"
        )
    return descriptors, dropped
