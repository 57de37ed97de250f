"""Slice overlays of matched keypoints as binary PPM images.

A keypoint is drawn as the circle where its sphere of radius
`factor * sigma` cuts the slice plane. Image rows follow the first
remaining volume axis, columns the second.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import normalize_modality
from .errors import InvalidConfig, SliceOutOfRange
from .similarity_graph import CohortGraph, matched_nodes
from .volume_io import Volume

logger = logging.getLogger("volprint")

SPHERE_RADIUS_SIGMAS = 3.0
RING_COLOR = (255, 0, 0)


@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]  # (row, col) in slice pixels
    radius: float


def _plane_axes(axis: int) -> tuple[int, int]:
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    row_axis, col_axis = (a for a in range(3) if a != axis)
    return row_axis, col_axis


def slice_circle(
    position: tuple[float, float, float],
    sigma: float,
    axis: int,
    slice_index: int,
    factor: float = SPHERE_RADIUS_SIGMAS,
) -> Circle | None:
    """Sphere/plane intersection; None when the sphere misses the slice."""
    row_axis, col_axis = _plane_axes(axis)
    r = factor * sigma
    d = abs(position[axis] - slice_index)
    if d > r:
        return None
    return Circle(
        center=(position[row_axis], position[col_axis]),
        radius=math.sqrt(r * r - d * d),
    )


def grayscale_slice(v: Volume, axis: int, slice_index: int) -> np.ndarray:
    """RGB uint8 rendering of one slice, scaled by the volume's range."""
    _plane_axes(axis)
    if not 0 <= slice_index < v.dims[axis]:
        raise SliceOutOfRange(
            f"Slice {slice_index} outside [0, {v.dims[axis]}) on axis {axis}"
        )
    plane = np.take(v.data, slice_index, axis=axis).astype(np.float64)
    low, high = float(v.data.min()), float(v.data.max())
    if high > low:
        gray = np.rint((plane - low) / (high - low) * 255.0)
    else:
        gray = np.zeros_like(plane)
    gray8 = gray.astype(np.uint8)
    return np.repeat(gray8[:, :, None], 3, axis=2)


def draw_circle(image: np.ndarray, circle: Circle) -> int:
    """Color pixels within half a pixel of the circle; returns pixels drawn."""
    rows, cols = np.indices(image.shape[:2], dtype=np.float64)
    dist = np.hypot(rows - circle.center[0], cols - circle.center[1])
    ring = np.abs(dist - circle.radius) <= 0.5
    image[ring] = RING_COLOR
    return int(np.count_nonzero(ring))


def render_overlay(
    v: Volume,
    keypoints: list[tuple[tuple[float, float, float], float]],
    axis: int,
    slice_index: int,
    factor: float = SPHERE_RADIUS_SIGMAS,
) -> np.ndarray:
    image = grayscale_slice(v, axis, slice_index)
    drawn = 0
    for position, sigma in keypoints:
        circle = slice_circle(position, sigma, axis, slice_index, factor)
        if circle is not None:
            draw_circle(image, circle)
            drawn += 1
    logger.debug(f"{v.subject_id}: {drawn}/{len(keypoints)} keypoints cut the slice")
    return image


def write_ppm(image: np.ndarray, path: Path) -> None:
    height, width = image.shape[:2]
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    path.write_bytes(header + np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    magic, dims, maxval, pixels = data.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    width, height = (int(x) for x in dims.split())
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)


def visualize_pair(
    g: CohortGraph,
    a: str,
    b: str,
    volumes: dict[str, Volume],
    axis: int,
    slice_index: int,
    out_dir: Path,
    modality: str | None = None,
) -> list[Path]:
    """One overlay per subject of the pair showing its matched keypoints."""
    nodes_a, nodes_b = matched_nodes(g, a, b)
    if modality is not None:
        name = normalize_modality(modality)
        if name not in g.modalities:
            raise InvalidConfig(f"Modality {name} is not in the graph {g.modalities}")
        m = g.modalities.index(name)
        nodes_a = nodes_a[g.node_modality[nodes_a] == m]
        nodes_b = nodes_b[g.node_modality[nodes_b] == m]
    if nodes_a.size == 0:
        logger.warning(f"No matches between {a} and {b}, overlays show bare slices")

    written = []
    for subject, nodes in ((a, nodes_a), (b, nodes_b)):
        keypoints = [
            ((float(p[0]), float(p[1]), float(p[2])), float(s))
            for p, s in zip(g.positions[nodes], g.sigmas[nodes])
        ]
        image = render_overlay(volumes[subject], keypoints, axis, slice_index)
        path = out_dir / f"{a}_{b}_{subject}_axis{axis}_{slice_index}.ppm"
        write_ppm(image, path)
        written.append(path)
    logger.info(f"Overlays for {a}/{b}: {[p.name for p in written]}")
    return written
