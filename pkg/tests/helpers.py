"""Analytic blob volumes and synthetic fingerprints for tests."""

import numpy as np

from src.bag_of_features import Fingerprint
from src.descriptor import Descriptor
from src.scale_space import Keypoint, Polarity
from src.volume_io import Volume


def gaussian_blob(
    dims: tuple[int, int, int],
    center: tuple[float, float, float],
    sigma: float,
    amplitude: float = 1.0,
) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")
    r2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return amplitude * np.exp(-r2 / (2.0 * sigma**2))


def random_blob_volume(
    rng: np.random.Generator,
    dims: tuple[int, int, int] = (32, 32, 32),
    count: int = 12,
    sigma_range: tuple[float, float] = (2.0, 5.0),
) -> Volume:
    """Sum of bright and dark Gaussian blobs at random places and sizes."""
    data = np.zeros(dims, dtype=np.float64)
    for _ in range(count):
        x, y, z = rng.uniform(4.0, np.asarray(dims) - 4.0)
        sigma = float(rng.uniform(*sigma_range))
        amplitude = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0))
        data += gaussian_blob(dims, (float(x), float(y), float(z)), sigma, amplitude)
    return Volume(data=data.astype(np.float32), spacing=(1.0, 1.0, 1.0))


def blob_volume(
    dims: tuple[int, int, int] = (48, 48, 48),
    sigma: float = 3.0,
    center: tuple[float, float, float] | None = None,
    subject_id: str = "S1",
    modality_id: str = "T1",
) -> Volume:
    if center is None:
        center = (dims[0] // 2, dims[1] // 2, dims[2] // 2)
    return Volume(
        data=gaussian_blob(dims, center, sigma).astype(np.float32),
        spacing=(1.0, 1.0, 1.0),
        subject_id=subject_id,
        modality_id=modality_id,
    )


def make_descriptor(
    vector: np.ndarray,
    subject_id: str,
    modality_id: str = "T1",
    position: tuple[float, float, float] = (10.0, 10.0, 10.0),
    sigma: float = 2.0,
) -> Descriptor:
    v = np.asarray(vector, dtype=np.float32)
    v.setflags(write=False)
    kp = Keypoint(
        position=position,
        sigma=sigma,
        dog_value=0.5,
        octave=0,
        level=1,
        polarity=Polarity.MAXIMUM,
    )
    return Descriptor(v, kp, subject_id, modality_id)


def make_fingerprint(
    subject_id: str,
    vectors: np.ndarray,
    modality_id: str = "T1",
    start: int = 0,
) -> Fingerprint:
    """Record i sits at x = start + i so records never collide."""
    records = [
        make_descriptor(
            v, subject_id, modality_id, position=(float(start + i), 5.0, 5.0)
        )
        for i, v in enumerate(vectors)
    ]
    return Fingerprint(
        subject_id=subject_id, records=tuple(records), descriptor_dim=vectors.shape[1]
    )
