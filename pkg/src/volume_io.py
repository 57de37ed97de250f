"""Loading, validation, normalization and resampling of 3D scalar volumes.

Two on-disk formats are supported: a NIfTI-1 subset (single-file "n+1" or
detached "ni1" header/image pairs, little-endian, uint8/int16/float32) and a
raw little-endian float32 payload with a JSON sidecar.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import nibabel as nib
import numpy as np
from nibabel.spatialimages import HeaderDataError
from scipy import ndimage

from .config import normalize_modality
from .errors import (
    CorruptHeader,
    MissingInput,
    SpacingOverflow,
    TruncatedData,
    UnsupportedFormat,
)

logger = logging.getLogger("volprint")

NIFTI_HEADER_SIZE = 348
NIFTI_DTYPES: dict[int, str] = {2: "<u1", 4: "<i2", 16: "<f4"}
RAW_SUFFIX = ".f32"
SIDECAR_SUFFIX = ".json"


@dataclass(frozen=True)
class LoadReport:
    source_format: str
    source_dtype: str
    non_finite_replaced: int = 0


@dataclass(frozen=True)
class Volume:
    """Immutable 3D scalar grid indexed [x, y, z]."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    subject_id: str = ""
    modality_id: str = ""
    load_report: LoadReport | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise CorruptHeader(f"Volume must be 3D, got shape {self.data.shape}")
        if any(d < 1 for d in self.data.shape):
            raise CorruptHeader(f"Non-positive dims {self.data.shape}")
        if any(not (s > 0 and math.isfinite(s)) for s in self.spacing):
            raise CorruptHeader(f"Non-positive spacing {self.spacing}")
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.modality_id:
            object.__setattr__(
                self, "modality_id", normalize_modality(self.modality_id)
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        x, y, z = self.data.shape
        return int(x), int(y), int(z)


def _sanitize(data: np.ndarray) -> tuple[np.ndarray, int]:
    finite = np.isfinite(data)
    bad = int(data.size - np.count_nonzero(finite))
    if bad:
        data = np.where(finite, data, 0.0)
    return data.astype(np.float32), bad


def _check_geometry(dims: tuple[int, ...], spacing: tuple[float, ...]) -> None:
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise CorruptHeader(f"Invalid dims {dims}")
    if len(spacing) != 3 or any(not (s > 0 and math.isfinite(s)) for s in spacing):
        raise CorruptHeader(f"Invalid spacing {spacing}")


def _read_payload(path: Path, offset: int, nbytes: int) -> bytes:
    with path.open("rb") as f:
        f.seek(offset)
        payload = f.read(nbytes)
    if len(payload) < nbytes:
        raise TruncatedData(
            f"{path}: payload has {len(payload)} bytes, header promises {nbytes}"
        )
    return payload


def _load_nifti(path: Path) -> tuple[np.ndarray, tuple[float, float, float], str]:
    with path.open("rb") as f:
        raw = f.read(NIFTI_HEADER_SIZE)
    if len(raw) < NIFTI_HEADER_SIZE:
        raise TruncatedData(f"{path}: header shorter than {NIFTI_HEADER_SIZE} bytes")

    try:
        hdr = nib.Nifti1Header(raw, check=False)
    except Exception as e:
        raise UnsupportedFormat(f"{path}: unreadable NIfTI-1 header: {e}") from e

    if int(hdr["sizeof_hdr"]) != NIFTI_HEADER_SIZE:
        raise UnsupportedFormat(f"{path}: sizeof_hdr is not {NIFTI_HEADER_SIZE}")
    if hdr.endianness != "<":
        raise UnsupportedFormat(f"{path}: only little-endian NIfTI-1 is supported")
    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    if magic not in (b"n+1", b"ni1"):
        raise UnsupportedFormat(f"{path}: bad magic {magic!r}")
    datatype = int(hdr["datatype"])
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedFormat(f"{path}: unsupported datatype code {datatype}")

    dim = [int(d) for d in hdr["dim"]]
    ndim = dim[0]
    if not 3 <= ndim <= 7:
        raise CorruptHeader(f"{path}: dim[0]={ndim}, expected a 3D volume")
    dims = (dim[1], dim[2], dim[3])
    pixdim = hdr["pixdim"]
    spacing = (float(pixdim[1]), float(pixdim[2]), float(pixdim[3]))
    _check_geometry(dims, spacing)
    if any(d != 1 for d in dim[4 : ndim + 1]):
        raise UnsupportedFormat(f"{path}: only single 3D volumes are supported")

    try:
        slope, inter = hdr.get_slope_inter()
    except HeaderDataError as e:
        raise CorruptHeader(f"{path}: {e}") from e

    if magic == b"n+1":
        data_path = path
    else:
        data_path = path.with_suffix(".img")
        if not data_path.is_file():
            raise MissingInput(f"{path}: detached image file {data_path} not found")

    dtype = np.dtype(NIFTI_DTYPES[datatype])
    count = dims[0] * dims[1] * dims[2]
    offset = int(float(hdr["vox_offset"]))
    payload = _read_payload(data_path, offset, count * dtype.itemsize)
    data = np.frombuffer(payload, dtype=dtype, count=count).reshape(dims, order="F")

    values = data.astype(np.float64)
    if slope is not None:
        values = values * slope + inter
    logger.debug(
        f"NIfTI {path.name}: dims={dims} spacing={spacing} dtype={dtype} "
        f"slope={slope} inter={inter}"
    )
    return values, spacing, dtype.name


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(SIDECAR_SUFFIX)


def _load_raw(path: Path) -> tuple[np.ndarray, tuple[float, float, float], dict]:
    payload_path = path.with_suffix(RAW_SUFFIX)
    sidecar = _sidecar_path(path)
    for required in (payload_path, sidecar):
        if not required.is_file():
            raise MissingInput(f"Raw volume component not found: {required}")

    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        dims = tuple(int(d) for d in meta["dims"])
        spacing = tuple(float(s) for s in meta["spacing"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CorruptHeader(f"{sidecar}: malformed sidecar: {e}") from e
    _check_geometry(dims, spacing)

    count = dims[0] * dims[1] * dims[2]
    payload = _read_payload(payload_path, 0, count * 4)
    extra = payload_path.stat().st_size - count * 4
    if extra:
        logger.warning(f"{payload_path}: ignoring {extra} trailing bytes")
    data = np.frombuffer(payload, dtype="<f4", count=count).reshape(dims, order="F")
    return data, (spacing[0], spacing[1], spacing[2]), meta


def load_volume(
    path: Path, expected_modality: str | None = None, subject_id: str | None = None
) -> Volume:
    """Load a volume, promoting to float32 and zeroing non-finite voxels."""
    if not path.exists():
        raise MissingInput(f"Volume file not found: {path}")

    suffixes = "".join(path.suffixes).lower()
    meta: dict = {}
    if suffixes.endswith((".nii", ".hdr")):
        values, spacing, dtype_name = _load_nifti(path)
        source = "nifti1"
    elif suffixes.endswith((RAW_SUFFIX, SIDECAR_SUFFIX)):
        values, spacing, meta = _load_raw(path)
        dtype_name = "float32"
        source = "raw"
    else:
        raise UnsupportedFormat(f"Unrecognized volume format: {path}")

    data, bad = _sanitize(values)
    if bad:
        logger.warning(f"{path.name}: replaced {bad} non-finite voxels with 0")

    stored_modality = str(meta.get("modality_id", "")) or None
    modality = expected_modality or stored_modality or ""
    if (
        expected_modality
        and stored_modality
        and normalize_modality(expected_modality) != normalize_modality(stored_modality)
    ):
        logger.warning(
            f"{path.name}: sidecar modality {stored_modality} overridden by "
            f"{expected_modality}"
        )
    subject = subject_id or str(meta.get("subject_id", "")) or path.name.split(".")[0]
    origin = tuple(float(o) for o in meta.get("origin", (0.0, 0.0, 0.0)))

    return Volume(
        data=data,
        spacing=spacing,
        origin=(origin[0], origin[1], origin[2]),
        subject_id=subject,
        modality_id=modality,
        load_report=LoadReport(source, dtype_name, bad),
    )


def write_raw_volume(v: Volume, path: Path) -> Path:
    """Write `<name>.f32` (x-fastest) plus `<name>.json`; returns payload path."""
    payload_path = path.with_suffix(RAW_SUFFIX)
    payload_path.parent.mkdir(parents=True, exist_ok=True)
    payload_path.write_bytes(v.data.astype("<f4").tobytes(order="F"))
    meta = {
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "origin": list(v.origin),
        "subject_id": v.subject_id,
        "modality_id": v.modality_id,
    }
    _sidecar_path(path).write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return payload_path


def normalize_intensity(v: Volume) -> Volume:
    """Map the 1st/99th percentiles to 0/1 and clamp; constants map to 0."""
    values = v.data.astype(np.float64)
    # Order-statistic percentiles keep the mapping idempotent.
    low = float(np.percentile(values, 1, method="lower"))
    high = float(np.percentile(values, 99, method="higher"))
    if high <= low:
        return replace(v, data=np.zeros_like(v.data))
    scaled = np.clip((values - low) / (high - low), 0.0, 1.0)
    return replace(v, data=scaled.astype(np.float32))


def resample_isotropic(v: Volume, target_spacing: float, max_dim: int = 1024) -> Volume:
    """Trilinear resampling onto an isotropic grid of the given spacing."""
    if not target_spacing > 0:
        raise ValueError(f"target_spacing must be positive, got {target_spacing}")
    if all(s == target_spacing for s in v.spacing):
        return v

    out_dims = tuple(
        max(1, round(d * s / target_spacing)) for d, s in zip(v.dims, v.spacing)
    )
    if any(d > max_dim for d in out_dims):
        raise SpacingOverflow(
            f"Resampling {v.dims} at {v.spacing} mm to {target_spacing} mm gives "
            f"{out_dims}, above the {max_dim} voxel cap"
        )

    # output voxel i samples input index i * target / spacing along each axis
    scale = np.array([target_spacing / s for s in v.spacing], dtype=np.float64)
    values = ndimage.affine_transform(
        v.data.astype(np.float64),
        scale,
        output_shape=out_dims,
        order=1,
        mode="nearest",
    )

    logger.debug(f"Resampled {v.dims} -> {out_dims} at {target_spacing} mm")
    return replace(
        v,
        data=values.astype(np.float32),
        spacing=(target_spacing, target_spacing, target_spacing),
    )
