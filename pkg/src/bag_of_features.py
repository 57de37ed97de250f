"""Per-subject, multi-modal bags of features and their binary file format.

File layout (little-endian): magic "VFPR", u16 version, u16 descriptor_dim,
u32 record count, u16-prefixed UTF-8 subject_id, then per record a
u16-prefixed modality_id, position 3xf32, sigma f32, dog_value f32 and
descriptor_dim x f32.
"""

import logging
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import DescriptorConfig, ScaleSpaceConfig, VolumeConfig
from .descriptor import Descriptor, compute_descriptors
from .errors import (
    BadMagic,
    DuplicateModality,
    DuplicateRecord,
    MissingInput,
    SubjectMismatch,
    Truncated,
    VersionMismatch,
)
from .scale_space import Keypoint, Polarity, detect_keypoints
from .volume_io import Volume, normalize_intensity, resample_isotropic

logger = logging.getLogger("volprint")

FINGERPRINT_MAGIC = b"VFPR"
FINGERPRINT_VERSION = 1


@dataclass(frozen=True)
class ModalityReport:
    modality_id: str
    found: int
    rejected_contrast: int
    rejected_edge: int
    dropped_margin: int
    kept: int


def _record_key(d: Descriptor) -> tuple[str, tuple[float, float, float], float]:
    return d.modality_id, d.keypoint.position, d.keypoint.sigma


@dataclass(frozen=True, eq=False)
class Fingerprint:
    """Orderless bag of descriptors for one subject, canonically ordered."""

    subject_id: str
    records: tuple[Descriptor, ...]
    descriptor_dim: int = 96
    report: tuple[ModalityReport, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        for d in self.records:
            if d.subject_id != self.subject_id:
                raise SubjectMismatch(
                    f"Record of {d.subject_id!r} in fingerprint of {self.subject_id!r}"
                )
            if d.vector.shape != (self.descriptor_dim,):
                raise ValueError(
                    f"Descriptor length {d.vector.shape} != {self.descriptor_dim}"
                )
        ordered = tuple(sorted(self.records, key=_record_key))
        keys = [_record_key(d) for d in ordered]
        if len(set(keys)) != len(keys):
            raise DuplicateRecord(
                f"{self.subject_id}: duplicate (position, sigma, modality) records"
            )
        object.__setattr__(self, "records", ordered)

    @property
    def counts(self) -> dict[str, int]:
        return dict(sorted(Counter(d.modality_id for d in self.records).items()))

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(self.counts)

    def select(self, modalities: set[str]) -> list[Descriptor]:
        return [d for d in self.records if d.modality_id in modalities]

    def content_key(self) -> tuple:
        """Everything the file format persists, for structural comparison."""
        return (
            self.subject_id,
            self.descriptor_dim,
            tuple(
                (*_record_key(d), d.keypoint.dog_value, d.vector.tobytes())
                for d in self.records
            ),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Fingerprint):
            return NotImplemented
        return self.content_key() == other.content_key()

    def __hash__(self) -> int:
        return hash(self.content_key())


def build_fingerprint(
    subject_id: str,
    volumes: list[Volume],
    ss_cfg: ScaleSpaceConfig,
    d_cfg: DescriptorConfig,
    threads: int = 1,
) -> Fingerprint:
    """Concatenate per-modality descriptor sets of one subject."""
    seen: set[str] = set()
    for v in volumes:
        if v.modality_id in seen:
            raise DuplicateModality(f"{subject_id}: modality {v.modality_id} twice")
        seen.add(v.modality_id)
        if v.subject_id and v.subject_id != subject_id:
            raise SubjectMismatch(
                f"Volume of {v.subject_id!r} passed for subject {subject_id!r}"
            )

    records: list[Descriptor] = []
    reports: list[ModalityReport] = []
    for v in volumes:
        tagged = v if v.subject_id == subject_id else _with_subject(v, subject_id)
        keypoints, kp_report = detect_keypoints(tagged, ss_cfg, threads)
        descriptors, dropped = compute_descriptors(tagged, keypoints, d_cfg)
        records.extend(descriptors)
        reports.append(
            ModalityReport(
                modality_id=v.modality_id,
                found=kp_report.found,
                rejected_contrast=kp_report.rejected_contrast,
                rejected_edge=kp_report.rejected_edge,
                dropped_margin=dropped,
                kept=len(descriptors),
            )
        )
        logger.info(f"{subject_id}/{v.modality_id}: {len(descriptors)} descriptors")

    return Fingerprint(
        subject_id=subject_id,
        records=tuple(records),
        descriptor_dim=d_cfg.dimension,
        report=tuple(reports),
    )


def _with_subject(v: Volume, subject_id: str) -> Volume:
    return replace(v, subject_id=subject_id)


def condition_volume(v: Volume, volume_cfg: VolumeConfig) -> Volume:
    """Intensity normalization followed by optional isotropic resampling."""
    conditioned = normalize_intensity(v)
    if volume_cfg.target_spacing is not None:
        conditioned = resample_isotropic(
            conditioned, volume_cfg.target_spacing, volume_cfg.max_dim
        )
    return conditioned


def extract_subject(
    subject_id: str,
    volumes: list[Volume],
    volume_cfg: VolumeConfig,
    ss_cfg: ScaleSpaceConfig,
    d_cfg: DescriptorConfig,
    threads: int = 1,
) -> Fingerprint:
    """Normalize, resample and fingerprint the volumes of one subject."""
    prepared = [condition_volume(v, volume_cfg) for v in volumes]
    return build_fingerprint(subject_id, prepared, ss_cfg, d_cfg, threads)


def _pack_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def write_fingerprint(fp: Fingerprint, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [
        struct.pack(
            "<4sHHI",
            FINGERPRINT_MAGIC,
            FINGERPRINT_VERSION,
            fp.descriptor_dim,
            len(fp.records),
        ),
        _pack_str(fp.subject_id),
    ]
    for d in fp.records:
        kp = d.keypoint
        chunks.append(_pack_str(d.modality_id))
        chunks.append(struct.pack("<5f", *kp.position, kp.sigma, kp.dog_value))
        chunks.append(d.vector.astype("<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    logger.debug(f"Wrote {len(fp.records)} records to {path}")


class _Reader:
    def __init__(self, data: bytes, source: Path) -> None:
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(f"{self.source}: unexpected end of file at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (length,) = self.unpack("<H")
        return self.take(length).decode("utf-8")


def read_fingerprint(path: Path) -> Fingerprint:
    if not path.is_file():
        raise MissingInput(f"Fingerprint file not found: {path}")
    reader = _Reader(path.read_bytes(), path)
    magic = reader.take(4)
    if magic != FINGERPRINT_MAGIC:
        raise BadMagic(f"{path}: expected {FINGERPRINT_MAGIC!r}, got {magic!r}")
    version, dim, count = reader.unpack("<HHI")
    if version != FINGERPRINT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected 1")
    subject_id = reader.string()

    records: list[Descriptor] = []
    for _ in range(count):
        modality = reader.string()
        x, y, z, sigma, dog_value = reader.unpack("<5f")
        vector = np.frombuffer(reader.take(4 * dim), dtype="<f4").astype(np.float32)
        vector.setflags(write=False)
        # Octave and level are detection-time metadata and are not persisted.
        keypoint = Keypoint(
            position=(x, y, z),
            sigma=sigma,
            dog_value=dog_value,
            octave=-1,
            level=-1,
            polarity=Polarity.MAXIMUM if dog_value > 0 else Polarity.MINIMUM,
        )
        records.append(Descriptor(vector, keypoint, subject_id, modality))

    if reader.pos != len(reader.data):
        logger.warning(f"{path}: {len(reader.data) - reader.pos} trailing bytes")
    return Fingerprint(
        subject_id=subject_id, records=tuple(records), descriptor_dim=dim
    )
