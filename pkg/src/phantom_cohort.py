"""Synthetic Gaussian-blob cohorts with controlled relatedness.

Each family draws a base blob set; members keep a fraction of it (with
jitter) and draw the rest on their own. A cohort-wide population set
supplies the fraction that even unrelated subjects share. Random streams
are keyed by (seed, stream, family, member) so a subject never depends on
generation order or thread count.
"""

import logging
from dataclasses import dataclass
from enum import StrEnum
from functools import partial
from pathlib import Path

import numpy as np

from .config import ModalityTransform, PhantomSpec, Zygosity
from .evaluation import CohortManifest, SubjectRecord, write_manifest
from .parallel import parallel_map
from .volume_io import Volume, write_raw_volume

logger = logging.getLogger("volprint")

POPULATION_STREAM = 0
FAMILY_STREAM = 1
MEMBER_STREAM = 2
MAX_SIBLING_AGE_GAP = 6


class Relation(StrEnum):
    CLONE = "clone"
    DZ = "dz"
    NT = "nt"
    SINGLETON = "singleton"


@dataclass(frozen=True)
class Blob:
    key: str  # provenance, e.g. "f3:7" for blob 7 of family 3
    center: tuple[float, float, float]  # voxels
    sigma: float  # voxels
    amplitude: float


@dataclass(frozen=True)
class PhantomSubject:
    subject_id: str
    family: int
    relation: Relation
    record: SubjectRecord
    blobs: tuple[Blob, ...]
    volumes: tuple[Volume, ...]

    @property
    def blob_keys(self) -> frozenset[str]:
        return frozenset(b.key for b in self.blobs)


@dataclass(frozen=True)
class PhantomCohort:
    spec: PhantomSpec
    subjects: tuple[PhantomSubject, ...]

    @property
    def manifest(self) -> CohortManifest:
        return CohortManifest(subjects=tuple(s.record for s in self.subjects))

    def subject(self, subject_id: str) -> PhantomSubject:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)


@dataclass(frozen=True)
class _Slot:
    index: int
    family: int
    member: int
    relation: Relation


def _family_layout(spec: PhantomSpec) -> list[_Slot]:
    slots: list[_Slot] = []
    family = 0
    for relation, count, size in (
        (Relation.CLONE, spec.clone_pairs, 2),
        (Relation.DZ, spec.dz_pairs, 2),
        (Relation.NT, spec.nt_pairs, 2),
        (Relation.SINGLETON, spec.singletons, 1),
    ):
        for _ in range(count):
            for member in range(size):
                slots.append(_Slot(len(slots), family, member, relation))
            family += 1
    return slots


def _draw_blobs(
    rng: np.random.Generator, spec: PhantomSpec, count: int, prefix: str
) -> list[Blob]:
    sigma_lo, sigma_hi = spec.sigma_range
    amp_lo, amp_hi = spec.amplitude_range
    margins = [min(3.0 * sigma_hi, (d - 1) / 4.0) for d in spec.dims]
    blobs = []
    for i in range(count):
        center = [float(rng.uniform(m, d - 1 - m)) for d, m in zip(spec.dims, margins)]
        blobs.append(
            Blob(
                key=f"{prefix}:{i}",
                center=(center[0], center[1], center[2]),
                sigma=float(rng.uniform(sigma_lo, sigma_hi)),
                amplitude=float(rng.uniform(amp_lo, amp_hi)),
            )
        )
    return blobs


def _jitter(rng: np.random.Generator, blob: Blob, spec: PhantomSpec) -> Blob:
    shift = rng.normal(0.0, 1.0, size=3) * (spec.position_jitter_mm / spec.spacing)
    scale = 1.0 + spec.size_jitter * float(rng.normal())
    center = np.clip(
        np.asarray(blob.center) + shift, 0.0, np.asarray(spec.dims, dtype=float) - 1
    )
    return Blob(
        key=blob.key,
        center=(float(center[0]), float(center[1]), float(center[2])),
        sigma=max(blob.sigma * scale, 0.5),
        amplitude=blob.amplitude,
    )


def shared_fraction(spec: PhantomSpec, relation: Relation) -> float:
    return {
        Relation.CLONE: spec.clone_shared_fraction,
        Relation.DZ: spec.sib_shared_fraction,
        Relation.NT: spec.sib_shared_fraction,
        Relation.SINGLETON: 0.0,
    }[relation]


def render_blobs(dims: tuple[int, int, int], blobs: list[Blob]) -> np.ndarray:
    """Sum of separable isotropic Gaussians sampled on the voxel grid."""
    grids = [np.arange(d, dtype=np.float64) for d in dims]
    volume = np.zeros(dims, dtype=np.float64)
    for b in blobs:
        gx, gy, gz = (
            np.exp(-((g - c) ** 2) / (2.0 * b.sigma**2))
            for g, c in zip(grids, b.center)
        )
        volume += b.amplitude * np.multiply.outer(np.multiply.outer(gx, gy), gz)
    return volume


def _modality_blobs(
    blobs: list[Blob], transform: ModalityTransform, index: int, n_modalities: int
) -> list[Blob]:
    if transform.subset == "all":
        return blobs
    return [b for i, b in enumerate(blobs) if i % n_modalities == index]


def _member_age(
    family_rng: np.random.Generator, spec: PhantomSpec, relation: Relation
) -> tuple[int, int]:
    lo, hi = spec.age_range
    first = int(family_rng.integers(lo, hi + 1))
    if relation in (Relation.CLONE, Relation.DZ):
        return first, first
    gap = int(family_rng.integers(1, MAX_SIBLING_AGE_GAP + 1))
    return first, first + gap


def _build_subject(
    slot: _Slot, spec: PhantomSpec, population: tuple[Blob, ...]
) -> PhantomSubject:
    family_rng = np.random.default_rng([spec.seed, FAMILY_STREAM, slot.family])
    member_rng = np.random.default_rng(
        [spec.seed, MEMBER_STREAM, slot.family, slot.member]
    )
    count = spec.blob_count

    n_population = round(spec.unrelated_shared_fraction * count)
    family_base = _draw_blobs(family_rng, spec, count, f"f{slot.family}")
    ages = _member_age(family_rng, spec, slot.relation)
    sexes = family_rng.choice(["F", "M"], size=2).tolist()
    if slot.relation == Relation.CLONE:
        sexes[1] = sexes[0]

    n_shared = round(shared_fraction(spec, slot.relation) * count)
    own = _draw_blobs(member_rng, spec, count, f"s{slot.family}.{slot.member}")
    blobs: list[Blob] = []
    for i in range(count):
        if i < n_population:
            source = population[i]
        elif i < n_shared:
            source = family_base[i]
        else:
            blobs.append(own[i])
            continue
        blobs.append(_jitter(member_rng, source, spec))

    subject_id = f"S{slot.index:04d}"
    volumes = []
    for m, transform in enumerate(spec.modalities):
        subset = _modality_blobs(blobs, transform, m, len(spec.modalities))
        values = np.clip(render_blobs(spec.dims, subset), 0.0, None)
        if transform.gamma != 1.0:
            values = values**transform.gamma
        if spec.noise_sigma > 0:
            values = values + member_rng.normal(0.0, spec.noise_sigma, size=spec.dims)
        volumes.append(
            Volume(
                data=values.astype(np.float32),
                spacing=(spec.spacing, spec.spacing, spec.spacing),
                subject_id=subject_id,
                modality_id=transform.name,
            )
        )

    zygosity = {
        Relation.CLONE: Zygosity.MZ,
        Relation.DZ: Zygosity.DZ,
        Relation.NT: Zygosity.NOT_TWIN,
        Relation.SINGLETON: Zygosity.NOT_TWIN,
    }[slot.relation]
    record = SubjectRecord(
        subject_id=subject_id,
        mother_id=f"M{slot.family:04d}",
        age=ages[slot.member],
        sex=sexes[slot.member],
        zygosity=zygosity,
        paths={t.name: f"{subject_id}/{t.name}.f32" for t in spec.modalities},
    )
    return PhantomSubject(
        subject_id=subject_id,
        family=slot.family,
        relation=slot.relation,
        record=record,
        blobs=tuple(blobs),
        volumes=tuple(volumes),
    )


def generate_cohort(spec: PhantomSpec, threads: int = 1) -> PhantomCohort:
    population_rng = np.random.default_rng([spec.seed, POPULATION_STREAM])
    population = tuple(_draw_blobs(population_rng, spec, spec.blob_count, "p"))
    slots = _family_layout(spec)
    subjects = parallel_map(
        partial(_build_subject, spec=spec, population=population), slots, threads
    )
    logger.info(
        f"Generated {len(subjects)} phantom subjects "
        f"({spec.clone_pairs} clone, {spec.dz_pairs} DZ, {spec.nt_pairs} NT pairs, "
        f"{spec.singletons} singletons), modalities "
        f"{[m.name for m in spec.modalities]}"
    )
    return PhantomCohort(spec=spec, subjects=tuple(subjects))


def write_cohort(cohort: PhantomCohort, out_dir: Path) -> Path:
    """Write raw volumes, sidecars and manifest.csv; returns the manifest path."""
    for s in cohort.subjects:
        for v in s.volumes:
            write_raw_volume(v, out_dir / s.subject_id / f"{v.modality_id}.f32")
    manifest_path = out_dir / "manifest.csv"
    write_manifest(cohort.manifest, manifest_path)
    logger.info(f"Wrote {len(cohort.subjects)} subjects to {out_dir}")
    return manifest_path


def blob_overlap(a: PhantomSubject, b: PhantomSubject) -> float:
    """Fraction of blobs with common provenance."""
    total = max(len(a.blobs), len(b.blobs))
    if total == 0:
        return 0.0
    return len(a.blob_keys & b.blob_keys) / total

