"""Validated run configuration (JSON or TOML) with full defaulting."""

import json
import logging
import tomllib
from enum import StrEnum
from pathlib import Path
from typing import Annotated, Any, Literal

from pydantic import (
    AfterValidator,
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    model_validator,
)

from .errors import ConfigError, InvalidConfig, InvalidSpec, MissingInput

logger = logging.getLogger("volprint")


def normalize_modality(name: str) -> str:
    """Case-normalize a modality id; rejects empty names."""
    normalized = name.strip().upper()
    if not normalized:
        raise ValueError("modality id must be non-empty")
    return normalized


ModalityId = Annotated[str, AfterValidator(normalize_modality)]


class SiblingType(StrEnum):
    MZ = "MZ"
    DZ = "DZ"
    NT = "NT"


class Zygosity(StrEnum):
    MZ = "MZ"
    DZ = "DZ"
    NOT_TWIN = "NotTwin"
    UNKNOWN = "Unknown"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class VolumeConfig(_Section):
    """Input conditioning. target_spacing=None keeps the native grid."""

    target_spacing: float | None = Field(default=1.0, gt=0)
    max_dim: int = Field(default=1024, ge=1)


class ScaleSpaceConfig(_Section):
    octaves: int = Field(default=4, ge=1)
    scales_per_octave: int = Field(default=3, ge=1)
    base_sigma: float = Field(default=1.6, gt=0)
    contrast_threshold: float = Field(default=0.03, ge=0)
    edge_ratio_threshold: float = Field(default=10.0, gt=1)


class DescriptorConfig(_Section):
    subregions: int = Field(default=2, ge=1)
    orientation_bins: int = Field(default=12, ge=2)
    window_radius_sigmas: float = Field(default=3.0, gt=0)
    clamp: float = Field(default=0.2, gt=0, le=1)

    @property
    def dimension(self) -> int:
        return self.subregions**3 * self.orientation_bins


class GraphConfig(_Section):
    k: int = Field(default=20, ge=1)
    k_sweep: list[int] = Field(default_factory=lambda: [10, 20, 30, 40, 50])
    allow_self_edges: bool = False
    modality_sets: list[list[ModalityId]] = Field(default_factory=lambda: [["T1"]])

    @model_validator(mode="after")
    def _check_sweep(self) -> "GraphConfig":
        if any(k < 1 for k in self.k_sweep):
            raise ValueError("k_sweep values must be positive")
        if any(not subset for subset in self.modality_sets):
            raise ValueError("modality_sets entries must be non-empty")
        return self


class EvaluationConfig(_Section):
    k_max: int = Field(default=50, ge=1)
    sibling_types: list[SiblingType] = Field(
        default_factory=lambda: [SiblingType.MZ, SiblingType.DZ, SiblingType.NT]
    )
    nt_exclude_twins: bool = False
    random_seed: int = 0


class ModalityTransform(_Section):
    """Per-modality monotone remap x**gamma and blob subset selection."""

    name: ModalityId
    gamma: float = Field(default=1.0, gt=0)
    subset: Literal["all", "disjoint"] = "all"


class PhantomSpec(_Section):
    dims: tuple[int, int, int] = (96, 96, 96)
    spacing: float = Field(default=1.0, gt=0)
    blob_count: int = Field(default=40, ge=1)
    sigma_range: tuple[float, float] = (2.0, 6.0)
    amplitude_range: tuple[float, float] = (0.5, 1.0)
    clone_pairs: int = Field(default=15, ge=0)
    dz_pairs: int = Field(default=0, ge=0)
    nt_pairs: int = Field(default=15, ge=0)
    singletons: int = Field(default=0, ge=0)
    clone_shared_fraction: float = Field(default=1.0, ge=0, le=1)
    sib_shared_fraction: float = Field(default=0.5, ge=0, le=1)
    unrelated_shared_fraction: float = Field(default=0.0, ge=0, le=1)
    position_jitter_mm: float = Field(default=0.5, ge=0)
    size_jitter: float = Field(default=0.05, ge=0)
    noise_sigma: float = Field(default=0.01, ge=0)
    age_range: tuple[int, int] = (22, 35)
    modalities: list[ModalityTransform] = Field(
        default_factory=lambda: [ModalityTransform(name="T1")]
    )
    seed: int = 0

    @model_validator(mode="after")
    def _check_geometry(self) -> "PhantomSpec":
        if min(self.dims) < 32:
            raise ValueError(f"dims must be >= 32 per axis, got {self.dims}")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid sigma_range {self.sigma_range}")
        if self.amplitude_range[0] > self.amplitude_range[1]:
            raise ValueError(f"invalid amplitude_range {self.amplitude_range}")
        if not 0 <= self.age_range[0] <= self.age_range[1]:
            raise ValueError(f"invalid age_range {self.age_range}")
        names = [m.name for m in self.modalities]
        if not names or len(set(names)) != len(names):
            raise ValueError("modalities must be non-empty and unique")
        if self.subject_count == 0:
            raise ValueError("cohort has no subjects")
        return self

    @property
    def subject_count(self) -> int:
        pairs = self.clone_pairs + self.dz_pairs + self.nt_pairs
        return 2 * pairs + self.singletons


class RunConfig(_Section):
    volume: VolumeConfig = VolumeConfig()
    scale_space: ScaleSpaceConfig = ScaleSpaceConfig()
    descriptor: DescriptorConfig = DescriptorConfig()
    graph: GraphConfig = GraphConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    phantom: PhantomSpec = PhantomSpec()
    threads: int | None = Field(default=None, ge=1)
    seed: int | None = None

    def with_seed(self, seed: int | None) -> "RunConfig":
        """Propagate a run-wide seed to the phantom and random baseline."""
        effective = self.seed if seed is None else seed
        if effective is None:
            return self
        return self.model_copy(
            update={
                "seed": effective,
                "phantom": self.phantom.model_copy(update={"seed": effective}),
                "evaluation": self.evaluation.model_copy(
                    update={"random_seed": effective}
                ),
            }
        )


def parse_phantom_spec(data: dict[str, Any]) -> PhantomSpec:
    """Validate a phantom spec mapping, raising InvalidSpec on failure."""
    try:
        return PhantomSpec.model_validate(data)
    except ValidationError as e:
        raise InvalidSpec(str(e)) from e


def read_document(
    path: Path, error: type[ConfigError] = InvalidConfig
) -> dict[str, Any]:
    """Parse a JSON or TOML (by suffix) document into a mapping."""
    if not path.is_file():
        raise MissingInput(f"File not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise error(f"Cannot parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise error(f"{path}: top level must be a table/object")
    return data


def load_run_config(path: Path | None) -> RunConfig:
    """Load and validate a run config from JSON or TOML; None gives defaults."""
    if path is None:
        logger.debug("No config file given, using defaults")
        return RunConfig()
    data = read_document(path, InvalidConfig)
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise InvalidConfig(f"Invalid config {path}:\n{e}") from e

    logger.info(f"Loaded config from {path}")
    return config
