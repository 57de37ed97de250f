"""Sibling identification protocol: manifests, sibling pairs, recall@k curves,
random baseline, age-split analyses and result files."""

import csv
import json
import logging
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .config import ModalityId, SiblingType, Zygosity, normalize_modality
from .errors import CorruptHeader, MissingInput, NoProbes, TooFewPairs, UnknownSubject
from .similarity_graph import SimilarityMatrix, ranked_neighbors
from .stats import WilcoxonResult, wilcoxon_signed_rank

logger = logging.getLogger("volprint")

MANIFEST_COLUMNS = ("subject_id", "mother_id", "age", "sex", "zygosity", "paths")

Pair = tuple[str, str]


class SubjectRecord(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    subject_id: str = Field(min_length=1)
    mother_id: str = ""
    age: int = Field(ge=0)
    sex: str = ""
    zygosity: Zygosity = Zygosity.UNKNOWN
    paths: dict[ModalityId, str] = Field(default_factory=dict)

    @field_validator("zygosity", mode="before")
    @classmethod
    def _parse_zygosity(cls, value: Any) -> Any:
        if isinstance(value, str):
            lookup = {z.value.lower(): z for z in Zygosity}
            lookup["nt"] = Zygosity.NOT_TWIN
            lookup[""] = Zygosity.UNKNOWN
            return lookup.get(value.strip().lower(), value)
        return value

    @property
    def is_twin(self) -> bool:
        return self.zygosity in (Zygosity.MZ, Zygosity.DZ)


@dataclass(frozen=True)
class CohortManifest:
    subjects: tuple[SubjectRecord, ...]
    root: Path = Path(".")

    def __post_init__(self) -> None:
        ids = [s.subject_id for s in self.subjects]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise CorruptHeader(f"Duplicate subject ids in manifest: {duplicates}")

    @property
    def subject_ids(self) -> tuple[str, ...]:
        return tuple(s.subject_id for s in self.subjects)

    def get(self, subject_id: str) -> SubjectRecord:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise UnknownSubject(f"Subject {subject_id!r} is not in the manifest")

    def volume_path(self, subject_id: str, modality_id: str) -> Path:
        record = self.get(subject_id)
        try:
            return self.root / record.paths[normalize_modality(modality_id)]
        except KeyError:
            raise MissingInput(
                f"Manifest has no {modality_id} volume for {subject_id}"
            ) from None

    def twin_ids(self) -> frozenset[str]:
        return frozenset(s.subject_id for s in self.subjects if s.is_twin)


def read_manifest(path: Path) -> CohortManifest:
    """Read the manifest CSV; volume paths resolve against its directory."""
    if not path.is_file():
        raise MissingInput(f"Manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = set(MANIFEST_COLUMNS[:3]) - set(reader.fieldnames or ())
        if missing:
            raise CorruptHeader(f"{path}: missing columns {sorted(missing)}")
        records = []
        for line, row in enumerate(reader, start=2):
            try:
                data: dict[str, Any] = {
                    k: row[k] for k in MANIFEST_COLUMNS[:5] if row.get(k) is not None
                }
                data["paths"] = json.loads(row.get("paths") or "{}")
                records.append(SubjectRecord.model_validate(data))
            except (json.JSONDecodeError, ValidationError) as e:
                raise CorruptHeader(f"{path}:{line}: {e}") from e
    logger.info(f"Manifest {path}: {len(records)} subjects")
    return CohortManifest(subjects=tuple(records), root=path.parent)


def write_manifest(manifest: CohortManifest, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for s in manifest.subjects:
            writer.writerow(
                [
                    s.subject_id,
                    s.mother_id,
                    s.age,
                    s.sex,
                    s.zygosity.value,
                    json.dumps(s.paths, sort_keys=True),
                ]
            )


@dataclass(frozen=True)
class SiblingPairs:
    mz_pairs: tuple[Pair, ...] = ()
    dz_pairs: tuple[Pair, ...] = ()
    nt_pairs: tuple[Pair, ...] = ()
    inconsistent: tuple[Pair, ...] = ()

    def of_type(self, sibling_type: SiblingType) -> tuple[Pair, ...]:
        return {
            SiblingType.MZ: self.mz_pairs,
            SiblingType.DZ: self.dz_pairs,
            SiblingType.NT: self.nt_pairs,
        }[sibling_type]

    def with_pairs(
        self, sibling_type: SiblingType, pairs: Iterable[Pair]
    ) -> "SiblingPairs":
        """Copy holding only the given pairs of one type."""
        kept = tuple(pairs)
        return SiblingPairs(
            mz_pairs=kept if sibling_type == SiblingType.MZ else (),
            dz_pairs=kept if sibling_type == SiblingType.DZ else (),
            nt_pairs=kept if sibling_type == SiblingType.NT else (),
        )

    def siblings(self, sibling_type: SiblingType) -> dict[str, set[str]]:
        result: dict[str, set[str]] = defaultdict(set)
        for a, b in self.of_type(sibling_type):
            result[a].add(b)
            result[b].add(a)
        return dict(result)

    def summary(self) -> dict[str, int]:
        return {
            "mz_pairs": len(self.mz_pairs),
            "dz_pairs": len(self.dz_pairs),
            "nt_pairs": len(self.nt_pairs),
            "nt_subjects": len({s for pair in self.nt_pairs for s in pair}),
            "inconsistent": len(self.inconsistent),
        }


def derive_sibling_pairs(manifest: CohortManifest) -> SiblingPairs:
    """Classify every same-mother pair as MZ, DZ or NT sibling pair."""
    families: dict[str, list[SubjectRecord]] = defaultdict(list)
    for s in manifest.subjects:
        if s.mother_id:
            families[s.mother_id].append(s)

    found: dict[str, list[Pair]] = {"MZ": [], "DZ": [], "NT": [], "bad": []}
    for members in families.values():
        ordered = sorted(members, key=lambda s: s.subject_id)
        for a, b in combinations(ordered, 2):
            pair = (a.subject_id, b.subject_id)
            if a.age != b.age:
                found["NT"].append(pair)
            elif Zygosity.NOT_TWIN in (a.zygosity, b.zygosity):
                found["NT"].append(pair)
            elif a.zygosity == b.zygosity and a.is_twin:
                found[a.zygosity.value].append(pair)
            else:
                logger.warning(
                    f"InconsistentZygosity: {pair[0]} ({a.zygosity.value}) and "
                    f"{pair[1]} ({b.zygosity.value}) share mother and age, skipped"
                )
                found["bad"].append(pair)

    pairs = SiblingPairs(
        mz_pairs=tuple(sorted(found["MZ"])),
        dz_pairs=tuple(sorted(found["DZ"])),
        nt_pairs=tuple(sorted(found["NT"])),
        inconsistent=tuple(sorted(found["bad"])),
    )
    logger.info(f"Sibling pairs: {pairs.summary()}")
    return pairs


@dataclass(frozen=True)
class RecallCurve:
    """Mean recall@k for k = 1..k_max over probes with a sibling of the type."""

    sibling_type: SiblingType
    mean_recall: np.ndarray  # index k-1
    probes: tuple[str, ...]
    per_probe: np.ndarray = field(repr=False)  # (n_probes, k_max)
    modalities: tuple[str, ...] = ()
    baseline: bool = False

    @property
    def k_max(self) -> int:
        return int(self.mean_recall.shape[0])

    @property
    def n_probes(self) -> int:
        return len(self.probes)

    @property
    def label(self) -> str:
        name = self.sibling_type.value
        if self.baseline:
            return f"rnd-{name}"
        if self.modalities:
            return f"{name}:{'+'.join(self.modalities)}"
        return name

    def at(self, k: int) -> float:
        return float(self.mean_recall[k - 1])


def _probe_recall(
    sim: SimilarityMatrix,
    probe: str,
    siblings: set[str],
    k_max: int,
    exclude: frozenset[str],
) -> np.ndarray:
    ranked = ranked_neighbors(sim, probe, exclude)[:k_max]
    hits = np.array([s in siblings for s in ranked], dtype=np.float64)
    found = np.cumsum(hits)
    curve = np.full(k_max, found[-1] if found.size else 0.0)
    curve[: found.size] = found
    recall: np.ndarray = curve / len(siblings)
    return recall


def recall_at_k(
    sim: SimilarityMatrix,
    pairs: SiblingPairs,
    sibling_type: SiblingType,
    k_max: int = 50,
    exclude: frozenset[str] = frozenset(),
) -> RecallCurve:
    """Mean per-probe recall@k; excluded ids are neither ranked nor probed."""
    known = set(sim.subjects)
    for pair in pairs.of_type(sibling_type):
        for s in pair:
            if s not in known:
                raise UnknownSubject(f"Sibling {s!r} is not in the similarity matrix")

    siblings = {
        probe: sibs - exclude
        for probe, sibs in pairs.siblings(sibling_type).items()
        if probe not in exclude
    }
    probes = tuple(sorted(p for p, sibs in siblings.items() if sibs))
    if not probes:
        raise NoProbes(f"No subject has a sibling of type {sibling_type.value}")

    per_probe = np.stack(
        [_probe_recall(sim, p, siblings[p], k_max, exclude) for p in probes]
    )
    per_probe.setflags(write=False)
    mean = per_probe.mean(axis=0)
    mean.setflags(write=False)
    logger.debug(
        f"{sibling_type.value}: {len(probes)} probes, recall@1={mean[0]:.3f} "
        f"recall@{k_max}={mean[-1]:.3f}"
    )
    return RecallCurve(
        sibling_type=sibling_type,
        mean_recall=mean,
        probes=probes,
        per_probe=per_probe,
        modalities=sim.modalities,
    )


def random_similarity(subjects: Sequence[str], seed: int) -> SimilarityMatrix:
    """Seeded symmetric uniform similarity with zero diagonal."""
    rng = np.random.default_rng(seed)
    n = len(subjects)
    draws = rng.random((n, n))
    values = (draws + draws.T) / 2.0
    np.fill_diagonal(values, 0.0)
    values.setflags(write=False)
    return SimilarityMatrix(subjects=tuple(subjects), values=values)


def random_baseline(
    subjects: Sequence[str],
    pairs: SiblingPairs,
    sibling_type: SiblingType,
    k_max: int = 50,
    seed: int = 0,
    exclude: frozenset[str] = frozenset(),
) -> RecallCurve:
    curve = recall_at_k(
        random_similarity(subjects, seed), pairs, sibling_type, k_max, exclude
    )
    return RecallCurve(
        sibling_type=curve.sibling_type,
        mean_recall=curve.mean_recall,
        probes=curve.probes,
        per_probe=curve.per_probe,
        baseline=True,
    )


def compare_curves(a: RecallCurve, b: RecallCurve) -> WilcoxonResult:
    """Wilcoxon signed-rank test between two curves paired over k."""
    n = min(a.k_max, b.k_max)
    return wilcoxon_signed_rank(a.mean_recall[:n], b.mean_recall[:n])


@dataclass(frozen=True)
class AgeSplitResult:
    sibling_type: SiblingType
    criterion: str  # "age_gap" for NT, "mean_age" for twins
    threshold: float
    low: RecallCurve | None
    high: RecallCurve | None
    test: WilcoxonResult | None
    low_pairs: int
    high_pairs: int

    @property
    def degenerate(self) -> bool:
        return self.low_pairs == 0 or self.high_pairs == 0


def age_split_analysis(
    sim: SimilarityMatrix,
    pairs: SiblingPairs,
    manifest: CohortManifest,
    sibling_type: SiblingType,
    k_max: int = 50,
    exclude: frozenset[str] = frozenset(),
) -> AgeSplitResult:
    """Median split by age gap (NT) or pair age (twins); ties go low."""
    typed = pairs.of_type(sibling_type)
    if not typed:
        raise NoProbes(f"No sibling pairs of type {sibling_type.value}")

    def value(pair: Pair) -> float:
        a, b = manifest.get(pair[0]).age, manifest.get(pair[1]).age
        if sibling_type == SiblingType.NT:
            return float(abs(a - b))
        return (a + b) / 2.0

    values = np.array([value(p) for p in typed], dtype=np.float64)
    threshold = float(np.median(values))
    low = [p for p, v in zip(typed, values) if v <= threshold]
    high = [p for p, v in zip(typed, values) if v > threshold]

    def curve(group: list[Pair]) -> RecallCurve | None:
        if not group:
            return None
        subset = pairs.with_pairs(sibling_type, group)
        return recall_at_k(sim, subset, sibling_type, k_max, exclude)

    low_curve, high_curve = curve(low), curve(high)
    test = None
    if low_curve is not None and high_curve is not None:
        try:
            test = compare_curves(low_curve, high_curve)
        except TooFewPairs as e:
            logger.warning(f"Age split {sibling_type.value}: no test, {e}")
    else:
        logger.warning(
            f"Age split {sibling_type.value} at {threshold}: degenerate, "
            f"{len(low)} low / {len(high)} high pairs"
        )

    return AgeSplitResult(
        sibling_type=sibling_type,
        criterion="age_gap" if sibling_type == SiblingType.NT else "mean_age",
        threshold=threshold,
        low=low_curve,
        high=high_curve,
        test=test,
        low_pairs=len(low),
        high_pairs=len(high),
    )


def write_recall_csv(curve: RecallCurve, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["k", "mean_recall", "n_probes"])
        for k in range(1, curve.k_max + 1):
            writer.writerow([k, f"{curve.at(k):.6f}", curve.n_probes])


def write_series_json(curves: Sequence[RecallCurve], path: Path) -> None:
    """Long-format series, directly usable as vega-lite inline data."""
    values = [
        {"k": k, "recall": round(c.at(k), 6), "series": c.label}
        for c in curves
        for k in range(1, c.k_max + 1)
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"values": values}, indent=1), encoding="utf-8")


def write_wilcoxon_json(result: WilcoxonResult, path: Path, **context: Any) -> None:
    payload = {
        "statistic": result.statistic,
        "p": result.p_value,
        "n_effective": result.n_effective,
        "method": result.method,
        **context,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
