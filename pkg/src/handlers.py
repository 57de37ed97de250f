"""Business logic handlers for volprint commands."""

import json
import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

from src.bag_of_features import (
    Fingerprint,
    condition_volume,
    extract_subject,
    read_fingerprint,
    write_fingerprint,
)
from src.config import (
    RunConfig,
    SiblingType,
    normalize_modality,
    parse_phantom_spec,
    read_document,
)
from src.errors import (
    InvalidConfig,
    InvalidSpec,
    NoProbes,
    TooFewPairs,
    UnsupportedFormat,
)
from src.evaluation import (
    CohortManifest,
    RecallCurve,
    SiblingPairs,
    age_split_analysis,
    compare_curves,
    derive_sibling_pairs,
    random_baseline,
    read_manifest,
    recall_at_k,
    write_recall_csv,
    write_series_json,
    write_wilcoxon_json,
)
from src.logger import emit_report
from src.parallel import parallel_map
from src.phantom_cohort import generate_cohort, write_cohort
from src.similarity_graph import (
    SimilarityMatrix,
    build_graph,
    read_graph,
    read_similarity_csv,
    similarity_matrix,
    top_neighbors,
    write_graph,
    write_similarity_csv,
)
from src.visualize import visualize_pair
from src.volume_io import Volume, load_volume

logger = logging.getLogger("volprint")

FINGERPRINT_SUFFIX = ".vfp"

VolumeLoader = Callable[[], list[Volume]]


def _load_subject_volumes(
    manifest: CohortManifest, subject_id: str, modalities: list[str] | None = None
) -> list[Volume]:
    record = manifest.get(subject_id)
    wanted = modalities if modalities is not None else sorted(record.paths)
    return [
        load_volume(
            manifest.volume_path(subject_id, m),
            expected_modality=m,
            subject_id=subject_id,
        )
        for m in wanted
    ]


def parse_volume_arg(arg: str) -> tuple[str | None, Path]:
    """Split `MODALITY=path` into its parts; a bare path has no modality."""
    name, sep, path = arg.partition("=")
    if sep and name and "/" not in name:
        return normalize_modality(name), Path(path)
    return None, Path(arg)


def _extract_one(
    job: tuple[str, VolumeLoader], cfg: RunConfig, out_dir: Path
) -> tuple[Fingerprint, Path]:
    """Load one subject's volumes, extract and write its fingerprint."""
    subject_id, load = job
    logger.info(f"Loading volumes of {subject_id}")
    volumes = load()
    fp = extract_subject(
        subject_id, volumes, cfg.volume, cfg.scale_space, cfg.descriptor
    )
    path = out_dir / f"{subject_id}{FINGERPRINT_SUFFIX}"
    write_fingerprint(fp, path)
    return fp, path


def cmd_extract(
    cfg: RunConfig,
    out_dir: Path,
    manifest_path: Path | None = None,
    volume_args: list[str] | None = None,
    subject_id: str | None = None,
    threads: int = 1,
) -> list[Path]:
    """Extract one fingerprint file per subject. Returns written paths."""
    # volumes are read inside the workers, one subject at a time per thread
    jobs: list[tuple[str, VolumeLoader]] = []
    if manifest_path is not None:
        manifest = read_manifest(manifest_path)
        for sid in manifest.subject_ids:
            jobs.append((sid, partial(_load_subject_volumes, manifest, sid)))
    elif volume_args:
        volumes = []
        for arg in volume_args:
            modality, path = parse_volume_arg(arg)
            v = load_volume(path, expected_modality=modality, subject_id=subject_id)
            if not v.modality_id:
                raise UnsupportedFormat(
                    f"{path}: no modality in sidecar, pass it as MODALITY={path}"
                )
            volumes.append(v)
        jobs.append((subject_id or volumes[0].subject_id, partial(list, volumes)))
    else:
        raise InvalidConfig("extract needs --manifest or volume paths")

    logger.info(f"Extracting {len(jobs)} subjects with {threads} threads")
    results = parallel_map(
        partial(_extract_one, cfg=cfg, out_dir=out_dir), jobs, threads
    )

    paths = []
    for fp, path in results:
        for r in fp.report:
            emit_report(
                "modality",
                subject_id=fp.subject_id,
                modality_id=r.modality_id,
                found=r.found,
                rejected_contrast=r.rejected_contrast,
                rejected_edge=r.rejected_edge,
                dropped_margin=r.dropped_margin,
                kept=r.kept,
            )
        emit_report(
            "fingerprint",
            subject_id=fp.subject_id,
            records=len(fp.records),
            counts=fp.counts,
            path=str(path),
        )
        paths.append(path)
    return paths


def _read_fingerprints(paths: list[Path]) -> list[Fingerprint]:
    logger.info(f"Reading {len(paths)} fingerprints")
    return [read_fingerprint(p) for p in paths]


def _modality_set(cfg: RunConfig, modalities: list[str] | None) -> list[str]:
    if modalities:
        return [normalize_modality(m) for m in modalities]
    return list(cfg.graph.modality_sets[0])


def cmd_graph(
    cfg: RunConfig,
    fingerprint_paths: list[Path],
    out_path: Path,
    k: int | None = None,
    modalities: list[str] | None = None,
    threads: int = 1,
) -> Path:
    """Build the K-NN graph over fingerprints and write it."""
    fps = _read_fingerprints(fingerprint_paths)
    graph = build_graph(
        fps,
        k if k is not None else cfg.graph.k,
        _modality_set(cfg, modalities),
        allow_self_edges=cfg.graph.allow_self_edges,
        threads=threads,
    )
    write_graph(graph, out_path)
    logger.info(f"Graph written to {out_path}")
    return out_path


def cmd_similarity(graph_paths: list[Path], out_path: Path) -> SimilarityMatrix:
    """Combined Jaccard matrix over graphs of disjoint modalities."""
    graphs = [read_graph(p) for p in graph_paths]
    sim = similarity_matrix(graphs)
    write_similarity_csv(sim, out_path)
    logger.info(f"Similarity matrix of {len(sim.subjects)} subjects -> {out_path}")
    return sim


@dataclass
class EvaluationOutputs:
    curves: dict[str, RecallCurve] = field(default_factory=dict)
    files: list[Path] = field(default_factory=list)


def _exclusions(
    cfg: RunConfig, manifest: CohortManifest, sibling_type: SiblingType
) -> frozenset[str]:
    if sibling_type == SiblingType.NT and cfg.evaluation.nt_exclude_twins:
        return manifest.twin_ids()
    return frozenset()


def _write_comparison(
    a: RecallCurve, b: RecallCurve, path: Path, outputs: EvaluationOutputs
) -> None:
    try:
        result = compare_curves(a, b)
    except TooFewPairs as e:
        logger.warning(f"No test for {a.label} vs {b.label}: {e}")
        return
    write_wilcoxon_json(result, path, a=a.label, b=b.label)
    outputs.files.append(path)


def _evaluate_matrix(
    cfg: RunConfig,
    sim: SimilarityMatrix,
    manifest: CohortManifest,
    pairs: SiblingPairs,
    out_dir: Path,
    sibling_types: list[SiblingType],
    strict: bool,
    with_extras: bool = True,
) -> EvaluationOutputs:
    outputs = EvaluationOutputs()
    k_max = cfg.evaluation.k_max
    for st in sibling_types:
        exclude = _exclusions(cfg, manifest, st)
        try:
            curve = recall_at_k(sim, pairs, st, k_max, exclude)
        except NoProbes:
            if strict:
                raise
            logger.warning(f"No {st.value} sibling pairs, skipping")
            continue
        outputs.curves[curve.label] = curve
        path = out_dir / f"recall_{st.value}.csv"
        write_recall_csv(curve, path)
        outputs.files.append(path)
        logger.info(
            f"{curve.label}: {curve.n_probes} probes, "
            f"recall@1={curve.at(1):.3f} recall@{k_max}={curve.at(k_max):.3f}"
        )
        if not with_extras:
            continue

        baseline = random_baseline(
            sim.subjects, pairs, st, k_max, cfg.evaluation.random_seed, exclude
        )
        outputs.curves[baseline.label] = baseline
        path = out_dir / f"recall_{baseline.label}.csv"
        write_recall_csv(baseline, path)
        outputs.files.append(path)

        _write_comparison(
            curve, baseline, out_dir / f"wilcoxon_{st.value}_vs_rnd.json", outputs
        )

        try:
            split = age_split_analysis(sim, pairs, manifest, st, k_max, exclude)
        except NoProbes as e:
            logger.warning(f"No age split for {st.value}: {e}")
            continue
        path = out_dir / f"age_split_{st.value}.json"
        summary = {
            "criterion": split.criterion,
            "threshold": split.threshold,
            "low_pairs": split.low_pairs,
            "high_pairs": split.high_pairs,
            "degenerate": split.degenerate,
            "statistic": split.test.statistic if split.test else None,
            "p": split.test.p_value if split.test else None,
            "n_effective": split.test.n_effective if split.test else None,
        }
        path.write_text(json.dumps(summary, indent=2, sort_keys=True), "utf-8")
        outputs.files.append(path)

    if with_extras:
        typed = [c for c in outputs.curves.values() if not c.baseline]
        for i, a in enumerate(typed):
            for b in typed[i + 1 :]:
                name = f"wilcoxon_{a.sibling_type.value}_vs_{b.sibling_type.value}.json"
                _write_comparison(a, b, out_dir / name, outputs)

    path = out_dir / "recall_series.json"
    write_series_json(list(outputs.curves.values()), path)
    outputs.files.append(path)
    return outputs


def cmd_evaluate(
    cfg: RunConfig,
    matrix_path: Path,
    manifest_path: Path,
    out_dir: Path,
    sibling_types: list[SiblingType] | None = None,
) -> EvaluationOutputs:
    """Recall curves, random baselines, Wilcoxon tests and age splits."""
    sim = read_similarity_csv(matrix_path)
    manifest = read_manifest(manifest_path)
    pairs = derive_sibling_pairs(manifest)
    emit_report("sibling_pairs", **pairs.summary())
    strict = sibling_types is not None
    types = sibling_types or cfg.evaluation.sibling_types
    outputs = _evaluate_matrix(cfg, sim, manifest, pairs, out_dir, types, strict)
    if not outputs.curves:
        raise NoProbes("No sibling pairs of any requested type")
    return outputs


@dataclass
class SweepResult:
    curves: dict[tuple[str, int], dict[str, RecallCurve]] = field(
        default_factory=dict
    )
    top1: dict[tuple[str, int], dict[str, str | None]] = field(default_factory=dict)

    def stable_top1(self, modality_label: str) -> bool:
        maps = [v for (label, _), v in self.top1.items() if label == modality_label]
        return all(m == maps[0] for m in maps)


def cmd_sweep_k(
    cfg: RunConfig,
    fingerprint_paths: list[Path],
    manifest_path: Path,
    out_dir: Path,
    threads: int = 1,
) -> SweepResult:
    """Recall curves for every K of the sweep and every modality set."""
    fps = _read_fingerprints(fingerprint_paths)
    manifest = read_manifest(manifest_path)
    pairs = derive_sibling_pairs(manifest)
    result = SweepResult()
    for modality_set in cfg.graph.modality_sets:
        label = "+".join(modality_set)
        for k in cfg.graph.k_sweep:
            logger.info(f"Sweep {label} K={k}")
            graph = build_graph(
                fps,
                k,
                modality_set,
                allow_self_edges=cfg.graph.allow_self_edges,
                threads=threads,
            )
            sim = similarity_matrix(graph)
            outputs = _evaluate_matrix(
                cfg,
                sim,
                manifest,
                pairs,
                out_dir / label / f"k{k}",
                cfg.evaluation.sibling_types,
                strict=False,
                with_extras=False,
            )
            result.curves[(label, k)] = outputs.curves
            result.top1[(label, k)] = top_neighbors(sim)

        stable = result.stable_top1(label)
        summary = {
            "modalities": list(modality_set),
            "k": list(cfg.graph.k_sweep),
            "top1_stable": stable,
            "top1": {str(k): result.top1[(label, k)] for k in cfg.graph.k_sweep},
        }
        path = out_dir / label / "top1.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(summary, indent=2, sort_keys=True), "utf-8")
        logger.info(f"Sweep {label}: top-1 neighbors stable across K: {stable}")
    return result


def cmd_phantom(
    cfg: RunConfig,
    out_dir: Path,
    spec_path: Path | None = None,
    threads: int = 1,
) -> Path:
    """Generate a synthetic cohort and write it with its manifest."""
    spec = cfg.phantom
    if spec_path is not None:
        data = read_document(spec_path, InvalidSpec)
        if cfg.seed is not None:
            data["seed"] = cfg.seed
        spec = parse_phantom_spec(data)
    cohort = generate_cohort(spec, threads)
    return write_cohort(cohort, out_dir)


def cmd_visualize(
    cfg: RunConfig,
    graph_path: Path,
    manifest_path: Path,
    pair: tuple[str, str],
    axis: int,
    slice_index: int,
    out_dir: Path,
    modality: str | None = None,
) -> list[Path]:
    """Overlay the matched keypoints of a pair on one slice of each subject."""
    graph = read_graph(graph_path)
    manifest = read_manifest(manifest_path)
    a, b = pair
    graph.subject_index(a)
    graph.subject_index(b)
    if modality:
        name = normalize_modality(modality)
    elif graph.modalities:
        name = graph.modalities[0]
    else:
        raise InvalidConfig(f"{graph_path}: graph has no modalities")
    volumes = {
        s: condition_volume(_load_subject_volumes(manifest, s, [name])[0], cfg.volume)
        for s in pair
    }
    return visualize_pair(graph, a, b, volumes, axis, slice_index, out_dir, name)
