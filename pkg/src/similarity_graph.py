"""Cohort-wide descriptor K-NN graph and Jaccard subject similarity.

Nodes are numbered subject by subject (subjects in ascending id order,
records in canonical fingerprint order), so "ties by (subject_id, node
index)" reduces to ties by node index.
"""

import csv
import logging
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import cached_property, partial
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .bag_of_features import Fingerprint
from .config import normalize_modality
from .errors import (
    BadMagic,
    CorruptHeader,
    DuplicateRecord,
    EmptyCohort,
    MissingInput,
    OverlappingModalities,
    Truncated,
    UnknownSubject,
    VersionMismatch,
)
from .parallel import parallel_map

logger = logging.getLogger("volprint")

GRAPH_MAGIC = b"VKNN"
GRAPH_VERSION = 1
QUERY_BLOCK = 1024

NODE_DTYPE = np.dtype(
    [
        ("subject", "<u4"),
        ("modality", "<u4"),
        ("position", "<f4", (3,)),
        ("sigma", "<f4"),
    ]
)


@dataclass(frozen=True, eq=False)
class CohortGraph:
    """Directed K-NN graph in CSR form.

    Node u points at targets[offsets[u] : offsets[u + 1]] with matching
    distances.
    """

    k: int
    subjects: tuple[str, ...]
    modalities: tuple[str, ...]
    node_subject: np.ndarray  # (N,) index into subjects
    node_modality: np.ndarray  # (N,) index into modalities
    positions: np.ndarray  # (N, 3) base-grid voxel coordinates
    sigmas: np.ndarray  # (N,)
    offsets: np.ndarray  # (N + 1,)
    targets: np.ndarray
    distances: np.ndarray
    allow_self_edges: bool = False

    @property
    def node_count(self) -> int:
        return int(self.node_subject.shape[0])

    @property
    def edge_count(self) -> int:
        return int(self.targets.shape[0])

    def subject_index(self, subject_id: str) -> int:
        try:
            return self._subject_lookup[subject_id]
        except KeyError:
            raise UnknownSubject(
                f"Subject {subject_id!r} is not in the graph"
            ) from None

    @cached_property
    def _subject_lookup(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.subjects)}

    def neighbors(self, node: int) -> np.ndarray:
        return self.targets[self.offsets[node] : self.offsets[node + 1]]

    def edge_sources(self) -> np.ndarray:
        return np.repeat(np.arange(self.node_count), np.diff(self.offsets))

    @cached_property
    def bag_sizes(self) -> np.ndarray:
        """Descriptor count per subject within the graph's modalities."""
        return np.bincount(self.node_subject, minlength=len(self.subjects))

    @cached_property
    def matched_pairs(self) -> np.ndarray:
        """Unique unordered cross-subject node pairs (u < v) joined by an edge."""
        if self.node_count == 0:
            return np.empty((0, 2), dtype=np.int64)
        sources = self.edge_sources()
        targets = self.targets.astype(np.int64)
        cross = self.node_subject[sources] != self.node_subject[targets]
        low = np.minimum(sources, targets)[cross]
        high = np.maximum(sources, targets)[cross]
        keys = np.unique(low * self.node_count + high)
        return np.stack([keys // self.node_count, keys % self.node_count], axis=1)

    @cached_property
    def pair_counts(self) -> np.ndarray:
        """Symmetric subject x subject matrix of intersection counts."""
        n = len(self.subjects)
        counts = np.zeros((n, n), dtype=np.int64)
        pairs = self.matched_pairs
        np.add.at(
            counts,
            (self.node_subject[pairs[:, 0]], self.node_subject[pairs[:, 1]]),
            1,
        )
        counts = counts + counts.T
        counts.setflags(write=False)
        return counts

    @cached_property
    def isolated_modalities(self) -> tuple[str, ...]:
        """Modalities whose nodes have no eligible foreign-subject target."""
        isolated = []
        for m, name in enumerate(self.modalities):
            owners = np.unique(self.node_subject[self.node_modality == m])
            if owners.size == 1 and not self.allow_self_edges:
                isolated.append(name)
        return tuple(isolated)


@dataclass(frozen=True)
class SimilarityMatrix:
    """Pairwise Jaccard values.

    overlap holds |A∩B| / (|A| + |B|). It orders pairs exactly like J while J < 1
    and keeps separating pairs whose J saturates at 1.
    """

    subjects: tuple[str, ...]
    values: np.ndarray  # symmetric, zero diagonal
    k: int | None = None
    modalities: tuple[str, ...] = ()
    overlap: np.ndarray | None = field(default=None, repr=False)

    def index(self, subject_id: str) -> int:
        try:
            return self.subjects.index(subject_id)
        except ValueError:
            raise UnknownSubject(
                f"Subject {subject_id!r} is not in the matrix"
            ) from None

    def value(self, a: str, b: str) -> float:
        return float(self.values[self.index(a), self.index(b)])


@dataclass(frozen=True)
class ModalityMatches:
    modality_id: str
    matches: int
    matched_a: int
    matched_b: int
    sigma_mean: float
    sigma_median: float


@dataclass(frozen=True)
class MatchStatistics:
    subject_a: str
    subject_b: str
    matches: int
    per_modality: tuple[ModalityMatches, ...]


def _row_neighbors(
    row: np.ndarray, candidates: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Exact K smallest finite distances; ties go to the lower node index."""
    eligible = int(np.count_nonzero(np.isfinite(row)))
    kk = min(k, eligible)
    if kk == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    if kk < eligible:
        threshold = np.partition(row, kk - 1)[kk - 1]
        keep = np.flatnonzero(row <= threshold)
    else:
        keep = np.flatnonzero(np.isfinite(row))
    order = np.lexsort((candidates[keep], row[keep]))[:kk]
    chosen = keep[order]
    return candidates[chosen], row[chosen]


def _query_block(
    block: np.ndarray,
    members: np.ndarray,
    vectors: np.ndarray,
    owners: np.ndarray,
    k: int,
    allow_self_edges: bool,
) -> list[tuple[np.ndarray, np.ndarray]]:
    queries = members[block]
    dist = cdist(vectors[queries], vectors[members], metric="euclidean")
    dist[np.arange(len(block)), block] = np.inf
    if not allow_self_edges:
        dist[owners[queries][:, None] == owners[members][None, :]] = np.inf
    return [_row_neighbors(row, members, k) for row in dist]


def build_graph(
    fps: Sequence[Fingerprint],
    k: int,
    modalities: Sequence[str] | None = None,
    allow_self_edges: bool = False,
    threads: int = 1,
) -> CohortGraph:
    """Exact K-NN graph over all descriptors, restricted per modality."""
    if k < 1:
        raise ValueError(f"K must be positive, got {k}")
    if len(fps) < 2:
        raise EmptyCohort(f"Need at least 2 fingerprints, got {len(fps)}")

    ordered = sorted(fps, key=lambda fp: fp.subject_id)
    subjects = tuple(fp.subject_id for fp in ordered)
    if len(set(subjects)) != len(subjects):
        raise DuplicateRecord("A subject appears in more than one fingerprint")

    if modalities is None:
        wanted = sorted({m for fp in ordered for m in fp.modalities})
    else:
        wanted = sorted({normalize_modality(m) for m in modalities})
    modality_index = {m: i for i, m in enumerate(wanted)}

    node_subject: list[int] = []
    node_modality: list[int] = []
    vectors: list[np.ndarray] = []
    positions: list[tuple[float, float, float]] = []
    sigmas: list[float] = []
    dims = {fp.descriptor_dim for fp in ordered}
    if len(dims) > 1:
        raise CorruptHeader(f"Fingerprints disagree on descriptor length: {dims}")
    dim = dims.pop()
    for s, fp in enumerate(ordered):
        for d in fp.select(set(wanted)):
            node_subject.append(s)
            node_modality.append(modality_index[d.modality_id])
            vectors.append(d.vector)
            positions.append(d.keypoint.position)
            sigmas.append(d.keypoint.sigma)

    n = len(node_subject)
    owners = np.asarray(node_subject, dtype=np.int64)
    kinds = np.asarray(node_modality, dtype=np.int64)
    matrix = np.stack(vectors) if vectors else np.zeros((0, dim), dtype=np.float32)
    matrix = matrix.astype(np.float64)

    per_node: list[tuple[np.ndarray, np.ndarray]] = [
        (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))
    ] * n
    for m, name in enumerate(wanted):
        members = np.flatnonzero(kinds == m)
        if members.size == 0:
            logger.warning(f"Modality {name} has no descriptors in the cohort")
            continue
        if np.unique(owners[members]).size < 2 and not allow_self_edges:
            logger.warning(
                f"NoEligibleTargets: modality {name} present in one subject only, "
                "no edges emitted"
            )
            continue
        blocks = [
            np.arange(start, min(start + QUERY_BLOCK, members.size))
            for start in range(0, members.size, QUERY_BLOCK)
        ]
        query = partial(
            _query_block,
            members=members,
            vectors=matrix,
            owners=owners,
            k=k,
            allow_self_edges=allow_self_edges,
        )
        results = parallel_map(query, blocks, threads)
        for block, rows in zip(blocks, results):
            for local, neighbors in zip(block.tolist(), rows):
                per_node[int(members[local])] = neighbors
        logger.debug(f"Modality {name}: {members.size} nodes queried")

    degrees = np.array([t.size for t, _ in per_node], dtype=np.int64)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(degrees, out=offsets[1:])
    targets = (
        np.concatenate([t for t, _ in per_node]) if n else np.empty(0, np.int64)
    )
    distances = (
        np.concatenate([d for _, d in per_node]) if n else np.empty(0, np.float64)
    )

    graph = CohortGraph(
        k=k,
        subjects=subjects,
        modalities=tuple(wanted),
        node_subject=owners,
        node_modality=kinds,
        positions=np.asarray(positions, dtype=np.float32).reshape(n, 3),
        sigmas=np.asarray(sigmas, dtype=np.float32),
        offsets=offsets,
        targets=targets.astype(np.int64),
        distances=distances.astype(np.float32),
        allow_self_edges=allow_self_edges,
    )
    logger.info(
        f"Graph K={k} over {len(subjects)} subjects, modalities {list(wanted)}: "
        f"{n} nodes, {graph.edge_count} edges"
    )
    return graph


def intersection_count(g: CohortGraph, a: str, b: str) -> int:
    """Unordered node pairs of a and b joined by an edge in either direction."""
    return int(g.pair_counts[g.subject_index(a), g.subject_index(b)])


def _jaccard(intersection: int, size_a: int, size_b: int, label: str) -> float:
    if intersection == 0:
        return 0.0
    denominator = size_a + size_b - intersection
    if intersection >= denominator:
        if intersection > denominator:
            logger.warning(
                f"Jaccard for {label} exceeds 1 ({intersection} matches, bags "
                f"{size_a}/{size_b}), clamped"
            )
        return 1.0
    return intersection / denominator


def jaccard_similarity(g: CohortGraph, a: str, b: str) -> float:
    i, j = g.subject_index(a), g.subject_index(b)
    return _jaccard(
        int(g.pair_counts[i, j]), int(g.bag_sizes[i]), int(g.bag_sizes[j]), f"{a}/{b}"
    )


def _check_disjoint(graphs: Sequence[CohortGraph]) -> None:
    seen: set[str] = set()
    for g in graphs:
        overlap = seen & set(g.modalities)
        if overlap:
            raise OverlappingModalities(
                f"Modalities {sorted(overlap)} appear in more than one graph"
            )
        seen |= set(g.modalities)


def combined_similarity(graphs: Sequence[CohortGraph], a: str, b: str) -> float:
    """Jaccard on the union of per-modality bags and intersections."""
    if not graphs:
        raise ValueError("combined_similarity needs at least one graph")
    _check_disjoint(graphs)
    intersection = size_a = size_b = 0
    for g in graphs:
        i, j = g.subject_index(a), g.subject_index(b)
        intersection += int(g.pair_counts[i, j])
        size_a += int(g.bag_sizes[i])
        size_b += int(g.bag_sizes[j])
    return _jaccard(intersection, size_a, size_b, f"{a}/{b}")


def similarity_matrix(graphs: CohortGraph | Sequence[CohortGraph]) -> SimilarityMatrix:
    """All-pairs (combined) Jaccard similarity with a zero diagonal."""
    group = [graphs] if isinstance(graphs, CohortGraph) else list(graphs)
    if not group:
        raise ValueError("similarity_matrix needs at least one graph")
    _check_disjoint(group)

    subjects = group[0].subjects
    n = len(subjects)
    intersection = np.zeros((n, n), dtype=np.int64)
    sizes = np.zeros(n, dtype=np.int64)
    for g in group:
        index = np.array([g.subject_index(s) for s in subjects], dtype=np.int64)
        intersection += g.pair_counts[np.ix_(index, index)]
        sizes += g.bag_sizes[index]

    totals = sizes[:, None] + sizes[None, :]
    denominator = totals - intersection
    values = np.zeros((n, n), dtype=np.float64)
    nonzero = intersection > 0
    np.divide(intersection, denominator, out=values, where=nonzero & (denominator > 0))
    overflow = nonzero & (intersection >= denominator)
    clamped = int(np.count_nonzero(np.triu(overflow & (intersection > denominator))))
    if clamped:
        logger.warning(
            f"Jaccard exceeds 1 for {clamped} subject pairs, clamped; "
            "ranking falls back to match overlap"
        )
    values[overflow] = 1.0
    np.fill_diagonal(values, 0.0)
    values.setflags(write=False)

    overlap = np.zeros((n, n), dtype=np.float64)
    np.divide(intersection, totals, out=overlap, where=totals > 0)
    np.fill_diagonal(overlap, 0.0)
    overlap.setflags(write=False)

    ks = {g.k for g in group}
    if len(ks) > 1:
        logger.warning(f"Combining graphs built with different K: {sorted(ks)}")
    return SimilarityMatrix(
        subjects=subjects,
        values=values,
        k=group[0].k,
        modalities=tuple(m for g in group for m in g.modalities),
        overlap=overlap,
    )


def ranked_neighbors(
    sim: SimilarityMatrix, subject_id: str, exclude: frozenset[str] = frozenset()
) -> list[str]:
    """Other subjects by descending similarity.

    Equal similarities (in practice pairs clamped at 1) are ordered by
    descending overlap when the matrix carries it, then by ascending id.
    """
    i = sim.index(subject_id)
    row = sim.values[i]
    tie = sim.overlap[i] if sim.overlap is not None else np.zeros_like(row)
    candidates = [
        (-float(row[j]), -float(tie[j]), other)
        for j, other in enumerate(sim.subjects)
        if other != subject_id and other not in exclude
    ]
    return [other for _, _, other in sorted(candidates)]


def top_neighbors(sim: SimilarityMatrix) -> dict[str, str | None]:
    """Most similar subject for each subject."""
    result: dict[str, str | None] = {}
    for s in sim.subjects:
        ranked = ranked_neighbors(sim, s)
        result[s] = ranked[0] if ranked else None
    return result


def matched_nodes(g: CohortGraph, a: str, b: str) -> tuple[np.ndarray, np.ndarray]:
    """Sorted node indices of a and of b that end an A-B intersection edge."""
    i, j = g.subject_index(a), g.subject_index(b)
    pairs = g.matched_pairs
    owner = g.node_subject[pairs]
    forward = (owner[:, 0] == i) & (owner[:, 1] == j)
    backward = (owner[:, 0] == j) & (owner[:, 1] == i)
    nodes_a = np.concatenate([pairs[forward, 0], pairs[backward, 1]])
    nodes_b = np.concatenate([pairs[forward, 1], pairs[backward, 0]])
    return np.unique(nodes_a), np.unique(nodes_b)


def match_statistics(g: CohortGraph, a: str, b: str) -> MatchStatistics:
    """Per-modality match counts and scale distribution of matched keypoints."""
    i, j = g.subject_index(a), g.subject_index(b)
    pairs = g.matched_pairs
    owner = g.node_subject[pairs]
    between = ((owner[:, 0] == i) & (owner[:, 1] == j)) | (
        (owner[:, 0] == j) & (owner[:, 1] == i)
    )
    pairs = pairs[between]
    nodes_a, nodes_b = matched_nodes(g, a, b)

    per_modality = []
    for m, name in enumerate(g.modalities):
        in_m = g.node_modality[pairs[:, 0]] == m
        side_a = nodes_a[g.node_modality[nodes_a] == m]
        side_b = nodes_b[g.node_modality[nodes_b] == m]
        matched_sigmas = g.sigmas[np.concatenate([side_a, side_b])].astype(np.float64)
        per_modality.append(
            ModalityMatches(
                modality_id=name,
                matches=int(np.count_nonzero(in_m)),
                matched_a=int(side_a.size),
                matched_b=int(side_b.size),
                sigma_mean=float(matched_sigmas.mean()) if matched_sigmas.size else 0.0,
                sigma_median=(
                    float(np.median(matched_sigmas)) if matched_sigmas.size else 0.0
                ),
            )
        )
    return MatchStatistics(
        subject_a=a,
        subject_b=b,
        matches=int(pairs.shape[0]),
        per_modality=tuple(per_modality),
    )


def _pack_strings(values: Sequence[str]) -> bytes:
    chunks = [struct.pack("<I", len(values))]
    for value in values:
        raw = value.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
    return b"".join(chunks)


def write_graph(g: CohortGraph, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    nodes = np.zeros(g.node_count, dtype=NODE_DTYPE)
    nodes["subject"] = g.node_subject
    nodes["modality"] = g.node_modality
    nodes["position"] = g.positions
    nodes["sigma"] = g.sigmas
    payload = b"".join(
        [
            struct.pack("<4sHII", GRAPH_MAGIC, GRAPH_VERSION, g.node_count, g.k),
            _pack_strings(g.subjects),
            _pack_strings(g.modalities),
            struct.pack("<B", int(g.allow_self_edges)),
            nodes.tobytes(),
            g.offsets.astype("<u8").tobytes(),
            g.targets.astype("<u4").tobytes(),
            g.distances.astype("<f4").tobytes(),
        ]
    )
    path.write_bytes(payload)
    logger.debug(f"Wrote graph with {g.node_count} nodes to {path}")


class _Cursor:
    def __init__(self, data: bytes, source: Path) -> None:
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(f"{self.source}: unexpected end of file at {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: np.dtype | str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt, count=count)

    def strings(self) -> tuple[str, ...]:
        (count,) = self.unpack("<I")
        values = []
        for _ in range(count):
            (length,) = self.unpack("<H")
            values.append(self.take(length).decode("utf-8"))
        return tuple(values)


def _check_indices(
    path: Path,
    nodes: np.ndarray,
    targets: np.ndarray,
    subject_count: int,
    modality_count: int,
) -> None:
    n = nodes.shape[0]
    if n and int(nodes["subject"].max()) >= subject_count:
        raise CorruptHeader(f"{path}: node subject index out of range")
    if n and int(nodes["modality"].max()) >= modality_count:
        raise CorruptHeader(f"{path}: node modality index out of range")
    if targets.size and int(targets.max()) >= n:
        raise CorruptHeader(f"{path}: edge target beyond {n} nodes")


def read_graph(path: Path) -> CohortGraph:
    if not path.is_file():
        raise MissingInput(f"Graph file not found: {path}")
    cursor = _Cursor(path.read_bytes(), path)
    magic = cursor.take(4)
    if magic != GRAPH_MAGIC:
        raise BadMagic(f"{path}: expected {GRAPH_MAGIC!r}, got {magic!r}")
    version, n, k = cursor.unpack("<HII")
    if version != GRAPH_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {GRAPH_VERSION}")
    subjects = cursor.strings()
    modalities = cursor.strings()
    (allow_self,) = cursor.unpack("<B")
    nodes = cursor.array(NODE_DTYPE, n)
    raw_offsets = cursor.array("<u8", n + 1)
    if raw_offsets[0] != 0 or np.any(np.diff(raw_offsets.astype(np.float64)) < 0):
        raise CorruptHeader(f"{path}: edge offsets must start at 0 and not decrease")
    degrees = np.diff(raw_offsets)
    if degrees.size and int(degrees.max()) > k:
        raise CorruptHeader(f"{path}: a node has more than K={k} edges")
    offsets = raw_offsets.astype(np.int64)
    edges = int(offsets[-1])
    targets = cursor.array("<u4", edges).astype(np.int64)
    distances = cursor.array("<f4", edges).astype(np.float32)
    if cursor.pos != len(cursor.data):
        logger.warning(f"{path}: {len(cursor.data) - cursor.pos} trailing bytes")
    _check_indices(path, nodes, targets, len(subjects), len(modalities))

    return CohortGraph(
        k=k,
        subjects=subjects,
        modalities=modalities,
        node_subject=nodes["subject"].astype(np.int64),
        node_modality=nodes["modality"].astype(np.int64),
        positions=np.ascontiguousarray(nodes["position"], dtype=np.float32),
        sigmas=nodes["sigma"].astype(np.float32),
        offsets=offsets,
        targets=targets,
        distances=distances,
        allow_self_edges=bool(allow_self),
    )


def overlap_path(path: Path) -> Path:
    """Companion file holding the overlap matrix next to a similarity CSV."""
    return path.with_name(f"{path.stem}.overlap{path.suffix}")


def _write_matrix(
    subjects: Sequence[str], values: np.ndarray, path: Path, digits: int
) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["subject_id", *subjects])
        for s, row in zip(subjects, values):
            writer.writerow([s, *(f"{v:.{digits}f}" for v in row)])


def _read_matrix(path: Path) -> tuple[tuple[str, ...], np.ndarray]:
    with path.open(newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise CorruptHeader(f"{path}: empty similarity matrix")
    subjects = tuple(rows[0][1:])
    body = rows[1:]
    if len(body) != len(subjects) or any(len(r) != len(subjects) + 1 for r in body):
        raise CorruptHeader(f"{path}: matrix is not square")
    if tuple(r[0] for r in body) != subjects:
        raise CorruptHeader(f"{path}: row and column subject ids differ")
    try:
        values = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64)
    except ValueError as e:
        raise CorruptHeader(f"{path}: {e}") from e
    values = values.reshape(len(subjects), len(subjects))
    values.setflags(write=False)
    return subjects, values


def write_similarity_csv(sim: SimilarityMatrix, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_matrix(sim.subjects, sim.values, path, 6)
    if sim.overlap is not None:
        _write_matrix(sim.subjects, sim.overlap, overlap_path(path), 9)


def read_similarity_csv(path: Path) -> SimilarityMatrix:
    """Load a matrix, with its overlap companion when one sits next to it."""
    if not path.is_file():
        raise MissingInput(f"Similarity matrix not found: {path}")
    subjects, values = _read_matrix(path)
    overlap = None
    companion = overlap_path(path)
    if companion.is_file():
        overlap_subjects, overlap = _read_matrix(companion)
        if overlap_subjects != subjects:
            raise CorruptHeader(f"{companion}: subject ids differ from {path}")
    else:
        logger.debug(f"No overlap file next to {path}, ties rank by subject id")
    return SimilarityMatrix(subjects=subjects, values=values, overlap=overlap)
