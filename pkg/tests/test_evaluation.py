import json
import logging

import numpy as np
import pytest

from src.config import SiblingType, Zygosity
from src.errors import (
    CorruptHeader,
    MissingInput,
    NoProbes,
    TooFewPairs,
    UnknownSubject,
)
from src.evaluation import (
    CohortManifest,
    RecallCurve,
    SiblingPairs,
    SubjectRecord,
    age_split_analysis,
    compare_curves,
    derive_sibling_pairs,
    random_baseline,
    random_similarity,
    read_manifest,
    recall_at_k,
    write_manifest,
    write_recall_csv,
    write_series_json,
    write_wilcoxon_json,
)
from src.similarity_graph import SimilarityMatrix
from src.stats import WilcoxonResult

MANIFEST_CSV = """subject_id,mother_id,age,sex,zygosity,paths
A1,M1,25,F,MZ,"{""T1"": ""A1/T1.f32""}"
A2,M1,25,F,mz,{}
B1,M2,30,M,DZ,
B2,M2,30,M,DZ,
C1,M3,22,F,NotTwin,
C2,M3,27,F,,
D1,M4,28,M,NT,
D2,M4,28,M,NT,
E1,M5,31,F,MZ,
E2,M5,31,F,DZ,
F1,,40,M,,
"""


@pytest.fixture
def manifest_path(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text(MANIFEST_CSV)
    return path


@pytest.fixture
def manifest(manifest_path):
    return read_manifest(manifest_path)


@pytest.fixture
def sim():
    values = np.array(
        [
            [0.0, 0.9, 0.1, 0.2, 0.3],
            [0.9, 0.0, 0.1, 0.2, 0.95],
            [0.1, 0.1, 0.0, 0.05, 0.4],
            [0.2, 0.2, 0.05, 0.0, 0.1],
            [0.3, 0.95, 0.4, 0.1, 0.0],
        ]
    )
    return SimilarityMatrix(("A1", "A2", "B1", "B2", "X"), values)


@pytest.fixture
def pairs():
    return SiblingPairs(mz_pairs=(("A1", "A2"),), dz_pairs=(("B1", "B2"),))


def record(subject_id, mother_id, age, zygosity="NotTwin"):
    return SubjectRecord(
        subject_id=subject_id, mother_id=mother_id, age=age, zygosity=zygosity
    )


def curve(values, sibling_type=SiblingType.MZ):
    mean = np.asarray(values, dtype=np.float64)
    return RecallCurve(sibling_type, mean, ("P",), mean[None, :])


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


class TestManifest:
    def test_fields(self, manifest):
        assert len(manifest.subjects) == 11
        a1 = manifest.get("A1")
        assert a1.zygosity == Zygosity.MZ
        assert a1.paths == {"T1": "A1/T1.f32"}
        assert manifest.get("A2").zygosity == Zygosity.MZ
        assert manifest.get("C2").zygosity == Zygosity.UNKNOWN
        assert manifest.get("D1").zygosity == Zygosity.NOT_TWIN
        assert manifest.get("F1").mother_id == ""
        assert manifest.twin_ids() == {"A1", "A2", "B1", "B2", "E1", "E2"}

    def test_volume_path(self, manifest, manifest_path):
        assert manifest.volume_path("A1", "t1") == manifest_path.parent / "A1/T1.f32"
        with pytest.raises(MissingInput):
            manifest.volume_path("A2", "T1")
        with pytest.raises(UnknownSubject):
            manifest.get("Z9")

    def test_write_then_read(self, manifest, tmp_path):
        path = tmp_path / "out" / "manifest.csv"
        write_manifest(manifest, path)
        assert read_manifest(path).subjects == manifest.subjects

    def test_duplicate_subject(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(MANIFEST_CSV + "A1,M9,20,F,,\n")
        with pytest.raises(CorruptHeader):
            read_manifest(path)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("subject_id,mother_id\nA,M\n")
        with pytest.raises(CorruptHeader):
            read_manifest(path)

    def test_bad_age(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("subject_id,mother_id,age\nA,M,old\n")
        with pytest.raises(CorruptHeader):
            read_manifest(path)

    def test_bad_paths_json(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("subject_id,mother_id,age,paths\nA,M,3,{oops\n")
        with pytest.raises(CorruptHeader):
            read_manifest(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingInput):
            read_manifest(tmp_path / "none.csv")


# ---------------------------------------------------------------------------
# Sibling pairs
# ---------------------------------------------------------------------------


class TestSiblingPairs:
    def test_classification(self, manifest, caplog):
        with caplog.at_level(logging.WARNING, logger="volprint"):
            pairs = derive_sibling_pairs(manifest)
        assert pairs.mz_pairs == (("A1", "A2"),)
        assert pairs.dz_pairs == (("B1", "B2"),)
        assert pairs.nt_pairs == (("C1", "C2"), ("D1", "D2"))
        assert pairs.inconsistent == (("E1", "E2"),)
        assert "InconsistentZygosity" in caplog.text

    def test_summary(self, manifest):
        assert derive_sibling_pairs(manifest).summary() == {
            "mz_pairs": 1,
            "dz_pairs": 1,
            "nt_pairs": 2,
            "nt_subjects": 4,
            "inconsistent": 1,
        }

    def test_larger_family(self):
        m = CohortManifest(
            (
                record("T1", "M", 30, "MZ"),
                record("T2", "M", 30, "MZ"),
                record("S1", "M", 26),
            )
        )
        pairs = derive_sibling_pairs(m)
        assert pairs.mz_pairs == (("T1", "T2"),)
        assert pairs.nt_pairs == (("S1", "T1"), ("S1", "T2"))
        assert pairs.siblings(SiblingType.NT) == {
            "S1": {"T1", "T2"},
            "T1": {"S1"},
            "T2": {"S1"},
        }

    def test_twin_and_same_age_non_twin_are_nt(self, caplog):
        m = CohortManifest(
            (
                record("A", "M", 28, "MZ"),
                record("B", "M", 28, "MZ"),
                record("C", "M", 28),
            )
        )
        with caplog.at_level(logging.WARNING, logger="volprint"):
            pairs = derive_sibling_pairs(m)
        assert pairs.mz_pairs == (("A", "B"),)
        assert pairs.nt_pairs == (("A", "C"), ("B", "C"))
        assert pairs.inconsistent == ()
        assert "InconsistentZygosity" not in caplog.text

    def test_unknown_twin_status_at_same_age_is_inconsistent(self):
        m = CohortManifest(
            (record("A", "M", 28, "DZ"), record("B", "M", 28, "Unknown"))
        )
        pairs = derive_sibling_pairs(m)
        assert pairs.inconsistent == (("A", "B"),)
        assert pairs.nt_pairs == ()

    def test_duplicate_ids_rejected(self):
        with pytest.raises(CorruptHeader):
            CohortManifest((record("A", "M", 1), record("A", "M", 2)))


# ---------------------------------------------------------------------------
# Recall
# ---------------------------------------------------------------------------


class TestRecall:
    def test_hand_checked_curves(self, sim, pairs):
        mz = recall_at_k(sim, pairs, SiblingType.MZ, k_max=4)
        np.testing.assert_allclose(mz.mean_recall, [0.5, 1.0, 1.0, 1.0])
        assert mz.probes == ("A1", "A2")
        np.testing.assert_allclose(mz.per_probe[1], [0.0, 1.0, 1.0, 1.0])

        dz = recall_at_k(sim, pairs, SiblingType.DZ, k_max=4)
        np.testing.assert_allclose(dz.mean_recall, [0.0, 0.0, 0.0, 1.0])

    def test_exclusions_are_not_ranked(self, sim, pairs):
        mz = recall_at_k(sim, pairs, SiblingType.MZ, k_max=4, exclude=frozenset("X"))
        np.testing.assert_allclose(mz.mean_recall, [1.0] * 4)
        dz = recall_at_k(sim, pairs, SiblingType.DZ, k_max=4, exclude=frozenset("X"))
        np.testing.assert_allclose(dz.per_probe[0], [0.0, 0.0, 1.0, 1.0])

    def test_padded_beyond_candidates(self, sim, pairs):
        mz = recall_at_k(sim, pairs, SiblingType.MZ, k_max=10)
        assert mz.k_max == 10
        assert mz.at(10) == 1.0

    def test_monotone_and_bounded(self, pairs):
        sim = random_similarity(("A1", "A2", "B1", "B2", "X", "Y", "Z"), seed=3)
        c = recall_at_k(sim, pairs, SiblingType.DZ, k_max=6)
        assert (np.diff(c.mean_recall) >= 0).all()
        assert c.at(6) == 1.0

    def test_excluded_probe_sibling(self, sim, pairs):
        with pytest.raises(NoProbes):
            recall_at_k(sim, pairs, SiblingType.MZ, exclude=frozenset({"A2"}))

    def test_no_pairs_of_type(self, sim, pairs):
        with pytest.raises(NoProbes):
            recall_at_k(sim, pairs, SiblingType.NT)

    def test_unknown_sibling(self, sim):
        pairs = SiblingPairs(mz_pairs=(("A1", "Q"),))
        with pytest.raises(UnknownSubject):
            recall_at_k(sim, pairs, SiblingType.MZ)

    def test_labels(self, sim, pairs):
        assert recall_at_k(sim, pairs, SiblingType.MZ, 3).label == "MZ"
        multi = SimilarityMatrix(sim.subjects, sim.values, modalities=("T1", "T2"))
        assert recall_at_k(multi, pairs, SiblingType.MZ, 3).label == "MZ:T1+T2"
        baseline = random_baseline(sim.subjects, pairs, SiblingType.MZ, 3, seed=1)
        assert baseline.label == "rnd-MZ"
        assert baseline.baseline


class TestRandomBaseline:
    def test_random_similarity(self):
        subjects = ("a", "b", "c", "d")
        first = random_similarity(subjects, seed=5)
        np.testing.assert_array_equal(first.values, first.values.T)
        assert (np.diag(first.values) == 0).all()
        np.testing.assert_array_equal(
            first.values, random_similarity(subjects, seed=5).values
        )
        assert not np.array_equal(
            first.values, random_similarity(subjects, seed=6).values
        )

    @pytest.mark.slow
    def test_expected_recall_is_k_over_n_minus_one(self):
        subjects = [f"S{i:03d}" for i in range(101)]
        pairs = SiblingPairs(
            mz_pairs=tuple((subjects[i], subjects[i + 1]) for i in range(0, 100, 2))
        )
        curves = [
            random_baseline(subjects, pairs, SiblingType.MZ, 50, seed=s).mean_recall
            for s in range(1000)
        ]
        mean = np.mean(curves, axis=0)
        for k in (1, 10, 25, 50):
            assert mean[k - 1] == pytest.approx(k / 100, abs=0.03)


class TestComparison:
    def test_clear_difference(self):
        base = np.linspace(0.1, 0.6, 20)
        result = compare_curves(curve(base + 0.1), curve(base))
        assert result.method == "normal"
        assert result.statistic == 0.0
        assert result.p_value < 1e-3

    def test_identical_curves(self):
        base = np.linspace(0.1, 0.6, 20)
        with pytest.raises(TooFewPairs):
            compare_curves(curve(base), curve(base))

    def test_pairs_over_common_k(self):
        result = compare_curves(curve(np.full(12, 0.5)), curve(np.full(8, 0.2)))
        assert result.n_effective == 8


class TestAgeSplit:
    @pytest.fixture
    def nt_cohort(self):
        ages = [(20, 21), (30, 32), (40, 45), (50, 56)]
        records = []
        for i, (a, b) in enumerate(ages):
            records += [record(f"N{i}a", f"M{i}", a), record(f"N{i}b", f"M{i}", b)]
        m = CohortManifest(tuple(records))
        return m, derive_sibling_pairs(m), random_similarity(m.subject_ids, 0)

    def test_nt_split_by_age_gap(self, nt_cohort):
        m, pairs, sim = nt_cohort
        result = age_split_analysis(sim, pairs, m, SiblingType.NT, k_max=5)
        assert result.criterion == "age_gap"
        assert result.threshold == 3.5
        assert (result.low_pairs, result.high_pairs) == (2, 2)
        assert result.low is not None and result.high is not None
        assert result.low.probes == ("N0a", "N0b", "N1a", "N1b")
        assert not result.degenerate

    def test_twins_split_by_mean_age_with_ties_low(self):
        m = CohortManifest(
            tuple(
                record(f"T{i}{s}", f"M{i}", age, "MZ")
                for i, age in enumerate((25, 25, 30))
                for s in "ab"
            )
        )
        pairs = derive_sibling_pairs(m)
        sim = random_similarity(m.subject_ids, 1)
        result = age_split_analysis(sim, pairs, m, SiblingType.MZ, k_max=3)
        assert result.criterion == "mean_age"
        assert result.threshold == 25.0
        assert (result.low_pairs, result.high_pairs) == (2, 1)

    def test_degenerate_split(self, caplog):
        m = CohortManifest(
            tuple(
                record(f"S{i}{s}", f"M{i}", 20 + 2 * i + (s == "b") * 3)
                for i in range(3)
                for s in "ab"
            )
        )
        pairs = derive_sibling_pairs(m)
        sim = random_similarity(m.subject_ids, 2)
        with caplog.at_level(logging.WARNING, logger="volprint"):
            result = age_split_analysis(sim, pairs, m, SiblingType.NT, k_max=3)
        assert result.degenerate
        assert result.high is None
        assert result.test is None
        assert "degenerate" in caplog.text


# ---------------------------------------------------------------------------
# Result files
# ---------------------------------------------------------------------------


class TestResultFiles:
    def test_recall_csv(self, tmp_path, sim, pairs):
        path = tmp_path / "recall_MZ.csv"
        write_recall_csv(recall_at_k(sim, pairs, SiblingType.MZ, 4), path)
        lines = path.read_text().splitlines()
        assert lines[0] == "k,mean_recall,n_probes"
        assert lines[1] == "1,0.500000,2"
        assert len(lines) == 5

    def test_series_json(self, tmp_path, sim, pairs):
        curves = [
            recall_at_k(sim, pairs, SiblingType.MZ, 3),
            random_baseline(sim.subjects, pairs, SiblingType.MZ, 3),
        ]
        path = tmp_path / "series.json"
        write_series_json(curves, path)
        values = json.loads(path.read_text())["values"]
        assert len(values) == 6
        assert values[0] == {"k": 1, "recall": 0.5, "series": "MZ"}
        assert {v["series"] for v in values} == {"MZ", "rnd-MZ"}

    def test_wilcoxon_json(self, tmp_path):
        path = tmp_path / "w.json"
        write_wilcoxon_json(
            WilcoxonResult(3.0, 0.01, 20, "normal"), path, a="MZ", b="rnd-MZ"
        )
        payload = json.loads(path.read_text())
        assert payload == {
            "statistic": 3.0,
            "p": 0.01,
            "n_effective": 20,
            "method": "normal",
            "a": "MZ",
            "b": "rnd-MZ",
        }
