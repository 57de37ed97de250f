import json
import threading
from pathlib import Path

import pytest

import src.handlers as handlers
from main import build_parser, main
from src.config import SiblingType
from src.handlers import parse_volume_arg

PIPELINE_CONFIG = {
    "graph": {"k": 4, "k_sweep": [2, 4]},
    "evaluation": {"k_max": 4},
    "phantom": {
        "dims": [32, 32, 32],
        "blob_count": 8,
        "sigma_range": [2.0, 3.0],
        "clone_pairs": 2,
        "nt_pairs": 1,
        "seed": 11,
    },
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Runs phantom, extract, graph and similarity once for the module."""
    root = tmp_path_factory.mktemp("pipeline")
    config = root / "config.json"
    config.write_text(json.dumps(PIPELINE_CONFIG))
    base = ["--config", str(config), "--threads", "2"]

    cohort = root / "cohort"
    assert main([*base, "phantom", "--out", str(cohort)]) == 0
    manifest = cohort / "manifest.csv"

    fps = root / "fps"
    extract = ["extract", "--manifest", str(manifest), "--out", str(fps)]
    assert main([*base, *extract]) == 0
    fingerprints = sorted(str(p) for p in fps.glob("*.vfp"))

    graph = root / "t1.vknn"
    assert main([*base, "graph", *fingerprints, "--out", str(graph)]) == 0
    matrix = root / "sim.csv"
    assert main([*base, "similarity", str(graph), "--out", str(matrix)]) == 0
    return {
        "root": root,
        "base": base,
        "manifest": manifest,
        "fingerprints": fingerprints,
        "graph": graph,
        "matrix": matrix,
    }


class TestParser:
    def test_volume_arguments(self):
        assert parse_volume_arg("t1=/data/a.nii") == ("T1", Path("/data/a.nii"))
        modality, path = parse_volume_arg("/data/x=y.nii")
        assert modality is None
        assert str(path) == "/data/x=y.nii"
        assert parse_volume_arg("a.f32")[0] is None

    def test_sibling_types(self):
        args = build_parser().parse_args(
            ["evaluate", "m.csv", "--manifest", "x.csv", "--out", "o"]
            + ["--sibling-type", "MZ", "NT"]
        )
        assert args.sibling_type == [SiblingType.MZ, SiblingType.NT]

    def test_command_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])


class TestExitCodes:
    def test_missing_config_file(self, tmp_path):
        code = main(["--config", str(tmp_path / "none.json"), "phantom", "--out", "x"])
        assert code == 3

    def test_invalid_config(self, tmp_path):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"graph": {"k": 0}}))
        assert main(["--config", str(config), "phantom", "--out", "x"]) == 2

    def test_unknown_config_key(self, tmp_path):
        config = tmp_path / "bad.toml"
        config.write_text("[graph]\nkk = 3\n")
        assert main(["--config", str(config), "phantom", "--out", "x"]) == 2

    def test_extract_without_inputs(self, tmp_path):
        assert main(["extract", "--out", str(tmp_path)]) == 2

    def test_missing_fingerprint(self, tmp_path):
        out = tmp_path / "g.vknn"
        assert main(["graph", str(tmp_path / "a.vfp"), "--out", str(out)]) == 3

    def test_invalid_phantom_spec(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"dims": [8, 8, 8]}))
        code = main(["phantom", "--spec", str(spec), "--out", str(tmp_path / "c")])
        assert code == 2


class TestPipeline:
    def test_phantom_and_extract(self, pipeline):
        assert len(pipeline["fingerprints"]) == 6
        assert (pipeline["manifest"].parent / "S0000" / "T1.json").is_file()

    def test_matrix(self, pipeline):
        header = pipeline["matrix"].read_text().splitlines()[0]
        assert header == "subject_id," + ",".join(f"S{i:04d}" for i in range(6))

    def test_evaluate(self, pipeline):
        out = pipeline["root"] / "eval"
        args = [
            *pipeline["base"],
            "evaluate",
            str(pipeline["matrix"]),
            "--manifest",
            str(pipeline["manifest"]),
            "--out",
            str(out),
        ]
        assert main(args) == 0
        for name in (
            "recall_MZ.csv",
            "recall_rnd-MZ.csv",
            "recall_NT.csv",
            "age_split_MZ.json",
            "recall_series.json",
        ):
            assert (out / name).is_file(), name
        assert not (out / "recall_DZ.csv").exists()
        lines = (out / "recall_MZ.csv").read_text().splitlines()
        assert lines[0] == "k,mean_recall,n_probes"
        assert len(lines) == 5

    def test_evaluate_requested_type_without_pairs(self, pipeline):
        args = [
            *pipeline["base"],
            "evaluate",
            str(pipeline["matrix"]),
            "--manifest",
            str(pipeline["manifest"]),
            "--out",
            str(pipeline["root"] / "eval_dz"),
            "--sibling-type",
            "DZ",
        ]
        assert main(args) == 4

    def test_sweep(self, pipeline):
        out = pipeline["root"] / "sweep"
        args = [
            *pipeline["base"],
            "sweep-k",
            *pipeline["fingerprints"],
            "--manifest",
            str(pipeline["manifest"]),
            "--out",
            str(out),
        ]
        assert main(args) == 0
        for k in (2, 4):
            assert (out / "T1" / f"k{k}" / "recall_MZ.csv").is_file()
        summary = json.loads((out / "T1" / "top1.json").read_text())
        assert summary["k"] == [2, 4]
        assert set(summary["top1"]) == {"2", "4"}

    def test_visualize(self, pipeline):
        out = pipeline["root"] / "viz"
        args = [
            *pipeline["base"],
            "visualize",
            str(pipeline["graph"]),
            "--manifest",
            str(pipeline["manifest"]),
            "--pair",
            "S0000",
            "S0001",
            "--slice",
            "16",
            "--out",
            str(out),
        ]
        assert main(args) == 0
        assert (out / "S0000_S0001_S0000_axis2_16.ppm").is_file()
        assert (out / "S0000_S0001_S0001_axis2_16.ppm").is_file()

    def test_visualize_unknown_subject(self, pipeline):
        args = [
            "visualize",
            str(pipeline["graph"]),
            "--manifest",
            str(pipeline["manifest"]),
            "--pair",
            "S0000",
            "S9999",
            "--slice",
            "16",
            "--out",
            str(pipeline["root"] / "viz2"),
        ]
        assert main(args) == 4

    def test_extract_reports(self, pipeline, monkeypatch, tmp_path):
        events = []
        monkeypatch.setattr(
            handlers, "emit_report", lambda event, **fields: events.append(event)
        )
        volume = pipeline["manifest"].parent / "S0002" / "T1.f32"
        args = [
            *pipeline["base"],
            "extract",
            "--subject",
            "S0002",
            "--out",
            str(tmp_path),
            f"T1={volume}",
        ]
        assert main(args) == 0
        assert events == ["modality", "fingerprint"]
        assert (tmp_path / "S0002.vfp").is_file()

    @pytest.mark.parametrize("threads", ["1", "2"])
    def test_extract_holds_volumes_of_running_subjects_only(
        self, pipeline, monkeypatch, tmp_path, threads
    ):
        lock = threading.Lock()
        live = {"now": 0, "peak": 0}
        order = []
        load_volumes = handlers._load_subject_volumes
        extract_subject = handlers.extract_subject

        def load(manifest, subject_id, modalities=None):
            with lock:
                live["now"] += 1
                live["peak"] = max(live["peak"], live["now"])
                order.append(("load", subject_id))
            return load_volumes(manifest, subject_id, modalities)

        def extract(subject_id, volumes, *args, **kwargs):
            fp = extract_subject(subject_id, volumes, *args, **kwargs)
            with lock:
                live["now"] -= 1
                order.append(("extract", subject_id))
            return fp

        monkeypatch.setattr(handlers, "_load_subject_volumes", load)
        monkeypatch.setattr(handlers, "extract_subject", extract)
        args = [
            *pipeline["base"],
            "--threads",
            threads,
            "extract",
            "--manifest",
            str(pipeline["manifest"]),
            "--out",
            str(tmp_path),
        ]
        assert main(args) == 0
        assert live["peak"] <= int(threads)
        assert len(order) == 12
        if threads == "1":
            ids = [f"S{i:04d}" for i in range(6)]
            assert order == [(step, s) for s in ids for step in ("load", "extract")]


def run_full_pipeline(root: Path, threads: int) -> dict[str, bytes]:
    root.mkdir()
    config = root / "config.json"
    config.write_text(json.dumps(PIPELINE_CONFIG))
    base = ["--config", str(config), "--threads", str(threads)]
    cohort = root / "cohort"
    manifest = cohort / "manifest.csv"
    fps = root / "fps"
    graph = root / "t1.vknn"
    matrix = root / "sim.csv"
    fingerprints = [str(fps / f"S{i:04d}.vfp") for i in range(6)]
    steps = [
        ["phantom", "--out", str(cohort)],
        ["extract", "--manifest", str(manifest), "--out", str(fps)],
        ["graph", *fingerprints, "--out", str(graph)],
        ["similarity", str(graph), "--out", str(matrix)],
        ["evaluate", str(matrix), "--manifest", str(manifest)]
        + ["--out", str(root / "eval")],
        ["visualize", str(graph), "--manifest", str(manifest)]
        + ["--pair", "S0000", "S0001", "--slice", "16", "--out", str(root / "viz")],
    ]
    for step in steps:
        assert main([*base, *step]) == 0, step[0]
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p != config
    }


def test_outputs_identical_across_thread_counts(tmp_path):
    runs = {t: run_full_pipeline(tmp_path / f"t{t}", t) for t in (1, 4, 8)}
    reference = runs[1]
    suffixes = {Path(name).suffix for name in reference}
    assert {".vfp", ".vknn", ".csv", ".json", ".ppm"} <= suffixes
    for threads in (4, 8):
        assert runs[threads].keys() == reference.keys()
        for name, payload in reference.items():
            assert runs[threads][name] == payload, f"{name} differs at {threads}"
