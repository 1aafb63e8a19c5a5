import hashlib
import json
from pathlib import Path

import pytest

from amodalkit.cli import main


def tree_digest(root: Path) -> dict:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    out = root / "ds"
    assert run("synth", "--scenes", 4, "--seed", 0, "--out", out, "--canvas", "64,64",
               "--sizes", "16,40", "--layers", "2,3") == 0
    return out


class TestSynth:
    def test_zero_scenes_empty_manifest(self, tmp_path):
        out = tmp_path / "empty"
        assert run("synth", "--scenes", 0, "--seed", 0, "--out", out) == 0
        assert (out / "manifest.jsonl").read_text() == ""

    def test_byte_identical_reruns(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run("synth", "--scenes", 3, "--seed", 7, "--out", out, "--canvas", "64,64",
                       "--sizes", "16,40") == 0
        assert tree_digest(a) == tree_digest(b)

    def test_seed_changes_output(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run("synth", "--scenes", 2, "--seed", 1, "--out", a, "--canvas", "64,64", "--sizes", "16,40")
        run("synth", "--scenes", 2, "--seed", 2, "--out", b, "--canvas", "64,64", "--sizes", "16,40")
        assert tree_digest(a) != tree_digest(b)


class TestInfer:
    def test_oracle_check_passes(self, dataset, tmp_path):
        pred = tmp_path / "pred"
        assert run("infer", "--dataset", dataset, "--backend", "oracle", "--mode", "stepwise",
                   "--out", pred, "--check", "--jobs", 2) == 0
        lines = (pred / "predictions.jsonl").read_text().splitlines()
        assert len(lines) >= 2

    def test_results_independent_of_job_count(self, dataset, tmp_path):
        a, b = tmp_path / "j1", tmp_path / "j4"
        run("infer", "--dataset", dataset, "--backend", "oracle", "--out", a, "--jobs", 1)
        run("infer", "--dataset", dataset, "--backend", "oracle", "--out", b, "--jobs", 4)
        assert tree_digest(a) == tree_digest(b)

    def test_heuristic_check_fails_with_exit_5(self, dataset, tmp_path):
        assert run("infer", "--dataset", dataset, "--backend", "heuristic", "--out",
                   tmp_path / "pred", "--check") == 5

    def test_missing_dataset_exit_3(self, tmp_path):
        assert run("infer", "--dataset", tmp_path / "nope", "--backend", "heuristic",
                   "--out", tmp_path / "pred") == 3

    def test_unknown_backend_exit_3(self, dataset, tmp_path):
        assert run("infer", "--dataset", dataset, "--backend", "sd3", "--out", tmp_path / "x") == 3

    def test_remote_connection_failure_exit_4(self, dataset, tmp_path):
        assert run("infer", "--dataset", dataset, "--backend", "remote:http://127.0.0.1:9",
                   "--out", tmp_path / "pred") == 4


class TestEval:
    def test_report_curve_non_decreasing(self, dataset, tmp_path):
        pred = tmp_path / "pred"
        run("infer", "--dataset", dataset, "--backend", "oracle", "--mode", "full",
            "--variations", 4, "--out", pred)
        report_dir = tmp_path / "report"
        assert run("eval", "--pred", pred, "--out", report_dir, "--k", "1,2,4", "--check",
                   "--fid") == 0
        report = json.loads((report_dir / "report.json").read_text())
        curve = [report["best_of_k"][k] for k in ("1", "2", "4")]
        assert all(b >= a for a, b in zip(curve, curve[1:]))
        assert "fid_proxy" in report
        assert (report_dir / "report.csv").exists()

    def test_eval_without_predictions_exit_3(self, tmp_path):
        assert run("eval", "--pred", tmp_path, "--out", tmp_path / "r") == 3


class TestConstruct:
    def test_construct_check_green(self, dataset, tmp_path):
        out = tmp_path / "samples"
        assert run("construct", "--dataset", dataset, "--out", out, "--samples", 6,
                   "--seed", 3, "--check") == 0
        entries = [json.loads(l) for l in (out / "samples.jsonl").read_text().splitlines()]
        assert len(entries) == 6
        assert all(e["problems"] == [] for e in entries)

    def test_deterministic(self, dataset, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            run("construct", "--dataset", dataset, "--out", out, "--samples", 4, "--seed", 9)
        assert tree_digest(a) == tree_digest(b)


class TestStats:
    def test_stats_written(self, dataset, tmp_path):
        out = tmp_path / "stats.json"
        assert run("stats", "--dataset", dataset, "--out", out) == 0
        doc = json.loads(out.read_text())
        assert sum(doc["occlusion_pct_histogram"]) == doc["total"]


class TestConfigFile:
    def test_config_file_provides_defaults(self, tmp_path):
        cfg = tmp_path / "synth.cfg"
        cfg.write_text("scenes = 2\nseed = 4\ncanvas = 64,64\nsizes = 16,40\n")
        out = tmp_path / "ds"
        assert run("synth", "--config", cfg, "--out", out) == 0
        assert (out / "manifest.jsonl").exists()

    def test_explicit_flags_win(self, tmp_path):
        cfg = tmp_path / "synth.cfg"
        cfg.write_text("scenes = 5\n")
        out = tmp_path / "ds"
        assert run("synth", "--config", cfg, "--scenes", 0, "--out", out) == 0
        assert (out / "manifest.jsonl").read_text() == ""

    def test_missing_config_exit_3(self, tmp_path):
        assert run("synth", "--config", tmp_path / "nope.cfg", "--scenes", 1,
                   "--out", tmp_path / "x") == 3


class TestTrainCli:
    def test_tiny_training_run(self, tmp_path):
        ds = tmp_path / "ds32"
        assert run("synth", "--scenes", 6, "--seed", 0, "--out", ds, "--canvas", "32,32",
                   "--sizes", "10,22", "--layers", "2,2") == 0
        ckpt = tmp_path / "toy.dnz"
        log = tmp_path / "curve.csv"
        assert run("train", "--dataset", ds, "--mode", "full", "--out", ckpt,
                   "--steps", 12, "--batch", 4, "--resolution", 32, "--hidden", 8,
                   "--log", log) == 0
        assert ckpt.exists()
        assert log.read_text().startswith("step,loss")
        pred = tmp_path / "pred"
        assert run("infer", "--dataset", ds, "--backend", f"toy:{ckpt}", "--mode", "full",
                   "--variations", 2, "--out", pred, "--jobs", 1) == 0
        assert (pred / "predictions.jsonl").exists()
