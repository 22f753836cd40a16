import json
import os

import numpy as np
import pytest

from triquant import load_codebooks, load_codes, load_features, load_split
from triquant.cli import run_cli


def run(argv):
    return run_cli([str(a) for a in argv])


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    code = run(["synth", "--clusters", 3, "--per-cluster", 12, "--dim", 6,
                "--sigma", 0.3, "--seed", 7, "--out", out])
    assert code == 0
    return out


@pytest.fixture
def model_dir(tmp_path, data_dir):
    out = tmp_path / "model"
    code = run(["train", "--data", data_dir, "--out", out, "--epochs", 3,
                "--m", 2, "--k", 4, "--delta", 300, "--lr", 0.0001,
                "--group-count", 2, "--min-triplets", 10, "--seed", 1])
    assert code == 0
    return out


class TestSynth:
    def test_writes_features_and_labels(self, data_dir):
        feats = load_features(data_dir / "features.bin")
        assert feats.shape == (36, 6)
        labels = (data_dir / "labels.txt").read_text().splitlines()
        assert len(labels) == 36
        assert labels[0] == "0"
        assert labels[-1] == "2"

    def test_csv_format(self, tmp_path):
        out = tmp_path / "csvdata"
        assert run(["synth", "--clusters", 2, "--per-cluster", 3, "--dim", 2,
                    "--seed", 0, "--out", out, "--format", "csv"]) == 0
        feats = load_features(out / "features.csv", format="csv")
        assert feats.shape == (6, 2)

    def test_missing_required_flag_is_usage_error(self, capsys):
        assert run(["synth", "--clusters", 2]) == 2
        assert "usage" in capsys.readouterr().err.lower()


class TestTrain:
    def test_writes_all_artifacts(self, model_dir):
        for name in ("encoder.bin", "codebooks.bin", "codes.bin", "split.json",
                     "trainlog.csv", "model.json"):
            assert (model_dir / name).exists(), name

    def test_model_metadata(self, model_dir):
        meta = json.loads((model_dir / "model.json").read_text())
        assert meta["m"] == 2
        assert meta["k"] == 4
        assert meta["in_dim"] == 6
        assert meta["params"]["delta"] == 300.0
        assert meta["params"]["seed"] == 1

    def test_split_is_consistent(self, model_dir):
        sp = load_split(model_dir / "split.json")
        codes, k = load_codes(model_dir / "codes.bin")
        assert k == 4
        assert codes.shape == (sp.train_indices.size, 2)

    def test_deterministic_across_runs(self, tmp_path, data_dir):
        args = ["--data", data_dir, "--epochs", 2, "--m", 2, "--k", 4,
                "--delta", 300, "--group-count", 2, "--min-triplets", 10,
                "--seed", 9]
        a, b = tmp_path / "m1", tmp_path / "m2"
        assert run(["train", "--out", a] + args) == 0
        assert run(["train", "--out", b] + args) == 0
        assert (a / "codebooks.bin").read_bytes() == (b / "codebooks.bin").read_bytes()
        assert (a / "codes.bin").read_bytes() == (b / "codes.bin").read_bytes()
        assert (a / "encoder.bin").read_bytes() == (b / "encoder.bin").read_bytes()

    def test_config_file_with_flag_override(self, tmp_path, data_dir):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("lambda = 0.5\nmax_epochs = 2\nm = 2\nk = 4\ndelta = 300\n"
                       "group_count = 2\nmin_triplets = 10\n")
        out = tmp_path / "mcfg"
        assert run(["train", "--data", data_dir, "--out", out,
                    "--config", cfg, "--lambda", 0.25]) == 0
        meta = json.loads((out / "model.json").read_text())
        assert meta["params"]["lam"] == 0.25  # flag wins
        assert meta["params"]["max_epochs"] == 2  # config survives

    def test_existing_split_reused(self, tmp_path, data_dir, model_dir):
        out = tmp_path / "m3"
        assert run(["train", "--data", data_dir, "--out", out, "--epochs", 1,
                    "--m", 2, "--k", 4, "--delta", 300, "--min-triplets", 10,
                    "--split", model_dir / "split.json"]) == 0
        a = load_split(model_dir / "split.json")
        b = load_split(out / "split.json")
        assert np.array_equal(a.query_indices, b.query_indices)

    def test_missing_data_dir_is_runtime_error(self, tmp_path, capsys):
        assert run(["train", "--data", tmp_path / "nope", "--out", tmp_path / "m"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_bad_config_line_reported(self, tmp_path, data_dir, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("wibble = 3\n")
        assert run(["train", "--data", data_dir, "--out", tmp_path / "m",
                    "--config", cfg]) == 1
        assert "unknown key" in capsys.readouterr().err


class TestEncode:
    def test_database_rows(self, tmp_path, data_dir, model_dir):
        out = tmp_path / "db_codes.bin"
        assert run(["encode", "--model", model_dir, "--data", data_dir,
                    "--out", out]) == 0
        sp = load_split(model_dir / "split.json")
        codes, k = load_codes(out)
        assert codes.shape == (sp.database_indices.size, 2)
        assert k == 4

    def test_all_rows(self, tmp_path, data_dir, model_dir):
        out = tmp_path / "all_codes.bin"
        assert run(["encode", "--model", model_dir, "--data", data_dir,
                    "--out", out, "--rows", "all"]) == 0
        codes, _ = load_codes(out)
        assert codes.shape[0] == 36

    def test_train_rows_match_training_codes(self, tmp_path, data_dir, model_dir):
        # training codes are a fixed point, so re-encoding reproduces them
        out = tmp_path / "train_codes.bin"
        assert run(["encode", "--model", model_dir, "--data", data_dir,
                    "--out", out, "--rows", "train"]) == 0
        fresh, _ = load_codes(out)
        saved, _ = load_codes(model_dir / "codes.bin")
        assert fresh.shape == saved.shape

    def test_missing_model_dir(self, tmp_path, data_dir, capsys):
        assert run(["encode", "--model", tmp_path / "ghost", "--data", data_dir,
                    "--out", tmp_path / "c.bin"]) == 1
        assert "missing" in capsys.readouterr().err


class TestSearch:
    def test_prints_ranked_rows(self, data_dir, model_dir, capsys):
        assert run(["search", "--model", model_dir, "--data", data_dir,
                    "--query-index", 0, "--top-r", 5]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert out[0].startswith("rank")
        assert len(out) == 6
        first = out[1].split("\t")
        assert first[0] == "1"
        assert first[2].startswith("item-")

    def test_with_precomputed_codes(self, tmp_path, data_dir, model_dir, capsys):
        codes_path = tmp_path / "db.bin"
        run(["encode", "--model", model_dir, "--data", data_dir, "--out", codes_path])
        capsys.readouterr()  # drop the encode chatter
        assert run(["search", "--model", model_dir, "--data", data_dir,
                    "--query-index", 2, "--top-r", 3, "--codes", codes_path]) == 0
        assert len(capsys.readouterr().out.strip().splitlines()) == 4

    def test_out_of_range_query(self, data_dir, model_dir, capsys):
        assert run(["search", "--model", model_dir, "--data", data_dir,
                    "--query-index", 999]) == 1
        assert "out of range" in capsys.readouterr().err


class TestEval:
    def test_prints_map_and_writes_report(self, data_dir, model_dir, capsys):
        assert run(["eval", "--model", model_dir, "--data", data_dir,
                    "--r", 10]) == 0
        out = capsys.readouterr().out
        assert "MAP@10 = " in out
        report = json.loads((model_dir / "eval_report.json").read_text())
        assert 0.0 <= report["map"] <= 1.0
        assert report["r"] == 10

    def test_explicit_report_path(self, tmp_path, data_dir, model_dir):
        out = tmp_path / "rep.json"
        assert run(["eval", "--model", model_dir, "--data", data_dir,
                    "--r", 5, "--out", out]) == 0
        assert out.exists()

    def test_wrong_sized_codes_rejected(self, tmp_path, data_dir, model_dir, capsys):
        # codes for all 36 rows cannot stand in for the 33-row database
        bad = tmp_path / "bad_codes.bin"
        run(["encode", "--model", model_dir, "--data", data_dir,
             "--out", bad, "--rows", "all"])
        assert run(["eval", "--model", model_dir, "--data", data_dir,
                    "--codes", bad]) == 1
        assert "rows" in capsys.readouterr().err


class TestUsageErrors:
    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"]) == 2

    def test_unknown_flag(self, capsys):
        assert run(["synth", "--clusters", 2, "--per-cluster", 2, "--dim", 2,
                    "--out", "x", "--frob", 1]) == 2

    def test_no_subcommand(self, capsys):
        assert run([]) == 2
