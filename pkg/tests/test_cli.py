import json
import subprocess
import sys

import numpy as np
import pytest

from m3dn import cli
from m3dn.data import read_dataset, write_dataset
from m3dn.kernel import read_matrix_csv


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """gen -> train -> eval -> inspect-metric once; tests inspect the outputs."""
    d = tmp_path_factory.mktemp("cli")
    gen = write_json(d / "gen.json", {"bag_count": 150, "noise_level": 0.1})
    train = write_json(d / "train.json", {"max_epochs": 3, "batch_size": 16, "hidden": [8], "checkpoint_every": 2})
    codes = [
        cli.main(["gen", str(gen), str(d / "data.jsonl"), "--seed", "4"]),
        cli.main(["train", str(d / "data.jsonl"), str(train), str(d / "run"), "--seed", "1", "--threads", "1"]),
        cli.main(["eval", str(d / "run" / "checkpoint.json"), str(d / "data.jsonl"), str(d / "report.json")]),
        cli.main(["inspect-metric", str(d / "run" / "checkpoint.json"), str(d / "metric.csv")]),
    ]
    return d, codes


class TestPipeline:
    def test_exit_codes(self, run):
        assert run[1] == [0, 0, 0, 0]

    def test_gen_outputs(self, run):
        d, _ = run
        data = read_dataset(d / "data.jsonl")
        assert (len(data.labeled), len(data.unlabeled), len(data.test)) == (31, 74, 45)
        man = json.loads((d / "data.jsonl.manifest.json").read_text())
        assert man["seed"] == 4 and man["config"]["noise_level"] == 0.1
        names, C = read_matrix_csv(d / "data.jsonl.truth.csv")
        assert names == data.label_names and C.shape == (5, 5)

    def test_train_outputs(self, run):
        d, _ = run
        man = json.loads((d / "run" / "manifest.json").read_text())
        produced = {p.name for p in (d / "run").iterdir()}
        listed = {p.rsplit("/", 1)[-1] for p in man["artifacts"].values()}
        assert produced == listed
        assert "checkpoint_epoch0002.json" in produced
        assert man["config"]["seed"] == 1 and man["config"]["max_epochs"] == 3
        assert man["threads"] == 1 and man["tool_version"]
        log = [json.loads(line) for line in (d / "run" / "log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in log] == [1, 2, 3]
        assert "example_auc" in log[0]["validation"]
        names, S = read_matrix_csv(d / "run" / "kernel_S.csv")
        assert S.shape == (5, 5) and np.linalg.eigvalsh(S).min() >= -1e-10

    def test_eval_report(self, run):
        d, _ = run
        rep = json.loads((d / "report.json").read_text())
        assert rep["n_examples"] == 45
        assert set(rep["views"]) == {"modality1", "modality2", "fused"}
        rows = (d / "report.csv").read_text().splitlines()
        assert rows[0].split(",") == ["view", "coverage", "ranking_loss", "average_precision", "macro_auc",
                                      "micro_auc", "example_auc"]
        assert len(rows) == 4

    def test_inspect_outputs(self, run):
        d, _ = run
        _, M = read_matrix_csv(d / "metric.csv")
        _, S = read_matrix_csv(d / "metric.kernel.csv")
        _, V = read_matrix_csv(d / "metric.correlation.csv")
        np.testing.assert_allclose(M, np.diag(S)[:, None] + np.diag(S)[None] - 2 * S, atol=1e-12)
        np.testing.assert_allclose(np.diag(V), 1.0)
        assert (d / "metric.correlation.csv").read_text().startswith("# ")

    def test_deterministic(self, run, tmp_path):
        d, _ = run
        train = d / "train.json"
        for name in ("a", "b"):
            assert cli.main(["train", str(d / "data.jsonl"), str(train), str(tmp_path / name), "--seed", "1"]) == 0
            assert cli.main(["eval", str(tmp_path / name / "checkpoint.json"), str(d / "data.jsonl"),
                             str(tmp_path / f"{name}.json")]) == 0
        assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()
        assert (tmp_path / "a.json").read_text().replace("/a/", "/") == (tmp_path / "b.json").read_text().replace("/b/", "/")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (d / "run" / "checkpoint.json").read_bytes() == (tmp_path / "a" / "checkpoint.json").read_bytes()


class TestErrors:
    def test_missing_file_is_io_error(self, tmp_path, capsys):
        assert cli.main(["eval", str(tmp_path / "nope.json"), str(tmp_path / "x"), str(tmp_path / "r.json")]) == 1
        assert "I/O error" in capsys.readouterr().err

    def test_invalid_config_names_field(self, run, tmp_path, capsys):
        d, _ = run
        bad = write_json(tmp_path / "bad.json", {"lam": -1})
        assert cli.main(["train", str(d / "data.jsonl"), str(bad), str(tmp_path / "out")]) == 2
        assert "'lam'" in capsys.readouterr().err
        broken = tmp_path / "broken.json"
        broken.write_text("{")
        assert cli.main(["gen", str(broken), str(tmp_path / "d.jsonl")]) == 2

    def test_empty_evaluation_set(self, run, tmp_path, capsys):
        d, _ = run
        data = read_dataset(d / "data.jsonl")
        data.test = []
        write_dataset(data, tmp_path / "notest.jsonl")
        code = cli.main(["eval", str(d / "run" / "checkpoint.json"), str(tmp_path / "notest.jsonl"),
                         str(tmp_path / "r.json")])
        assert code == 2 and "empty evaluation set" in capsys.readouterr().err

    def test_dimension_mismatch(self, run, tmp_path):
        d, _ = run
        gen = write_json(tmp_path / "g.json", {"bag_count": 20, "feature_dims": [4, 4]})
        assert cli.main(["gen", str(gen), str(tmp_path / "other.jsonl")]) == 0
        assert cli.main(["eval", str(d / "run" / "checkpoint.json"), str(tmp_path / "other.jsonl"),
                         str(tmp_path / "r.json")]) == 2

    def test_numerical_failure(self, run, tmp_path):
        d, _ = run
        cfg = write_json(tmp_path / "hot.json", {"max_epochs": 3, "learning_rate": 1e9, "activation": "relu"})
        assert cli.main(["train", str(d / "data.jsonl"), str(cfg), str(tmp_path / "hot")]) == 3

    def test_threads_env(self, monkeypatch):
        args = cli.build_parser().parse_args(["train", "a", "b", "c"])
        monkeypatch.setenv("M3DN_THREADS", "2")
        assert cli._threads(args) == 2
        monkeypatch.setenv("M3DN_THREADS", "two")
        with pytest.raises(cli.CommandError):
            cli._threads(args)


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "m3dn.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("m3dn ")


def test_correlation_view_highlights_generator_pairs(tmp_path):
    gen = write_json(tmp_path / "g.json", {"bag_count": 600, "seed": 2})
    train = write_json(tmp_path / "t.json", {"max_epochs": 3})
    assert cli.main(["gen", str(gen), str(tmp_path / "d.jsonl")]) == 0
    assert cli.main(["train", str(tmp_path / "d.jsonl"), str(train), str(tmp_path / "run")]) == 0
    assert cli.main(["inspect-metric", str(tmp_path / "run" / "checkpoint.json"), str(tmp_path / "m.csv")]) == 0
    _, C = read_matrix_csv(tmp_path / "d.jsonl.truth.csv")
    _, V = read_matrix_csv(tmp_path / "m.correlation.csv")
    off = ~np.eye(len(C), dtype=bool)
    assert V[off & (C > 1e-12)].mean() > V[off & (C <= 1e-12)].mean()
