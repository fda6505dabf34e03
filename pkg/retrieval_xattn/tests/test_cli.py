import json
from pathlib import Path

import pytest

from retrieval_xattn.checkpoint import load_checkpoint
from retrieval_xattn.cli import main
from retrieval_xattn.corpus import read_corpus
from retrieval_xattn.evalbench.metrics import mean_needle_recall
from retrieval_xattn.training import validate_unlimiformer

TINY_RUN = {
    "model": {"d_model": 16, "n_heads": 2, "d_ff": 32, "window": 8, "vocab_size": 32, "init_std": 0.3},
    "regime": {"preset": "retrieval", "max_epochs": 1},
    "task": {"n": 32, "m": 2, "count": 2},
    "bench": {"repetitions": 3, "lengths": [8, 16]},
}


def _payload(capsys) -> dict:
    return json.loads(capsys.readouterr().out)


@pytest.fixture
def run_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY_RUN))
    return str(path)


def test_selftest_single_check(capsys):
    assert main(["selftest", "--only", "softmax"]) == 0
    payload = _payload(capsys)
    assert payload["ok"] is True and payload["passed"] == 1


def test_unknown_check_is_a_usage_error(capsys):
    assert main(["selftest", "--only", "nope"]) == 1
    assert capsys.readouterr().err.startswith("error: usage:")


def test_unknown_command(capsys):
    assert main(["frobnicate"]) == 1


def test_missing_checkpoint_is_an_io_error(tmp_path, capsys):
    code = main(["--report-dir", str(tmp_path), "generate", "--checkpoint", str(tmp_path / "absent.ulmf"),
                 "--input", str(tmp_path / "absent.tsv")])
    assert code == 3
    err = capsys.readouterr().err
    assert err.startswith("error: io:")
    assert len(err.strip().splitlines()) == 1


def test_generate_without_checkpoint_is_a_usage_error(tmp_path, capsys):
    assert main(["--report-dir", str(tmp_path), "generate"]) == 1


def test_bad_config_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"model": {"window": 10}}')
    assert main(["--config", str(path), "bench", "--kind", "memory"]) == 2
    assert "error: config:" in capsys.readouterr().err


def test_memory_report(tmp_path, capsys, run_config):
    assert main(["--config", run_config, "--report-dir", str(tmp_path), "bench", "--kind", "memory"]) == 0
    payload = _payload(capsys)
    assert payload["rows"] == 2
    assert (tmp_path / "index_memory.csv").exists()


def test_train_generate_analyze(tmp_path, capsys, run_config):
    out = str(tmp_path)
    assert main(["--config", run_config, "--report-dir", out, "train"]) == 0
    trained = _payload(capsys)
    assert trained["epochs"] == 1
    assert (tmp_path / "train_log.csv").read_text().count("\n") == 1

    assert main(["--config", run_config, "--report-dir", out, "--k", "4", "generate",
                 "--checkpoint", trained["checkpoint"], "--input", trained["corpus"], "--example", "1"]) == 0
    generated = _payload(capsys)
    assert generated["examples"] == 2
    assert 0.0 <= generated["mean_needle_recall"] <= 1.0
    assert len((tmp_path / "generations.txt").read_text().splitlines()) == 2
    coverage = generated["coverage_at_window"]
    assert coverage["k"] == 8 and coverage["queries"] > 0
    assert 0.0 < coverage["min"] <= coverage["mean"] <= 1.0
    assert (tmp_path / "attention_coverage.csv").exists()

    assert main(["--config", run_config, "--report-dir", out, "analyze",
                 "--log", generated["retrieval_log"], "--datastore", generated["datastore"], "--bins", "4"]) == 0
    analyzed = _payload(capsys)
    assert analyzed["datastore_rows"] == 32
    assert analyzed["retrievals"] > 0
    assert 0.0 <= analyzed["median_position"] < 1.0
    assert len((tmp_path / "retrieval_histogram.lines").read_text().splitlines()) == 4


def test_example_index_out_of_range(tmp_path, capsys, run_config):
    out = str(tmp_path)
    assert main(["--config", run_config, "--report-dir", out, "train"]) == 0
    trained = _payload(capsys)
    code = main(["--config", run_config, "--report-dir", out, "generate",
                 "--checkpoint", trained["checkpoint"], "--input", trained["corpus"], "--example", "5"])
    assert code == 1


def test_generate_recall_matches_offline_scoring(tmp_path, capsys, run_config):
    out = str(tmp_path)
    assert main(["--config", run_config, "--report-dir", out, "train"]) == 0
    trained = _payload(capsys)
    assert main(["--config", run_config, "--report-dir", out, "generate",
                 "--checkpoint", trained["checkpoint"], "--input", trained["corpus"]]) == 0
    generated = _payload(capsys)

    corpus = read_corpus(trained["corpus"])
    dumped = [[int(t) for t in line.split()] for line in (tmp_path / "generations.txt").read_text().splitlines()]
    offline = mean_needle_recall(dumped, [ex.target[1:-1] for ex in corpus])
    assert generated["mean_needle_recall"] == pytest.approx(offline)
    weights = load_checkpoint(trained["checkpoint"])
    assert validate_unlimiformer(weights, corpus, k=8) == pytest.approx(offline)


ARTIFACTS = [
    "model.ulmf", "task_corpus.tsv", "train_log.csv", "generations.txt",
    "retrieval_log.csv", "datastore.ulds", "attention_coverage.csv",
]


def _train_and_generate(run_config, out, seed, capsys) -> dict:
    assert main(["--config", run_config, "--seed", str(seed), "--report-dir", out, "train"]) == 0
    trained = _payload(capsys)
    assert main(["--config", run_config, "--seed", str(seed), "--report-dir", out, "generate",
                 "--checkpoint", trained["checkpoint"], "--input", trained["corpus"]]) == 0
    capsys.readouterr()
    return trained


def test_same_seed_gives_identical_artifacts(tmp_path, capsys, run_config):
    runs = {}
    for name, seed in (("a", 3), ("b", 3), ("c", 4)):
        out = tmp_path / name
        _train_and_generate(run_config, str(out), seed, capsys)
        runs[name] = {f: (out / f).read_bytes() for f in ARTIFACTS}
    assert runs["a"] == runs["b"]
    assert runs["a"]["model.ulmf"] != runs["c"]["model.ulmf"]


def test_commands_leave_their_inputs_alone(tmp_path, capsys, run_config):
    out = tmp_path / "run"
    trained = _train_and_generate(run_config, str(out), 3, capsys)
    inputs = [run_config, trained["corpus"], trained["checkpoint"]]
    before = {p: Path(p).read_bytes() for p in inputs}

    assert main(["--config", run_config, "--report-dir", str(out), "generate",
                 "--checkpoint", trained["checkpoint"], "--input", trained["corpus"], "--output",
                 str(tmp_path / "again.txt")]) == 0
    analyze_dir = str(tmp_path / "analysis")
    assert main(["--config", run_config, "--report-dir", analyze_dir, "analyze",
                 "--log", str(out / "retrieval_log.csv"), "--datastore", str(out / "datastore.ulds")]) == 0
    for p in inputs:
        assert Path(p).read_bytes() == before[p], p


def test_non_ascii_digits_in_a_corpus_are_an_io_error(tmp_path, capsys, run_config):
    corpus = tmp_path / "bad.tsv"
    corpus.write_text("4 5 6\t1 5 2\n4 ² 5\t1 6 2\n", encoding="utf-8")
    assert main(["--config", run_config, "--report-dir", str(tmp_path), "train", "--corpus", str(corpus)]) == 3
    err = capsys.readouterr().err
    assert err.startswith("error: io:") and "line 2" in err


@pytest.mark.parametrize("kind", ["scaling", "input_limit"])
def test_random_provider_benchmarks(tmp_path, capsys, run_config, kind):
    code = main(["--config", run_config, "--provider", "random", "--report-dir", str(tmp_path),
                 "bench", "--kind", kind])
    assert code == 0
    assert _payload(capsys)["kind"] == kind
