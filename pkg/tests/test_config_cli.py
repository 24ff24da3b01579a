import json
import subprocess
import sys

import pytest
import yaml

from editroute.cli import main, read_edits
from editroute.config import Config, build_system, config_from_dict, load_config
from editroute.errors import ConfigError, NotTrainedError, SchemaError
from editroute.evaluator import save_dataset
from editroute.retrieval import FilterTrainSample, save_samples
from editroute.synthetic import make_corpus


def write_config(tmp_path, **sections):
    data = {"embedder": {"kind": "test-ngram", "dimension": 64}, "backends": {"mock": True}}
    data.update(sections)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def write_edits(path, n=3):
    corpus = make_corpus(n, seed=8)
    path.write_text("".join(json.dumps({"id": r.id, "query": r.edit.query, "answer": r.edit.answer}) + "\n" for r in corpus.records))
    return corpus


def test_defaults():
    cfg = Config()
    assert cfg.retrieval.k == 4 and cfg.retrieval.threshold == 0.5
    assert cfg.backends.mock and cfg.server.host_port == ("127.0.0.1", 8080)


@pytest.mark.parametrize(
    "data",
    [
        {"retrieval": {"k": 0}},
        {"retrieval": {"threshold": 1.0}},
        {"embedder": {"dimension": 0}},
        {"backends": {"mock": True, "base": {"base_url": "http://x", "model": "m"}}},
        {"backends": {"mock": False}},
        {"retrieval": {"colour": "blue"}},
        {"nonsense": {}},
        {"augmenter": {"kind": "llm"}},
    ],
)
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_relative_paths_resolve_against_config(tmp_path):
    path = write_config(tmp_path, persistence={"memory_snapshot_path": "m.jsonl"}, retrieval={"filter_weights_path": "w/f.json"})
    cfg = load_config(path)
    assert cfg.persistence.memory_snapshot_path == tmp_path / "m.jsonl"
    assert cfg.retrieval.filter_weights_path == tmp_path / "w" / "f.json"


def test_real_endpoints_config():
    cfg = config_from_dict(
        {
            "backends": {
                "mock": False,
                "base": {"base_url": "http://llm", "model": "m"},
                "aligned": {"base_url": "http://llm", "model": "m", "adapter_name": "ke"},
            }
        }
    )
    assert cfg.backends.aligned.adapter_name == "ke"


def test_strict_filter_requires_weights():
    with pytest.raises(NotTrainedError):
        build_system(Config())


def test_read_edits_formats(tmp_path):
    path = tmp_path / "e.jsonl"
    path.write_text('{"id": "a", "query": "Q?", "answer": "A"}\n{"id": "b", "edit": {"query": "R?", "answer": "B"}}\n')
    assert [e.id for e in read_edits(path)] == ["a", "b"]
    path.write_text('{"id": "a", "query": "Q?"}\n')
    with pytest.raises(SchemaError):
        read_edits(path)


def test_query_on_empty_snapshot(tmp_path, capsys):
    cfg = write_config(tmp_path, persistence={"memory_snapshot_path": "m.jsonl"})
    assert main(["--config", str(cfg), "query", "--q", "Who painted the ceiling?"]) == 0
    out = capsys.readouterr().out
    assert "path=base" in out.splitlines()
    assert "candidates_considered=0" in out


def test_augment_edit_query_flow(tmp_path, capsys):
    cfg = write_config(tmp_path, persistence={"memory_snapshot_path": "m.jsonl"}, retrieval={"filter": "accept_all"})
    corpus = write_edits(tmp_path / "edits.jsonl")
    assert main(["--config", str(cfg), "augment", "--edits", str(tmp_path / "edits.jsonl"), "--out", str(tmp_path / "aug.jsonl")]) == 0
    assert len((tmp_path / "aug.jsonl").read_text().splitlines()) == 3
    args = ["--config", str(cfg), "edit", "--edits", str(tmp_path / "edits.jsonl"), "--augmented", str(tmp_path / "aug.jsonl")]
    assert main(args) == 0
    assert len((tmp_path / "m.jsonl").read_text().splitlines()) == 1 + 12
    capsys.readouterr()
    target = corpus.records[1]
    assert main(["--config", str(cfg), "query", "--q", target.edit.query, "--json"]) == 0
    body = json.loads(capsys.readouterr().out)
    assert body["answer"] == target.edit.answer
    assert body["path"] == "aligned" and body["matched_edit_id"] == target.id
    # re-applying the same edits is refused
    assert main(args) == 3


def test_train_filter_single_class_exits_5(tmp_path):
    cfg = write_config(tmp_path)
    samples = tmp_path / "s.jsonl"
    save_samples([FilterTrainSample.of("q", "e", "edit"), FilterTrainSample.of("r", "e", "portability")], samples)
    assert main(["--config", str(cfg), "train-filter", "--samples", str(samples), "--out", str(tmp_path / "w.json")]) == 5


def test_train_filter_then_eval(tmp_path, capsys):
    cfg = write_config(tmp_path, retrieval={"filter_weights_path": "w.json"})
    corpus = make_corpus(12, seed=5)
    save_dataset(corpus.records, tmp_path / "d.jsonl")
    general = tmp_path / "general.txt"
    general.write_text("Tell me a joke.\nWhat is two plus two?\n")
    args = ["--config", str(cfg), "train-filter", "--dataset", str(tmp_path / "d.jsonl"), "--general", str(general)]
    args += ["--epochs", "200", "--lr", "0.5", "--loss-log", str(tmp_path / "loss.txt")]
    assert main(args) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["epochs"] == 200 and (tmp_path / "w.json").exists()
    assert len((tmp_path / "loss.txt").read_text().split()) == 200

    report = tmp_path / "report.json"
    assert main(["--config", str(cfg), "eval", "--setting", "sequential", "--dataset", str(tmp_path / "d.jsonl"), "--report", str(report)]) == 0
    body = json.loads(report.read_text())
    assert set(body["metrics"]) == {"edit_success", "locality", "portability", "harmonic_mean"}
    assert body["final_memory"]["edit_count"] == 12
    assert len(body["records"]) == 12 and body["decisions"]


def test_eval_without_weights_exits_5(tmp_path):
    cfg = write_config(tmp_path)
    save_dataset(make_corpus(2).records, tmp_path / "d.jsonl")
    args = ["--config", str(cfg), "eval", "--setting", "single", "--dataset", str(tmp_path / "d.jsonl"), "--report", str(tmp_path / "r.json")]
    assert main(args) == 5


def test_bad_dataset_exits_3(tmp_path):
    cfg = write_config(tmp_path, retrieval={"filter": "reject_all"})
    (tmp_path / "d.jsonl").write_text('{"id": "a", "edit": {"query": "Q?"}}\n')
    args = ["--config", str(cfg), "eval", "--setting", "single", "--dataset", str(tmp_path / "d.jsonl"), "--report", str(tmp_path / "r.json")]
    assert main(args) == 3


def test_unreachable_backend_exits_4(tmp_path):
    endpoint = {"base_url": "http://127.0.0.1:9", "model": "m", "retries": 0, "timeout": 2}
    cfg = write_config(tmp_path, backends={"mock": False, "base": endpoint, "aligned": endpoint}, retrieval={"filter": "reject_all"})
    assert main(["--config", str(cfg), "query", "--q", "hello"]) == 4


def test_usage_errors_exit_2(tmp_path):
    cfg = write_config(tmp_path)
    with pytest.raises(SystemExit) as info:
        main(["--config", str(cfg), "frobnicate"])
    assert info.value.code == 2
    assert main(["--config", str(tmp_path / "missing.yaml"), "query", "--q", "x"]) == 2
    bad = write_config(tmp_path, retrieval={"k": 0})
    assert main(["--config", str(bad), "query", "--q", "x"]) == 2


def test_console_script_runs(tmp_path):
    cfg = write_config(tmp_path)
    proc = subprocess.run(
        [sys.executable, "-m", "editroute.cli", "--config", str(cfg), "query", "--q", "Anything at all?"],
        capture_output=True,
        text=True,
        check=False,
    )
    assert proc.returncode == 0, proc.stderr
    assert "path=base" in proc.stdout
