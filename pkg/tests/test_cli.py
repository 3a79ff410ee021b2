import json

import pytest

from relmatch import cli, pipeline
from relmatch.backends import FunctionBackend
from relmatch.catalogs import WRONG
from relmatch.embedding import LocalHashProvider, load_index
from relmatch.errors import TransportError
from relmatch.synthetic import GeneratorParams, generate_taxonomy

from .conftest import CHARGER, verdict_text


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def charger_index(tmp_path, capsys):
    out = tmp_path / "idx"
    assert run(["index", CHARGER / "target.csv", "--out", out, "--cache-dir", tmp_path / "cache"], capsys)[0] == 0
    return out


def match_args(tmp_path, index, *extra):
    return [
        "match", CHARGER / "source.csv", "--index", index, "--report", tmp_path / "report.json",
        "--truth", CHARGER / "truth.json", "--cache-dir", tmp_path / "cache", *extra,
    ]


def test_help(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    assert "match" in capsys.readouterr().out


def test_index_500_rows(tmp_path, capsys):
    corpus = generate_taxonomy(3)
    corpus.write(tmp_path / "corpus")
    code, out, _ = run(["index", tmp_path / "corpus" / "targets.csv", "--out", tmp_path / "idx"], capsys)
    assert code == 0 and "500 rows" in out
    assert len(load_index(tmp_path / "idx" / "index.bin")) == 500
    manifest = json.loads((tmp_path / "idx" / "manifest.json").read_text())
    assert manifest["row_count"] == 500 and manifest["provider_id"] == "local-hash:d16:s0"
    assert not list((tmp_path / "idx").glob("*.tmp*"))


def test_index_rebuild_short_circuits(tmp_path, monkeypatch):
    first = pipeline.build_target_index(CHARGER / "target.csv", LocalHashProvider(), tmp_path)
    assert not first.skipped

    class Exploding(LocalHashProvider):
        def embed_text(self, text):
            raise AssertionError("provider called on an unchanged index")

    again = pipeline.build_target_index(CHARGER / "target.csv", Exploding(), tmp_path)
    assert again.skipped and again.manifest == first.manifest
    rebuilt = pipeline.build_target_index(CHARGER / "target.csv", LocalHashProvider(seed=1), tmp_path)
    assert not rebuilt.skipped


def test_empty_csv_exit_2(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("id,name\n")
    code, _, err = run(["index", empty, "--out", tmp_path / "idx"], capsys)
    assert code == 2 and "EmptyTable" in err
    assert not (tmp_path / "idx").exists()


@pytest.mark.parametrize("flags", [["--k", "0"], ["--threshold", "1.5"], ["--max-batches", "0"]])
def test_bad_policy_exit_2(tmp_path, charger_index, capsys, flags):
    code, _, err = run(match_args(tmp_path, charger_index, *flags), capsys)
    assert code == 2 and "InvalidPolicy" in err
    assert not (tmp_path / "report.json").exists()


def test_missing_truth_exit_2(tmp_path, charger_index, capsys):
    args = match_args(tmp_path, charger_index)
    i = args.index("--truth")
    del args[i : i + 2]
    assert run(args, capsys)[0] == 2


def test_provider_mismatch_exit_2(tmp_path, charger_index, capsys):
    code, _, err = run(match_args(tmp_path, charger_index, "--embed-seed", "9"), capsys)
    assert code == 2 and "provider" in err


def test_charger_match_and_warm_rerun(tmp_path, charger_index, capsys):
    code, out, _ = run(match_args(tmp_path, charger_index), capsys)
    assert code == 0 and "backend calls: 5" in out
    report = json.loads((tmp_path / "report.json").read_text())
    resolution = report["entities"][0]["resolutions"]
    assert resolution["relation_id"] == "general_without_details"
    assert resolution["target_ids"] == ["t2"]
    first = (tmp_path / "report.json").read_bytes()
    code, out, _ = run(match_args(tmp_path, charger_index), capsys)
    assert code == 0 and "backend calls: 0" in out
    assert (tmp_path / "report.json").read_bytes() == first
    assert (tmp_path / "report.txt").read_text().strip()
    leftovers = [p for p in tmp_path.rglob("*") if ".tmp" in p.name]
    assert leftovers == []


def test_config_file_and_flag_precedence(tmp_path, charger_index, capsys):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"k": 0}))
    assert run(match_args(tmp_path, charger_index, "--config", config), capsys)[0] == 2
    assert run(match_args(tmp_path, charger_index, "--config", config, "--k", "3"), capsys)[0] == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["run"]["policy"]["k"] == 3


def failing_backend(fail):
    def reply(request):
        if fail(request):
            raise TransportError("connection refused")
        return verdict_text({cid: False for cid in request.candidate_ids})

    return FunctionBackend(reply)


def test_backend_down_exit_3(tmp_path, charger_index, capsys, monkeypatch):
    sleeps = []
    monkeypatch.setattr("relmatch.classifier.time.sleep", sleeps.append)
    monkeypatch.setattr(pipeline.BackendConfig, "build", lambda self: failing_backend(lambda r: True))
    code, _, err = run(match_args(tmp_path, charger_index, "--no-cache"), capsys)
    assert code == 3
    assert "BackendUnavailable" in err
    assert sleeps[:2] == [1.0, 2.0] and len(sleeps) == 10


def test_partial_failure_exit_4(tmp_path, charger_index, capsys, monkeypatch):
    monkeypatch.setattr("relmatch.classifier.time.sleep", lambda s: None)
    monkeypatch.setattr(
        pipeline.BackendConfig, "build", lambda self: failing_backend(lambda r: r.relation_id == WRONG)
    )
    code, _, err = run(match_args(tmp_path, charger_index, "--no-cache"), capsys)
    assert code == 4
    assert f"src1 / {WRONG}" in err
    report = json.loads((tmp_path / "report.json").read_text())
    stats = {s["relation_id"]: s for s in report["entities"][0]["stats"]["relations"]}
    assert stats[WRONG]["failed"] is True
    assert all(not s["failed"] for rel, s in stats.items() if rel != WRONG)


def test_unreachable_remote_exit_3(tmp_path, charger_index, capsys, monkeypatch):
    monkeypatch.setattr("relmatch.classifier.time.sleep", lambda s: None)
    args = match_args(tmp_path, charger_index, "--backend", "remote", "--chat-endpoint", "http://127.0.0.1:9/v1", "--no-cache")
    assert run(args, capsys)[0] == 3


def test_unreachable_embedding_exit_3(tmp_path, capsys):
    args = [
        "index", CHARGER / "target.csv", "--out", tmp_path / "idx", "--provider", "remote",
        "--embed-endpoint", "http://127.0.0.1:9/v1", "--cache-dir", tmp_path / "c",
    ]
    assert run(args, capsys)[0] == 3


def test_eval_deterministic(tmp_path, capsys):
    small = ["--targets", 200, "--sources", 20]
    assert run(["eval", "--metrics", tmp_path / "a.json", *small], capsys)[0] == 0
    assert run(["eval", "--metrics", tmp_path / "b.json", *small], capsys)[0] == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    metrics = json.loads((tmp_path / "a.json").read_text())
    for rel, m in metrics["relation_based"]["relations"].items():
        assert m["precision"] in (1.0, "n/a"), rel
        assert m["retrieval_bounded_recall"] in (1.0, "n/a"), rel
    assert all(metrics["checks"].values())


def test_eval_bad_params_exit_2(tmp_path, capsys):
    code, _, err = run(["eval", "--metrics", tmp_path / "m.json", "--tree-depth", "1"], capsys)
    assert code == 2 and "InvalidParams" in err


def test_generate(tmp_path, capsys):
    code, out, _ = run(["generate", "--out", tmp_path, "--targets", 50, "--sources", 5], capsys)
    assert code == 0
    assert {p.name for p in tmp_path.iterdir()} >= {"sources.csv", "targets.csv", "truth.json", "taxonomy.json"}
    expected = generate_taxonomy(42, GeneratorParams(targets_count=50, sources_count=5))
    assert f"{len(expected.truth)} truth triples" in out
