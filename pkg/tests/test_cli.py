import json

import pytest

from mutiny.cli import main


def run(*argv):
    return main([str(a) for a in argv])


def test_usage_errors_exit_1(capsys):
    assert run("explode") == 1
    assert run("run", "--bogus") == 1
    assert run() == 1


def test_missing_prerequisites_exit_2(tmp_path, capsys):
    assert run("generate", "--out", tmp_path) == 2
    assert "mutiny record" in capsys.readouterr().err
    assert run("run", "--out", tmp_path) == 2
    assert run("classify", "--out", tmp_path) == 2
    assert run("replay", "x", "--out", tmp_path) == 2


def test_empty_catalog_generates_empty_campaign(tmp_path, caplog):
    (tmp_path / "catalog-deploy.json").write_text(json.dumps({"workload": "deploy", "fields": [], "min_len": {}}))
    assert run("generate", "--out", tmp_path, "--workload", "deploy") == 0
    assert (tmp_path / "campaign.jsonl").read_text() == ""
    assert "empty" in caplog.text


def test_bad_config_is_usage_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"artifact_constants": {"no_such_key": 1}}))
    assert run("record", "--out", tmp_path, "--config", cfg) == 1


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert run("record", "--out", out, "--workload", "deploy") == 0
    assert run("generate", "--out", out, "--workload", "deploy") == 0
    assert run("golden", "--out", out, "--workload", "deploy", "--runs", 3) == 0
    lines = (out / "campaign.jsonl").read_text().splitlines()
    ids = [json.loads(x)["id"] for x in lines]
    return out, ids


def test_pipeline_to_report(pipeline):
    out, ids = pipeline
    assert len(ids) > 100
    assert run("run", "--out", out, "--limit", 3) == 0
    assert run("classify", "--out", out) == 0
    assert run("report", "--out", out) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["experiments"] == 3
    assert sum(sum(r.values()) for r in rep["matrix"].values()) == 3


def test_replay_is_byte_identical(pipeline):
    out, ids = pipeline
    eid = ids[7]
    assert run("replay", eid, "--out", out) == 0
    first = [(out / "replay" / d / f"{eid}.{ext}").read_bytes() for d, ext in (("records", "json"),
                                                                              ("traces", "jsonl"))]
    assert run("replay", eid, "--out", out) == 0
    second = [(out / "replay" / d / f"{eid}.{ext}").read_bytes() for d, ext in (("records", "json"),
                                                                               ("traces", "jsonl"))]
    assert first == second
    assert run("run", "--out", out, "--experiment-id", eid) == 0
    assert (out / "records" / f"{eid}.json").read_bytes() == first[0]


def test_unknown_experiment_id(pipeline):
    out, _ = pipeline
    assert run("replay", "nope", "--out", out) == 1
