import hashlib
import json
from pathlib import Path

import pytest

from gti_lab.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main
from gti_lab.config import load_spec
from conftest import TINY_SPEC

STAGES = ["gen-data", "fit-rq", "assign-sids", "pretrain", "extend", "ground", "sft", "eval",
          "diagnose", "report"]


def cli(*args):
    return main([*args, "--spec", str(TINY_SPEC)])


def tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def test_unknown_command_is_usage_error():
    assert main(["train-everything"]) == EXIT_CONFIG


def test_bad_config_is_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("rq: {levels: 0}\n")
    assert main(["gen-data", "--spec", str(bad), "--out", str(tmp_path / "w")]) == EXIT_CONFIG
    line = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(line)["event"] == "config-error"


def test_missing_config_file_is_config_error(tmp_path):
    assert main(["gen-data", "--spec", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG


def test_unknown_key_is_config_error(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: {n_layerz: 2}\n")
    assert main(["gen-data", "--spec", str(bad)]) == EXIT_CONFIG


def test_stage_before_its_input_is_missing_input(tmp_path, capsys):
    assert cli("pretrain", "--out", str(tmp_path)) == EXIT_MISSING
    assert json.loads(capsys.readouterr().err.strip())["event"] == "missing-input"


def test_corrupted_input_is_refused(tmp_path):
    assert cli("gen-data", "--out", str(tmp_path)) == EXIT_OK
    with open(tmp_path / "data" / "catalog.jsonl", "a") as f:
        f.write("\n")
    assert cli("fit-rq", "--out", str(tmp_path)) == EXIT_MISSING


def test_logs_are_json_lines_on_stderr(tmp_path, capsys):
    assert cli("gen-data", "--out", str(tmp_path)) == EXIT_OK
    out = capsys.readouterr()
    assert out.out == ""
    events = [json.loads(line) for line in out.err.splitlines()]
    assert events and events[-1]["event"] == "gen-data"


@pytest.fixture(scope="module")
def stagewise_and_run_all(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("stages"), tmp_path_factory.mktemp("all")
    for stage in STAGES:
        assert cli(stage, "--out", str(a), "--quiet") == EXIT_OK, stage
    assert cli("run-all", "--out", str(b), "--quiet") == EXIT_OK
    return a, b


def test_stagewise_equals_run_all(stagewise_and_run_all):
    a, b = stagewise_and_run_all
    ta, tb = tree(a), tree(b)
    assert ta.keys() == tb.keys()
    assert "report/gain_table.csv" in ta
    for name in ta:
        assert ta[name] == tb[name], name


def test_manifests_match_their_files(stagewise_and_run_all):
    root = stagewise_and_run_all[0]
    manifests = list(root.rglob("manifest.json"))
    assert manifests
    for m in manifests:
        body = json.loads(m.read_text())
        assert body["format"] == "gti-manifest/1"
        for name, digest in body["files"].items():
            assert hashlib.sha256((m.parent / name).read_bytes()).hexdigest() == digest


def test_shipped_default_config_equals_builtin_defaults():
    path = Path(__file__).parents[1] / "configs" / "default.yaml"
    assert load_spec(path).digest() == load_spec().digest()
