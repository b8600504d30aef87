import json
import logging

import pytest

from concernkit.cli import main
from concernkit.errors import ConfigError
from concernkit.pipeline import load_config, run_pipeline
from concernkit.synthetic import demo_workspace

DETERMINISTIC = (".csv", ".svg", ".json", ".toml", ".dot")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    return demo_workspace(tmp_path_factory.mktemp("demo"))


def outputs(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())
            if p.is_file() and p.suffix in DETERMINISTIC and p.name != "run_log.json"}


def test_run_twice_byte_identical_and_cache_hits(workspace, tmp_path):
    cfg = load_config(workspace["config"])
    first = run_pipeline(cfg, tmp_path / "a")
    assert first.ok, first.manifest.error
    again = run_pipeline(cfg, tmp_path / "a")
    fresh = run_pipeline(load_config(workspace["config"]), tmp_path / "b")
    a, b = outputs(tmp_path / "a"), outputs(tmp_path / "b")
    assert a == b
    expected = {"manifest.json", "ranked.csv", "timeline.csv", "timeline.svg", "category_priority.csv",
                "category_priority.svg", "freq_category.csv", "freq_app.csv", "freq_community.csv",
                "labels.csv", "features.csv", "clusters.json", "events.json", "weights.toml", "eval.json"}
    assert expected <= set(a)
    log = json.loads((tmp_path / "a" / "run_log.json").read_text())
    assert all(log["cache_hits"].values())
    assert again.manifest.to_json() == first.manifest.to_json() == fresh.manifest.to_json()


def test_outputs_reference_run_id(workspace, tmp_path):
    res = run_pipeline(load_config(workspace["config"]), tmp_path)
    rid = res.manifest.run_id
    for name in res.manifest.outputs:
        text = (tmp_path / name).read_text()
        assert rid in text, name
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "complete" and manifest["seed"] == 7
    assert [s["name"] for s in manifest["stages"]][0] == "ingest"


def test_corrupt_cache_recomputed_with_warning(workspace, tmp_path, caplog):
    cfg = load_config(workspace["config"])
    run_pipeline(cfg, tmp_path)
    before = outputs(tmp_path)
    for p in (tmp_path / "cache").glob("signals-*.json"):
        p.write_text("{not json")
    with caplog.at_level(logging.WARNING):
        res = run_pipeline(cfg, tmp_path)
    assert res.ok
    assert "corrupt" in caplog.text
    assert outputs(tmp_path) == before
    assert json.loads((tmp_path / "run_log.json").read_text())["cache_hits"]["signals"] is False


def test_tune_without_truth_fails_before_work(workspace, tmp_path):
    cfg = load_config(workspace["config"], tune=True)
    cfg.truth = None
    with pytest.raises(ConfigError, match="ground-truth"):
        run_pipeline(cfg, tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_stage_failure_recorded_in_manifest(workspace, tmp_path):
    cfg = load_config(workspace["config"], apps=["Snapchat"])
    res = run_pipeline(cfg, tmp_path)
    assert not res.ok
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["status"] == "failed" and m["failed_stage"] == "ingest"


def test_seed_changes_run_id(workspace, tmp_path):
    a = run_pipeline(load_config(workspace["config"]), tmp_path / "a").manifest.run_id
    b = run_pipeline(load_config(workspace["config"], seed=8), tmp_path / "b").manifest.run_id
    assert a != b


def test_restricted_tune_in_pipeline(workspace, tmp_path):
    cfg = load_config(workspace["config"], tune=True, free=("w_f", "w_h"), folds=5)
    res = run_pipeline(cfg, tmp_path)
    assert res.ok, res.manifest.error
    tune = json.loads((tmp_path / "tune.json").read_text())
    assert tune["n_candidates"] == 16 and len(tune["folds"]) == 5


# -- CLI -------------------------------------------------------------------------


def test_cli_run_and_flags_either_side(workspace, tmp_path, capsys):
    assert main(["--config", str(workspace["config"]), "run", "--out", str(tmp_path / "x")]) == 0
    first = json.loads(capsys.readouterr().out)
    assert main(["run", "--config", str(workspace["config"]), "--out", str(tmp_path / "y"), "--seed", "7"]) == 0
    second = json.loads(capsys.readouterr().out)
    assert first["run_id"] == second["run_id"] and first["status"] == "complete"


def test_cli_subcommands(workspace, tmp_path, capsys):
    out = str(tmp_path)
    posts = str(workspace["posts"])
    assert main(["ingest", "--posts", posts, "--out", out]) == 0
    assert "kept" in capsys.readouterr().out
    assert main(["cluster", "--memberships", str(workspace["memberships"]), "--out", out]) == 0
    assert main(["categorize", "--posts", posts, "--out", out]) == 0
    assert (tmp_path / "labels.jsonl").exists()
    assert main(["detect", "--posts", posts, "--out", out]) == 0
    assert main(["themes", "--posts", posts, "--out", out]) == 0
    assert main(["sentiment", "--posts", posts, "--out", out]) == 0
    assert main(["timeline", "--posts", posts, "--labels", str(tmp_path / "labels.jsonl"), "--out", out]) == 0
    assert main(["timeline", "--posts", posts, "--labels", str(tmp_path / "labels.jsonl"), "--model", "baseline",
                 "--out", out]) == 0
    capsys.readouterr()
    assert main(["events", "--events", str(workspace["events"]), "--threshold", "2"]) == 0
    assert main(["--config", str(workspace["config"]), "prioritize", "--out", str(tmp_path / "p")]) == 0
    capsys.readouterr()
    assert main(["eval", "--ranked", str(tmp_path / "p" / "ranked.csv"), "--truth", str(workspace["truth"])]) == 0
    assert "precision_at_k" in capsys.readouterr().out
    assert main(["--config", str(workspace["config"]), "report", "--out", str(tmp_path / "p")]) == 0


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert main(["events", "--events", str(tmp_path / "missing.csv")]) == 2
    bad = tmp_path / "c.toml"
    bad.write_text('[priority]\ntune = true\n[inputs]\nposts = "nope.jsonl"\n')
    assert main(["--config", str(bad), "run", "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_tune_uses_config_grid(workspace, tmp_path, capsys):
    cfg = tmp_path / "tune.toml"
    cfg.write_text('seed = 7\n[priority]\nfree = ["w_f", "w_h"]\ngrid = [1, 10]\n')
    assert main(["--config", str(cfg), "tune", "--posts", str(workspace["posts"]),
                 "--truth", str(workspace["truth"]), "--out", str(tmp_path), "--folds", "5"]) == 0
    assert "candidates 4," in capsys.readouterr().out
    weights = (tmp_path / "weights.toml").read_text()
    assert "w_a = 1.0" in weights
