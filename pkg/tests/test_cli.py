import json
import shutil

import pytest

from firstreply import cli
from firstreply.cli import KEYS, STAGES, main, sha256_file


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    synth = root / "s"
    assert main(["synth", "--synth-dir", str(synth), "--synth-hateful", "2",
                 "--synth-nonhateful", "2", "--synth-users", "400"]) == 0
    assert main(["all", "--config", str(synth / "pipeline.toml"), "--replications", "5"]) == 0
    return synth


def copy_run(run_dir, tmp_path):
    dst = tmp_path / "s"
    shutil.copytree(run_dir, dst)
    return dst


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["all", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for k in KEYS:
        assert k.name in text
        assert "--" + k.name.replace("_", "-") in text
    assert "exit codes" in text


def test_unknown_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('archives = ["a.jsonl"]\nmatchin_seed = 3\n')
    assert main(["ingest", "--config", str(cfg)]) == 2
    assert "matchin_seed" in capsys.readouterr().err


@pytest.mark.parametrize("body", ['threshold = 1.5\n', 'replications = "many"\n', 'scorer = "oracle"\n', "x = [\n"])
def test_bad_values_exit_2(tmp_path, body):
    cfg = tmp_path / "c.toml"
    cfg.write_text(body)
    assert main(["ingest", "--config", str(cfg)]) == 2


def test_missing_input_file_exits_2(tmp_path):
    assert main(["ingest", "--archives", str(tmp_path / "nope.jsonl"), "--output", str(tmp_path / "o")]) == 2


def test_missing_artifact_exits_3(tmp_path, capsys):
    assert main(["stats", "--output", str(tmp_path / "o")]) == 3
    err = capsys.readouterr().err
    assert "events.jsonl" in err and "cohort" in err


def test_all_writes_manifest_for_every_stage(run_dir):
    out = run_dir / "out"
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["stages"]) == set(STAGES)
    for entry in man["stages"].values():
        assert entry["config_hash"] == man["config_hash"]
        for rel, digest in entry["outputs"].items():
            assert sha256_file(out / rel) == digest
    assert man["stages"]["simulate"]["seed"] is not None
    assert "output" not in man["config"] and "workers" not in man["config"]
    summary = json.loads((out / "report" / "summary.json").read_text())
    assert summary["hateful_communities"] == ["hcomm00", "hcomm01"]
    assert set(summary["mean_err"]) == {f"{t}/{k}" for t in ("hateful", "nonhateful")
                                        for k in ("comment", "submission")}


def test_config_mismatch_exits_2(run_dir, tmp_path, capsys):
    d = copy_run(run_dir, tmp_path)
    rc = main(["stats", "--config", str(d / "pipeline.toml"), "--matching-seed", "9"])
    assert rc == 2
    assert "re-run" in capsys.readouterr().err


def test_execution_keys_do_not_change_hash(run_dir, tmp_path):
    d = copy_run(run_dir, tmp_path)
    assert main(["simulate", "--config", str(d / "pipeline.toml"), "--replications", "5",
                 "--workers", "3"]) == 0


def test_stale_artifact_exits_3(run_dir, tmp_path, capsys):
    d = copy_run(run_dir, tmp_path)
    with open(d / "out" / "events.jsonl", "a") as fh:
        fh.write("\n")
    assert main(["stats", "--config", str(d / "pipeline.toml"), "--replications", "5"]) == 3
    assert "changed" in capsys.readouterr().err


def test_rerun_upstream_invalidates_downstream(run_dir, tmp_path):
    d = copy_run(run_dir, tmp_path)
    cfg = str(d / "pipeline.toml")
    assert main(["cohort", "--config", cfg, "--replications", "5"]) == 0
    man = json.loads((d / "out" / "manifest.json").read_text())
    assert {"stats", "simulate", "report"}.isdisjoint(man["stages"])
    assert main(["simulate", "--config", cfg, "--replications", "5"]) == 3


def test_rerun_is_byte_identical(run_dir, tmp_path):
    d = copy_run(run_dir, tmp_path)
    shutil.rmtree(d / "out")
    assert main(["all", "--config", str(d / "pipeline.toml"), "--replications", "5", "--workers", "2"]) == 0
    for p in sorted((run_dir / "out").rglob("*")):
        if p.is_file():
            assert p.read_bytes() == (d / "out" / p.relative_to(run_dir / "out")).read_bytes(), p.name


def test_synth_output_is_deterministic(run_dir, tmp_path):
    assert main(["synth", "--synth-dir", str(tmp_path / "s"), "--synth-hateful", "2",
                 "--synth-nonhateful", "2", "--synth-users", "400"]) == 0
    for p in sorted(run_dir.iterdir()):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "s" / p.name).read_bytes(), p.name


def test_threshold_refit_written(run_dir):
    models = json.loads((run_dir / "out" / "models_threshold.json").read_text())
    assert models
    assert cli.EXIT_MODEL == 4
