import json

import pytest

from styledeid.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from styledeid.config import ConfigError, RunConfig, dump_config, parse_config

TINY = """\
seed: 3
world:
  n_identities: 20
  photos_per_identity: 3
encoder:
  n_samples: 100
  epochs: 1
  width: 8
inversion:
  max_iters: 2
embedder:
  gallery_photos: 4
  epochs: 1
extractor:
  gallery_photos: 10
  epochs: 1
sweep:
  levels: [0, 4]
  n_aux: 2
attack:
  threat_models: [m1, m3, m7]
  trials: 2
  n_perm: 50
  ovo_epochs: 20
"""


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "tiny.yaml"
    cfg.write_text(TINY)
    return cfg, out / "r"


def test_round_trip_and_run_id():
    cfg = RunConfig()
    back = parse_config(dump_config(cfg))
    assert back == cfg and back.run_id == cfg.run_id
    assert parse_config("out: elsewhere\nworkers: 4\n").run_id == cfg.run_id
    assert parse_config("seed: 1\n").run_id != cfg.run_id


@pytest.mark.parametrize("text, field, line", [
    ("seed: 0\nattack:\n  threat_models: [m1, m8]\n", "attack.threat_models", 3),
    ("world:\n  n_identities: ten\n", "world.n_identities", 2),
    ("colour: blue\n", "colour", 1),
    ("sweep:\n  levels: [0, 9]\n", "sweep.levels", 2),
])
def test_config_errors_name_field_and_line(text, field, line):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    msg = str(info.value)
    assert f"field '{field}'" in msg and f"line {line}" in msg


def test_unknown_threat_model_lists_valid_names():
    with pytest.raises(ConfigError, match="m1, m2, m3, m4, m5, m6, m7"):
        parse_config("attack:\n  threat_models: [m8]\n")


def test_cli_exit_codes_for_bad_input(tmp_path, capsys):
    assert main(["nonsense"]) == EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("attack:\n  threat_models: [m8]\n")
    assert main(["world", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "m8" in capsys.readouterr().err
    assert main(["attack", "--threat-models", "m9", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_missing_dependency_names_the_command(tiny_run, tmp_path, capsys):
    cfg, _ = tiny_run
    assert main(["deid", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == EXIT_RUNTIME
    assert "styledeid world" in capsys.readouterr().err


def test_tiny_pipeline_end_to_end(tiny_run, capsys):
    cfg, out = tiny_run
    args = ["--config", str(cfg), "--out", str(out)]
    for stage in ("world", "deid", "attack", "utility"):
        assert main([stage, *args]) == EXIT_OK, stage
    capsys.readouterr()
    assert main(["report", *args]) == EXIT_OK
    text = capsys.readouterr().out
    for name in ("scenario ordering", "knowledge ordering", "chance floor", "pipeline budget"):
        assert name in text
    for f in ("world/population.jsonl", "deid/deid.jsonl", "attack/identification.csv",
              "attack/verification.csv", "utility/utility.csv", "report.json"):
        assert (out / f).exists(), f
    report = json.loads((out / "report.json").read_text())
    assert all(c["status"] in ("PASS", "FAIL", "SKIPPED") for c in report["properties"])


def test_stale_run_is_refused(tiny_run, capsys):
    cfg, out = tiny_run
    # a different seed is a different run id; the existing world belongs to the old one
    assert main(["attack", "--config", str(cfg), "--out", str(out), "--seed", "99"]) == EXIT_RUNTIME
    assert "styledeid" in capsys.readouterr().err


def test_single_level_trends_are_skipped(tmp_path, capsys):
    cfg = tmp_path / "one.yaml"
    cfg.write_text(TINY.replace("levels: [0, 4]", "levels: [2]").replace("[m1, m3, m7]", "[m1, m2]"))
    assert main(["all", "--config", str(cfg), "--out", str(tmp_path / "r")]) == EXIT_OK
    lines = [ln for ln in capsys.readouterr().out.splitlines() if "monotonicity" in ln]
    assert lines and all(ln.startswith("SKIPPED") for ln in lines)


def test_worker_count_does_not_change_artifacts(tiny_run, tmp_path, capsys):
    from styledeid.pipeline import artifact_digest

    cfg, out = tiny_run
    if not (out / "report.json").exists():
        pytest.skip("needs the single-worker run from test_tiny_pipeline_end_to_end")
    other = tmp_path / "w2"
    assert main(["all", "--config", str(cfg), "--out", str(other), "--workers", "2"]) == EXIT_OK
    assert artifact_digest(other) == artifact_digest(out)
