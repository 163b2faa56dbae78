import dataclasses
import json

import pytest
import yaml

from bugsong.cli import main
from bugsong.config import (ExperimentConfig, config_from_dict,
                            default_config_yaml, load_config)
from bugsong.errors import ConfigError


# ---------------------------------------------------------------------------
# config loading and validation

def test_defaults_are_valid():
    cfg = ExperimentConfig()
    cfg.validate()
    assert cfg.chunk_len == 220500


def test_default_yaml_round_trips(tmp_path):
    path = tmp_path / "defaults.yaml"
    path.write_text(default_config_yaml())
    cfg = load_config(path)
    assert cfg == ExperimentConfig()


def test_empty_config_is_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert load_config(path) == ExperimentConfig()


def test_unknown_key_fatal():
    with pytest.raises(ConfigError, match="unknown config keys: batchsize"):
        config_from_dict({"batchsize": 14})


def test_missing_file_fatal(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")


def test_non_mapping_config_fatal(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- a\n- b\n")
    with pytest.raises(ConfigError, match="flat mapping"):
        load_config(path)


def test_type_coercion():
    cfg = config_from_dict({"chunk_seconds": 5, "split_ratios": [0.7, 0.1, 0.2]})
    assert cfg.chunk_seconds == 5.0
    assert cfg.split_ratios == (0.7, 0.1, 0.2)
    with pytest.raises(ConfigError, match="batch_size"):
        config_from_dict({"batch_size": "14"})
    with pytest.raises(ConfigError, match="batch_size"):
        config_from_dict({"batch_size": True})
    with pytest.raises(ConfigError, match="learning_rate"):
        config_from_dict({"learning_rate": "fast"})
    with pytest.raises(ConfigError, match="split_ratios"):
        config_from_dict({"split_ratios": 0.7})


@pytest.mark.parametrize("bad", [
    {"patience": 60},                       # >= max_epochs
    {"split_ratios": [0.5, 0.5]},
    {"split_ratios": [0.6, 0.2, 0.1]},      # does not sum to 1
    {"frontend": "stft"},
    {"dropout": 1.0},
    {"min_tail_seconds": 9.0},              # > chunk_seconds
    {"n_filters": 1},
    {"runs": 0},
    {"aug_mask_prob": 1.5},
    {"aug_snr_db": [80.0, 25.0]},           # reversed pair
    {"synth_classes": 1},
    {"ingest_min_files": 0},
])
def test_validation_rejects(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_config_hash_ignores_paths():
    a = ExperimentConfig()
    b = dataclasses.replace(a, data_root="/elsewhere", work_dir="/tmp/x",
                            ir_dir="/irs")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != dataclasses.replace(a, seed=1).config_hash()
    assert a.config_hash() != dataclasses.replace(a, frontend="mel").config_hash()


def test_data_hash_tracks_data_keys_only():
    a = ExperimentConfig()
    trained_differently = dataclasses.replace(
        a, learning_rate=0.1, patience=3, frontend="mel", runs=1)
    assert a.data_hash() == trained_differently.data_hash()
    assert a.data_hash() != dataclasses.replace(a, chunk_seconds=4.0).data_hash()
    assert a.data_hash() != dataclasses.replace(a, seed=1).data_hash()
    # the impulse response directory changes the augmented audio
    assert a.data_hash() != dataclasses.replace(a, ir_dir="/irs").data_hash()


# ---------------------------------------------------------------------------
# CLI driver

def write_config(tmp_path, **over):
    cfg = {
        "data_root": str(tmp_path / "corpus"),
        "work_dir": str(tmp_path / "work"),
        "sample_rate": 44100,
        "chunk_seconds": 0.25,
        "hop_seconds": 0.0625,
        "min_tail_seconds": 0.0625,
        "ingest_min_files": 2,
        "seed": 5,
        "synth_classes": 2,
        "synth_files_per_class": 3,
        "synth_duration_range": [0.8, 1.0],
        "aug_generations": 1,
        "frontend": "mel",
        "max_epochs": 2,
        "patience": 1,
        "runs": 1,
    }
    cfg.update(over)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_cli_help_and_version():
    for argv in (["--help"], ["synth", "--help"], ["--version"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 0


def test_cli_usage_errors(tmp_path, capsys):
    assert main([]) == 1
    assert main(["bogus-stage"]) == 1
    assert main(["synth"]) == 1            # --config is required
    assert main(["synth", "--config", str(tmp_path / "nope.yaml")]) == 1
    cfg = write_config(tmp_path)
    assert main(["synth", "--config", str(cfg), "--jobs", "0"]) == 1
    assert main(["chunk", "--config", str(cfg), "--frontend", "mel"]) == 1
    err = capsys.readouterr().err
    assert "config error:" in err


def test_cli_stage_chain_with_receipts(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    work = tmp_path / "work"
    for stage in ("synth", "ingest", "split", "chunk", "augment"):
        assert main([stage, "--config", str(cfg_path)]) == 0, stage
        receipt = json.loads((work / "receipts" / f"{stage}.json").read_text())
        assert receipt["stage"] == stage
        assert receipt["frontend"] is None
        assert len(receipt["config_hash"]) == 16
        assert receipt["seed"] == 5
        assert receipt["outputs"]
    assert (work / "manifest.csv").exists()
    assert (work / "split_manifest.csv").exists()
    assert (work / "chunks" / "chunk_index.csv").exists()
    assert (work / "chunks" / "augment_lineage.csv").exists()
    assert (work / "config.yaml").exists()
    out = capsys.readouterr().out
    assert "generated chunks" in out


def test_cli_refuses_out_of_order(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    assert main(["synth", "--config", str(cfg_path)]) == 0
    assert main(["chunk", "--config", str(cfg_path)]) == 2
    err = capsys.readouterr().err
    assert "data error:" in err
    assert "bugsong split" in err


def test_cli_hash_mismatch_needs_force(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    for stage in ("synth", "ingest"):
        assert main([stage, "--config", str(cfg_path)]) == 0
    # a different seed invalidates the ingest receipt for downstream stages
    cfg_path2 = write_config(tmp_path, seed=6)
    assert main(["split", "--config", str(cfg_path2)]) == 2
    assert "pass --force" in capsys.readouterr().err
    assert main(["split", "--config", str(cfg_path2), "--force"]) == 0


def test_cli_train_gate_requires_augment(tmp_path, capsys):
    cfg_path = write_config(tmp_path)   # aug_generations 1
    for stage in ("synth", "ingest", "split", "chunk"):
        assert main([stage, "--config", str(cfg_path)]) == 0
    assert main(["train", "--config", str(cfg_path)]) == 2
    assert "bugsong augment" in capsys.readouterr().err


def test_cli_analyze_filters_needs_leaf(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    assert main(["analyze-filters", "--config", str(cfg_path)]) == 1
    assert "trainable frontend" in capsys.readouterr().err
