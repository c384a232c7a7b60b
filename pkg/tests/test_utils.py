import json
import logging

import pytest
import numpy as np
import pandas as pd

from utils import (LOG_FORMAT, SEED_ENV_VAR, ProgressTracker, RunConfig, RunLogger, configure_logging,
                   detect_file_format, load_data, load_run_config, parse_key_value, read_config_file,
                   read_run_log, save_data, validate_run_config)
from utils.error_handling import ConfigurationError, DataLoadingError, ValidationError


def write_config(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_defaults_are_the_full_architecture():
    config = load_run_config(env={})
    assert config.embed_dim == 96
    assert config.stage_heads == (2, 4, 8, 16)
    assert config.effective_depths() == (2, 2, 6, 2)
    assert (config.window_k, config.mask_ratio, config.noise_std) == (7, 0.5, 0.2)
    assert (config.tau, config.alpha, config.weight_decay) == (0.07, 0.5, 4e-4)


def test_layering_file_then_flags(tmp_path):
    path = write_config(tmp_path, "# desk run\nembed_dim = 16\nstage_heads = 1,2,4,8\nbatch_size = 8  # small\n")
    config = load_run_config(path, {"batch_size": 4, "alpha": None}, env={})
    assert config.embed_dim == 16
    assert config.stage_heads == (1, 2, 4, 8)
    assert config.batch_size == 4
    assert config.alpha == 0.5


def test_base_sits_below_file(tmp_path):
    path = write_config(tmp_path, "n_classes = 4\n")
    config = load_run_config(path, env={}, base={"n_classes": 2, "embed_dim": 16, "stage_heads": [1, 2, 4, 8]})
    assert config.n_classes == 4
    assert config.embed_dim == 16


def test_yaml_and_json_files(tmp_path):
    yaml_path = write_config(tmp_path, "window_k: 5\nmanifests: [a.csv, b.csv]\n", "run.yaml")
    config = load_run_config(yaml_path, env={})
    assert config.window_k == 5
    assert config.manifests == ("a.csv", "b.csv")
    json_path = write_config(tmp_path, json.dumps({"finetune_lr": None, "mode": "linear_eval"}), "run.json")
    config = load_run_config(json_path, env={})
    assert config.effective_finetune_lr() == 1e-3


def test_seed_environment_fallback(tmp_path):
    assert load_run_config(env={SEED_ENV_VAR: "17"}).seed == 17
    assert load_run_config(overrides={"seed": 3}, env={SEED_ENV_VAR: "17"}).seed == 3
    path = write_config(tmp_path, "seed = 5\n")
    assert load_run_config(path, env={SEED_ENV_VAR: "17"}).seed == 5


def test_validation_collects_every_problem():
    with pytest.raises(ValidationError) as err:
        load_run_config(overrides={"window_k": 4, "alpha": 1.5, "batch_size": 0, "precision": "float16"}, env={})
    messages = "\n".join(err.value.errors)
    assert len(err.value.errors) == 4
    for key in ("window_k", "alpha", "batch_size", "precision"):
        assert key in messages


def test_embed_dim_head_divisibility():
    with pytest.raises(ValidationError) as err:
        validate_run_config(RunConfig(embed_dim=20))
    assert any("head count 8" in e for e in err.value.errors)


def test_unknown_and_unparseable_keys():
    with pytest.raises(ValidationError) as err:
        RunConfig.from_dict({"embed": 3})
    assert err.value.errors == ["unknown key 'embed'"]
    with pytest.raises(ValidationError):
        RunConfig.from_dict({"batch_size": "many"})


def test_value_coercion():
    config = RunConfig.from_dict({"blocks_per_stage": "none", "threads": "2", "progress": "off",
                                  "stage_depths": "(1, 1)", "stage_heads": [1, 2]})
    assert config.blocks_per_stage is None
    assert config.threads == 2
    assert config.progress is False
    assert config.stage_depths == (1, 1)


def test_replace_revalidates_types():
    config = RunConfig().replace(manifests=["x.csv"], embed_dim="16")
    assert config.manifests == ("x.csv",)
    assert config.embed_dim == 16


def test_malformed_key_value_file(tmp_path):
    with pytest.raises(ValidationError) as err:
        parse_key_value("a = 1\nnot a pair\nalso bad\n", source="x.cfg")
    assert err.value.errors[0].startswith("x.cfg:2:")
    assert len(err.value.errors) == 2
    with pytest.raises(DataLoadingError):
        read_config_file(tmp_path / "missing.cfg")
    with pytest.raises(ValidationError):
        read_config_file(write_config(tmp_path, "- 1\n- 2\n", "list.yaml"))


def test_shipped_configs_are_valid():
    from pathlib import Path
    root = Path(__file__).resolve().parent.parent / "configs"
    desk = load_run_config(root / "desk.cfg", env={})
    assert desk.embed_dim == 16 and desk.effective_depths() == (1, 1, 1, 1)
    assert load_run_config(root / "default.cfg", env={}).embed_dim == 96


class TestRunLogger:

    def test_header_round_trip(self, tmp_path):
        config = RunConfig(embed_dim=16, stage_heads=(1, 2, 4, 8), manifests=("a.csv",))
        log = RunLogger(tmp_path / "log.csv", ["epoch", "recon_loss"], config)
        log.log(epoch=0, recon_loss=1.5)
        log.log(epoch=1, recon_loss=1.25)
        header, rows = read_run_log(log.path)
        assert RunConfig.from_dict(header) == config
        assert RunConfig.from_header(log.path) == config
        assert list(rows.columns) == ["epoch", "recon_loss"]
        np.testing.assert_array_equal(rows["recon_loss"], [1.5, 1.25])
        assert log.path.read_text().startswith("# {")

    def test_append_keeps_rows(self, tmp_path):
        RunLogger(tmp_path / "log.csv", ["epoch"]).log(epoch=0)
        RunLogger(tmp_path / "log.csv", ["epoch"], append=True).log(epoch=1)
        assert list(read_run_log(tmp_path / "log.csv")[1]["epoch"]) == [0, 1]

    def test_truncate_after(self, tmp_path):
        log = RunLogger(tmp_path / "log.csv", ["epoch", "loss"], RunConfig())
        for e in range(5):
            log.log(epoch=e, loss=float(e))
        log.truncate_after("epoch", 2)
        header, rows = read_run_log(log.path)
        assert list(rows["epoch"]) == [0, 1, 2]
        assert header["embed_dim"] == 96

    def test_missing_column(self, tmp_path):
        log = RunLogger(tmp_path / "log.csv", ["epoch", "loss"])
        with pytest.raises(ConfigurationError):
            log.log(epoch=0)


class TestFileIO:

    @pytest.mark.parametrize("name, fmt", [("a.csv", "csv"), ("a.yml", "yaml"), ("a.npy", "numpy"),
                                           ("a.cfg", "keyvalue"), ("a.JSON", "json")])
    def test_detect_format(self, name, fmt):
        assert detect_file_format(name) == fmt

    def test_save_and_load(self, tmp_path):
        save_data({"b": 1, "a": [1, 2]}, str(tmp_path / "out" / "x.json"))
        assert load_data(str(tmp_path / "out" / "x.json")) == {"a": [1, 2], "b": 1}
        save_data(pd.DataFrame({"n": [1, 2]}), str(tmp_path / "x.csv"))
        assert list(load_data(str(tmp_path / "x.csv"))["n"]) == [1, 2]
        save_data(np.arange(3), str(tmp_path / "x.npy"))
        np.testing.assert_array_equal(load_data(str(tmp_path / "x.npy")), [0, 1, 2])

    def test_unreadable(self, tmp_path):
        with pytest.raises(DataLoadingError):
            load_data(str(tmp_path / "absent.json"))


def test_configure_logging_is_idempotent(tmp_path):
    root = logging.getLogger()
    before = len(root.handlers)
    configure_logging("DEBUG", str(tmp_path / "logs" / "run.log"))
    configure_logging("INFO")
    installed = [h for h in root.handlers if getattr(h, "_ecgnat", False)]
    assert len(installed) == 1
    assert installed[0].formatter._fmt == LOG_FORMAT
    assert root.level == logging.INFO
    for handler in installed:
        root.removeHandler(handler)
        handler.close()
    assert len(root.handlers) <= before


def test_progress_tracker_context(caplog):
    with caplog.at_level(logging.INFO, logger="utils"):
        with ProgressTracker(3, desc="unit", disable=True) as tracker:
            tracker.update(2, loss=0.5)
            tracker.update()
    assert "unit completed" in caplog.text
