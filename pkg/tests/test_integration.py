"""End-to-end runs of the `ecgnat` command line on small synthetic corpora."""

import json
import logging
from pathlib import Path

import pytest
import pandas as pd

from app import build_parser, collect_overrides, main
from simulation import synth_corpus
from training import run_finetune, run_pretrain, load_pretrain_datasets
from utils import load_run_config, read_run_log
from utils.error_handling import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, EXIT_VERIFICATION

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(autouse=True)
def restore_logging():
    """Drop the handlers `main` installs so they do not outlive captured streams."""
    yield
    root = logging.getLogger()
    for handler in [h for h in root.handlers if getattr(h, "_ecgnat", False)]:
        root.removeHandler(handler)
        handler.close()
    root.setLevel(logging.WARNING)


@pytest.fixture
def cli_config(tmp_path, tiny_config):
    """The tiny run configuration written as a JSON config file."""
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config.to_dict()))
    return path


@pytest.fixture
def cli_corpus(tmp_path, cli_config):
    out = tmp_path / "corpus"
    assert main(["synth", "--config", str(cli_config), "--out-dir", str(out), "--log-level", "WARNING"]) == EXIT_OK
    return out / "manifest.csv"


def test_overrides_from_flags_and_set():
    args = build_parser().parse_args(["finetune", "--set", "tau=0.1", "--set", "seed=4", "--alpha", "0.25",
                                      "--manifest", "a.csv", "--manifest", "b.csv"])
    overrides = collect_overrides(args)
    assert overrides["tau"] == "0.1"
    assert overrides["alpha"] == 0.25
    assert overrides["manifests"] == ["a.csv", "b.csv"]
    assert "mode" not in overrides
    config = load_run_config(overrides=overrides, env={})
    assert (config.tau, config.seed, config.alpha) == (0.1, 4, 0.25)


def test_synth_writes_manifest(cli_corpus, tiny_config):
    rows = pd.read_csv(cli_corpus)
    assert len(rows) == 3 * tiny_config.n_per_class
    assert sorted(rows["label"].unique()) == [0, 1, 2]
    assert (cli_corpus.parent / "records").is_dir()


def test_pretrain_finetune_eval(tmp_path, cli_config, cli_corpus, capsys):
    common = ["--config", str(cli_config), "--log-level", "WARNING"]
    pre_dir, ft_dir = tmp_path / "pre", tmp_path / "ft"

    assert main(["pretrain", *common, "--manifest", str(cli_corpus), "--out-dir", str(pre_dir)]) == EXIT_OK
    assert (pre_dir / "pretrain_epoch0002.ckpt").exists()
    assert (pre_dir / "latest.ckpt").exists()
    _, log = read_run_log(pre_dir / "pretrain_log.csv")
    assert list(log["epoch"]) == [0, 1, 2]
    assert "epoch 2: recon_loss=" in capsys.readouterr().out

    assert main(["finetune", *common, "--manifest", str(cli_corpus), "--out-dir", str(ft_dir),
                 "--init-checkpoint", str(pre_dir / "latest.ckpt")]) == EXIT_OK
    summary = pd.read_csv(ft_dir / "finetune_summary.csv")
    assert summary["repeats"].iloc[0] == 2
    assert "accuracy=" in capsys.readouterr().out
    checkpoint = ft_dir / "repeat0" / "finetune_epoch0002.ckpt"
    assert checkpoint.exists()

    outputs = []
    for name in ("a.json", "b.json"):
        code = main(["eval", str(checkpoint), "--manifest", str(cli_corpus), "--output", str(tmp_path / name),
                     "--log-level", "WARNING"])
        assert code == EXIT_OK
        outputs.append((tmp_path / name).read_text())
    assert outputs[0] == outputs[1]
    result = json.loads(outputs[0])
    assert result["n_samples"] == 12
    assert 0.0 <= result["accuracy"] <= 1.0

    code = main(["eval", str(checkpoint), "--manifest", str(cli_corpus), "--set", "n_classes=4",
                 "--output", str(tmp_path / "c.json"), "--log-level", "WARNING"])
    assert code == EXIT_RUNTIME
    assert not (tmp_path / "c.json").exists()


def test_ablation_modes_complete(tmp_path, cli_config, cli_corpus):
    common = ["--config", str(cli_config), "--manifest", str(cli_corpus), "--log-level", "WARNING"]
    assert main(["pretrain", *common, "--ablation", "zero-mask", "--epochs", "1",
                 "--out-dir", str(tmp_path / "zm")]) == EXIT_OK
    assert main(["finetune", *common, "--alpha", "0", "--repeats", "1", "--epochs", "1",
                 "--out-dir", str(tmp_path / "ce")]) == EXIT_OK
    header, rows = read_run_log(tmp_path / "zm" / "pretrain_log.csv")
    assert header["ablation"] == "zero-mask"
    _, rows = read_run_log(tmp_path / "ce" / "finetune_log_r0.csv")
    assert list(rows.columns)[:3] == ["epoch", "total_loss", "supcon"]


def test_bench_writes_table(tmp_path, cli_config, capsys):
    output = tmp_path / "bench.csv"
    code = main(["bench", "--config", str(cli_config), "--lengths", "32,64", "--repeats", "1",
                 "--impls", "na_forward", "--output", str(output), "--log-level", "WARNING"])
    assert code == EXIT_OK
    assert output.read_text().startswith("n,impl,flops_est,mean_ms,std_ms\n")
    assert (tmp_path / "bench.meta.yaml").exists()
    assert "parameters:" in capsys.readouterr().out


class TestExitCodes:

    def test_invalid_configuration(self, tmp_path, cli_config):
        assert main(["pretrain", "--config", str(cli_config), "--set", "window_k=4",
                     "--log-level", "CRITICAL"]) == EXIT_VALIDATION
        assert main(["synth", "--set", "not_a_key=1", "--log-level", "CRITICAL"]) == EXIT_VALIDATION

    def test_missing_manifest_is_a_configuration_error(self, tmp_path, cli_config):
        code = main(["pretrain", "--config", str(cli_config), "--out-dir", str(tmp_path / "x"),
                     "--log-level", "CRITICAL"])
        assert code == EXIT_VALIDATION

    def test_missing_checkpoint_is_a_runtime_error(self, tmp_path, cli_corpus):
        code = main(["eval", str(tmp_path / "absent.ckpt"), "--manifest", str(cli_corpus),
                     "--log-level", "CRITICAL"])
        assert code == EXIT_RUNTIME

    def test_verify_quick_passes(self, capsys):
        assert main(["verify", "--level", "quick", "--log-level", "WARNING"]) == EXIT_OK
        assert capsys.readouterr().out.strip().endswith("PASSED")

    def test_verify_detects_injected_fault(self, capsys):
        code = main(["verify", "--level", "quick", "--suites", "oracle", "--inject-fault", "na-backward",
                     "--log-level", "CRITICAL"])
        assert code == EXIT_VERIFICATION
        assert "FAILED" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# Desk-scale acceptance (python -m pytest --runslow)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    config = load_run_config(CONFIG_DIR / "desk.cfg", {"out_dir": str(root / "pre"), "progress": False}, env={})
    synth_corpus(root / "corpus", config.n_per_class, seed=config.seed, sampling_rate=config.fs,
                 duration=config.input_len / (config.fs / 2.0), n_leads=config.n_leads)
    config = config.replace(manifests=[str(root / "corpus" / "manifest.csv")])
    pretrained = run_pretrain(config, load_pretrain_datasets(config))
    return root, config, pretrained


@pytest.mark.slow
def test_desk_pretraining_halves_masked_error(desk_run):
    _, config, pretrained = desk_run
    assert len(pretrained.losses) == config.pretrain_epochs
    assert pretrained.losses[-1] <= 0.5 * pretrained.initial_loss


@pytest.mark.slow
def test_desk_full_finetune_accuracy(desk_run):
    root, config, pretrained = desk_run
    result = run_finetune(config, init_checkpoint=pretrained.checkpoint, out_dir=root / "ft")
    assert result.summary["accuracy_mean"] >= 0.90


@pytest.mark.slow
def test_desk_low_label_fraction(desk_run):
    root, config, pretrained = desk_run
    result = run_finetune(config.replace(label_fraction=0.05), init_checkpoint=pretrained.checkpoint,
                          out_dir=root / "ft_low")
    assert result.summary["accuracy_mean"] >= 0.75


@pytest.mark.slow
def test_desk_linear_eval_beats_random_encoder(desk_run):
    root, config, pretrained = desk_run
    frozen = config.replace(mode="linear_eval")
    from_pretrained = run_finetune(frozen, init_checkpoint=pretrained.checkpoint, out_dir=root / "lin_pre")
    from_random = run_finetune(frozen, out_dir=root / "lin_rand")
    gain = from_pretrained.summary["accuracy_mean"] - from_random.summary["accuracy_mean"]
    assert gain >= 0.10
