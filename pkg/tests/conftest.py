import numpy as np
import pytest

from autograd import precision
from simulation import synth_corpus
from utils import RunConfig
from verification import mini_model_config


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the desk-scale acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="desk-scale run; use --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def float64():
    with precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mini_config():
    return mini_model_config()


@pytest.fixture
def tiny_config(tmp_path):
    """Two-lead, two-stage run small enough for end-to-end tests."""
    return RunConfig(n_leads=2, input_len=512, embed_dim=8, stage_heads=(1, 2), blocks_per_stage=1,
                     mlp_ratio=2.0, window_k=3, n_classes=3, pretrain_epochs=2, finetune_epochs=2,
                     batch_size=4, repeats=2, n_per_class=4, prefetch=0, progress=False,
                     pretrain_lr=1e-3, finetune_lr=1e-3, out_dir=str(tmp_path / "run"))


@pytest.fixture
def tiny_corpus(tmp_path, tiny_config):
    """(manifest path, config pointing at it) for a 12-record synthetic corpus."""
    out = tmp_path / "corpus"
    synth_corpus(out, tiny_config.n_per_class, seed=0, sampling_rate=tiny_config.fs,
                 duration=tiny_config.input_len / (tiny_config.fs / 2.0), n_leads=tiny_config.n_leads)
    manifest = out / "manifest.csv"
    return manifest, tiny_config.replace(manifests=[str(manifest)])
