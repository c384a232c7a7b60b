import pytest
import numpy as np

from autograd import Tensor, functional as F, grad, no_grad
from models import ECGNAT, NATBlock, ModelConfig, count_params, parameter_shapes
from models.model_manager import (Checkpoint, CheckpointManager, decode_checkpoint, encode_checkpoint,
                                  load_checkpoint, read_checkpoint_header, restore_rng, rng_state,
                                  save_checkpoint)
from utils import RunConfig
from utils.error_handling import CheckpointError, ConfigurationError, DimensionError


@pytest.fixture
def full_config():
    return ModelConfig()


@pytest.fixture
def mini_model(mini_config):
    return ECGNAT(mini_config, rng=0)


def test_stage_ladder(full_config):
    assert full_config.token_len == 625
    assert full_config.stage_shapes() == [(96, 625), (192, 312), (384, 156), (768, 78)]
    assert full_config.latent_shape == (768, 78)
    plan = full_config.decoder_plan()
    assert [step[3] for step in plan] == [156, 312, 625, 1250, 2500]
    assert plan[-1][1] == 12


def test_parameter_count_in_range(full_config):
    n = count_params(full_config)
    assert 25_000_000 <= n <= 35_000_000


def test_parameter_shapes_match_module(mini_config, mini_model):
    expected = parameter_shapes(mini_config)
    actual = {name: p.shape for name, p in mini_model.named_parameters()}
    assert actual == expected
    assert mini_model.num_parameters() == count_params(mini_config)


def test_full_model_round_trip_shapes(full_config):
    model = ECGNAT(full_config, rng=0)
    x = np.random.default_rng(0).standard_normal((12, 2500)).astype(np.float32)
    with no_grad():
        tokens = model.tokenize(x)
        assert tokens.shape == (96, 625)
        z = model.encode(x)
        assert z.shape == (768, 78)
        assert model.decode(z).shape == (12, 2500)
        assert model.classify(z).shape == (3,)
        assert model.embed(z).shape == (768,)


def test_downsampler_halves_length(mini_model):
    u = Tensor(np.ones((2, 4, 7), dtype=np.float32))
    assert mini_model.downsample(u, 0).shape == (2, 8, 3)
    with pytest.raises(DimensionError):
        mini_model.downsample(Tensor(np.ones((4, 1), dtype=np.float32)))


def test_batched_forward_matches_single(mini_config, mini_model, float64):
    model = ECGNAT(mini_config, rng=3)
    x = np.random.default_rng(1).standard_normal((3, 2, 32))
    with no_grad():
        batched = model(x).data
        for i in range(3):
            np.testing.assert_allclose(model(x[i]).data, batched[i], atol=1e-12)


def test_block_is_identity_with_zero_projections(rng, float64):
    block = NATBlock(8, 2, 3, 2.0, rng)
    for p in (block.proj.weight, block.proj.bias, block.fc2.weight, block.fc2.bias):
        p.data[...] = 0.0
    x = Tensor(rng.standard_normal((2, 5, 8)))
    np.testing.assert_array_equal(block(x).data, x.data)


def test_encoder_reduces_to_tokenizer_and_downsamplers_without_branches(mini_config, float64):
    model = ECGNAT(mini_config, rng=5)
    for stage in model.stages:
        for block in stage:
            for p in (block.proj.weight, block.proj.bias, block.fc2.weight, block.fc2.bias):
                p.data[...] = 0.0
    x = np.random.default_rng(2).standard_normal((3, mini_config.n_leads, mini_config.input_len))
    with no_grad():
        expected = model.tokenize(x)
        for s in range(mini_config.n_stages - 1):
            expected = model.downsample(expected, s)
        np.testing.assert_array_equal(model.encode(x).data, expected.data)


@pytest.mark.parametrize("position, support", [(6, [5, 6, 7]), (0, [0, 1, 2]), (11, [9, 10, 11])])
def test_block_output_depends_only_on_its_window(mini_config, float64, position, support):
    model = ECGNAT(mini_config, rng=1)
    u = Tensor(np.random.default_rng(4).standard_normal((4, 12)), requires_grad=True, dtype=np.float64)
    out = model.nat_block(u, stage=0)
    (du,) = grad(F.sum(F.index(out, (slice(None), position))), [u])
    assert list(np.flatnonzero(du.any(axis=0))) == support


def test_latent_position_has_a_bounded_receptive_field(float64):
    config = ModelConfig(n_leads=2, input_len=256, embed_dim=4, stage_heads=(1, 2), blocks_per_stage=1,
                         window_k=3, n_classes=2, mlp_ratio=2.0)
    model = ECGNAT(config, rng=0)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 256)), requires_grad=True, dtype=np.float64)
    z = model.encode(x)
    assert z.shape == (8, 32)
    (dx,) = grad(F.sum(F.index(z, (slice(None), 0))), [x])
    # latent 0 <- stage-2 {0..2} <- stage-1 {0..6} <- tokens {0..6} <- samples {0..27}
    assert dx[:, :28].any()
    assert not dx[:, 28:].any()


def test_block_rejects_token_major_mismatch(rng):
    block = NATBlock(8, 2, 3, 2.0, rng)
    with pytest.raises(DimensionError):
        block(Tensor(np.zeros((1, 8, 5), dtype=np.float32)))
    with pytest.raises(DimensionError):
        NATBlock(6, 4, 3, 2.0, rng)


def test_zero_classifier_returns_bias(mini_model):
    mini_model.classifier.weight.data[...] = 0.0
    mini_model.classifier.bias.data[...] = np.array([0.25, -1.5], dtype=np.float32)
    z = Tensor(np.random.default_rng(0).standard_normal((3, 8, 4)).astype(np.float32))
    logits = mini_model.classify(z).data
    np.testing.assert_array_equal(logits, np.tile([0.25, -1.5], (3, 1)).astype(np.float32))


def test_wrong_input_shape(mini_model):
    with pytest.raises(DimensionError):
        mini_model.encode(np.zeros((3, 32), dtype=np.float32))
    with pytest.raises(DimensionError):
        mini_model.decode(np.zeros((8, 5), dtype=np.float32))


def test_encoder_and_head_parameter_groups(mini_model):
    encoder = {name for name, _ in mini_model.encoder_parameters()}
    head = {name for name, _ in mini_model.head_parameters()}
    assert head == {"classifier.weight", "classifier.bias"}
    assert "tok1.weight" in encoder and "stages.1.0.rpb" in encoder and "downsamplers.0.bias" in encoder
    assert not any(name.startswith("decoder.") for name in encoder)


class TestModelConfig:

    def test_blocks_per_stage_overrides_depths(self):
        config = ModelConfig(blocks_per_stage=1)
        assert config.depths == (1, 1, 1, 1)

    @pytest.mark.parametrize("changes", [
        {"embed_dim": 90},
        {"window_k": 4},
        {"activation": "tanh"},
        {"stage_depths": (2, 2)},
        {"input_len": 16},
    ])
    def test_invalid(self, changes):
        with pytest.raises(ConfigurationError):
            ModelConfig(**changes)

    def test_dict_round_trip_ignores_run_keys(self):
        config = ModelConfig(embed_dim=16, stage_heads=(1, 2, 4, 8), blocks_per_stage=1)
        values = config.to_dict()
        assert values["stage_heads"] == [1, 2, 4, 8]
        assert ModelConfig.from_dict(dict(values, batch_size=7)) == config

    def test_from_run_config(self):
        run = RunConfig(embed_dim=16, window_k=5, n_classes=4)
        config = ModelConfig.from_run_config(run)
        assert (config.embed_dim, config.window_k, config.n_classes) == (16, 5, 4)


class TestCheckpoint:

    def _checkpoint(self, model, config):
        rng = np.random.default_rng(5)
        rng.standard_normal(3)
        return Checkpoint(config=config.to_dict(), tensors=model.state_dict(),
                          meta={"epoch": 3, "kind": "pretrain"}, rng_state=rng_state(rng))

    def test_round_trip_is_bit_exact(self, tmp_path, mini_model, mini_config):
        ckpt = self._checkpoint(mini_model, mini_config)
        blob = encode_checkpoint(ckpt)
        back = decode_checkpoint(blob)
        assert encode_checkpoint(back) == blob
        for name, arr in ckpt.tensors.items():
            assert back.tensors[name].dtype == arr.dtype
            np.testing.assert_array_equal(back.tensors[name], arr)

        path = save_checkpoint(ckpt, tmp_path / "a.ckpt")
        save_checkpoint(load_checkpoint(path), tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_weights_restore_into_fresh_model(self, mini_model, mini_config):
        ckpt = decode_checkpoint(encode_checkpoint(self._checkpoint(mini_model, mini_config)))
        fresh = ECGNAT(mini_config, rng=99)
        assert fresh.load_state_dict(ckpt.tensors) == []
        for (name, a), (_, b) in zip(mini_model.named_parameters(), fresh.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_rng_state_resumes_stream(self, mini_model, mini_config):
        ckpt = decode_checkpoint(encode_checkpoint(self._checkpoint(mini_model, mini_config)))
        reference = np.random.default_rng(5)
        reference.standard_normal(3)
        np.testing.assert_array_equal(restore_rng(ckpt.rng_state).standard_normal(4),
                                      reference.standard_normal(4))

    def test_header_only_read(self, tmp_path, mini_model, mini_config):
        path = save_checkpoint(self._checkpoint(mini_model, mini_config), tmp_path / "m.ckpt")
        header = read_checkpoint_header(path)
        assert header["config"]["embed_dim"] == mini_config.embed_dim
        assert header["meta"]["epoch"] == 3
        assert "tok1.weight" in header["tensors"]

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
        with pytest.raises(CheckpointError):
            read_checkpoint_header(path)

    def test_truncated_payload_rejected(self, mini_model, mini_config):
        blob = encode_checkpoint(self._checkpoint(mini_model, mini_config))
        with pytest.raises(CheckpointError):
            decode_checkpoint(blob[:-10])

    def test_strict_load_reports_mismatch(self, mini_model):
        state = mini_model.state_dict()
        state.pop("classifier.bias")
        with pytest.raises(CheckpointError):
            mini_model.load_state_dict(state)
        assert mini_model.load_state_dict(state, strict=False) == ["classifier.bias"]

    def test_subset_strips_prefix(self):
        ckpt = Checkpoint(tensors={"model.a": np.zeros(1), "adam.m.a": np.ones(1)})
        assert list(ckpt.subset("model.")) == ["a"]


class TestCheckpointManager:

    def test_naming_and_latest(self, tmp_path, mini_model, mini_config):
        manager = CheckpointManager(tmp_path / "ckpts")
        assert manager.latest() is None
        for epoch in (1, 2):
            ckpt = Checkpoint(config=mini_config.to_dict(), tensors=mini_model.state_dict(),
                              meta={"epoch": epoch})
            path = manager.save(ckpt, "pretrain", epoch)
        assert path.name == "pretrain_epoch0002.ckpt"
        assert manager.latest().read_bytes() == path.read_bytes()
        listed = manager.list_checkpoints()
        assert list(listed) == ["pretrain_epoch0001.ckpt", "pretrain_epoch0002.ckpt"]
        assert listed["pretrain_epoch0001.ckpt"] == {"epoch": 1}
        assert manager.load("latest.ckpt").meta == {"epoch": 2}

    def test_missing_checkpoint(self, tmp_path):
        manager = CheckpointManager(tmp_path)
        assert manager.get_checkpoint_metadata("nope.ckpt") is None
        with pytest.raises(CheckpointError):
            manager.load("nope.ckpt")
