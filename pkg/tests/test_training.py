"""Tests for masking, the training objectives and the pretraining / fine-tuning loops."""

import math

import pytest
import numpy as np

from autograd import Tensor
from models import ECGNAT
from models.model_manager import load_checkpoint
from training import (FINETUNE_COLUMNS, FinetuneConfig, FinetuneState, MaskPlan, Predictions, alpha_sweep, apply_mask,
                      ce_loss, corrupt, cosine_sim, finetune_step, held_out_loss, masked_reconstruction,
                      positive_pairs, recon_loss, run_finetune, run_pretrain, sample_plans, supcon_loss, total_loss,
                      zero_mask_variant)
from utils import read_run_log
from utils.error_handling import ConfigurationError, ContractError, DimensionError

# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------


class TestMasking:

    def test_sample_plan_count_and_order(self, rng):
        plan = MaskPlan.sample(625, 0.5, 0.2, rng)
        assert plan.indices.size == 312
        assert np.all(np.diff(plan.indices) > 0)
        assert plan.token_mask().sum() == 312

    def test_sample_mask_covers_token_spans(self):
        plan = MaskPlan(indices=[1], n_tokens=3)
        np.testing.assert_array_equal(plan.sample_mask(12), [0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0])

    def test_empty_mask_is_identity(self, rng):
        tokens = Tensor(rng.standard_normal((4, 10)).astype(np.float32))
        out = apply_mask(tokens, MaskPlan(indices=[], n_tokens=10), rng)
        np.testing.assert_array_equal(out.data, tokens.data)

    def test_zero_noise_is_identity(self, rng):
        tokens = Tensor(rng.standard_normal((2, 4, 10)).astype(np.float32))
        plans = sample_plans(2, 10, 0.5, 0.0, rng)
        np.testing.assert_array_equal(apply_mask(tokens, plans, rng).data, tokens.data)

    def test_noise_only_on_masked_columns(self, rng):
        tokens = Tensor(np.zeros((3, 8), dtype=np.float32))
        plan = MaskPlan(indices=[2, 5], n_tokens=8, noise_std=1.0)
        out = apply_mask(tokens, plan, rng).data
        assert not out[:, [0, 1, 3, 4, 6, 7]].any()
        assert np.all(out[:, [2, 5]] != 0)

    def test_fixed_seed_is_reproducible(self):
        tokens = Tensor(np.ones((2, 4, 16), dtype=np.float32))
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(11)
            outs.append(apply_mask(tokens, sample_plans(2, 16, 0.5, 0.2, rng), rng).data)
        np.testing.assert_array_equal(*outs)

    def test_zero_mask_ablation(self, rng):
        tokens = Tensor(rng.standard_normal((3, 6)).astype(np.float32))
        plan = MaskPlan(indices=[0, 4], n_tokens=6)
        out = zero_mask_variant(tokens, plan).data
        assert not out[:, [0, 4]].any()
        np.testing.assert_array_equal(out[:, [1, 2, 3, 5]], tokens.data[:, [1, 2, 3, 5]])
        np.testing.assert_array_equal(corrupt(tokens, plan, rng, "zero-mask").data, out)
        with pytest.raises(ContractError):
            corrupt(tokens, plan, rng, "shuffle")

    def test_gradient_passes_through(self, rng):
        tokens = Tensor(rng.standard_normal((2, 6)), requires_grad=True, dtype=np.float64)
        apply_mask(tokens, MaskPlan(indices=[1], n_tokens=6), rng).sum().backward()
        np.testing.assert_array_equal(tokens.grad, np.ones((2, 6)))

    @pytest.mark.parametrize("kwargs", [{"indices": [6], "n_tokens": 6}, {"indices": [1, 1], "n_tokens": 6},
                                        {"indices": [0], "n_tokens": 6, "noise_std": -1.0}])
    def test_plan_contract(self, kwargs):
        with pytest.raises(ContractError):
            MaskPlan(**kwargs)

    def test_plan_shape_checks(self, rng):
        tokens = Tensor(np.zeros((2, 4, 8), dtype=np.float32))
        with pytest.raises(DimensionError):
            apply_mask(tokens, MaskPlan(indices=[0], n_tokens=8), rng)
        with pytest.raises(DimensionError):
            apply_mask(tokens, sample_plans(2, 7, 0.5, 0.2, rng), rng)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


class TestReconstructionLoss:

    def test_masked_span_mean(self, float64):
        x = np.zeros((1, 8))
        x_hat = np.zeros((1, 8))
        x_hat[0, :4] = [1.0, 1.0, 2.0, 2.0]
        x_hat[0, 4:] = 100.0  # outside the mask
        loss = recon_loss(x, Tensor(x_hat), MaskPlan(indices=[0], n_tokens=2))
        assert loss.item() == pytest.approx(2.5)

    def test_nothing_masked_is_zero(self, float64, rng):
        x_hat = Tensor(rng.standard_normal((2, 8)), requires_grad=True)
        loss = recon_loss(np.zeros((2, 8)), x_hat, MaskPlan(indices=[], n_tokens=2))
        loss.backward()
        assert loss.item() == 0.0
        assert not x_hat.grad.any()

    def test_batched_plans(self, float64):
        x = np.zeros((2, 1, 8))
        x_hat = np.ones((2, 1, 8))
        plans = [MaskPlan(indices=[0], n_tokens=2), MaskPlan(indices=[0, 1], n_tokens=2)]
        assert recon_loss(x, Tensor(x_hat), plans).item() == pytest.approx(1.0)

    def test_shape_mismatch(self, float64):
        with pytest.raises(DimensionError):
            recon_loss(np.zeros((1, 8)), Tensor(np.zeros((1, 4))), MaskPlan(indices=[0], n_tokens=2))


class TestContrastiveLoss:

    def test_hand_case(self, float64):
        z = Tensor(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        assert supcon_loss(z, np.array([0, 0, 1]), tau=1.0).item() == pytest.approx(math.log1p(math.exp(-1.0)))

    def test_two_same_class_samples(self, float64, rng):
        z = Tensor(rng.standard_normal((2, 4)))
        assert supcon_loss(z, np.array([1, 1]), tau=0.07).item() == 0.0

    def test_no_positives_is_zero(self, float64, rng, caplog):
        z = Tensor(rng.standard_normal((3, 4)))
        assert supcon_loss(z, np.array([0, 1, 2])).item() == 0.0
        assert "No anchor" in caplog.text

    def test_scale_invariance(self, float64, rng):
        z = rng.standard_normal((6, 5))
        labels = np.array([0, 1, 0, 1, 2, 2])
        base = supcon_loss(Tensor(z), labels, 0.5).item()
        scaled = supcon_loss(Tensor(z * rng.uniform(0.1, 10.0, size=(6, 1))), labels, 0.5).item()
        assert scaled == pytest.approx(base, abs=1e-9)

    def test_pulling_positives_together_lowers_the_loss(self, float64):
        labels = np.array([0, 0, 1, 1])
        losses = []
        for theta in np.linspace(np.pi / 2, 0.0, 6):
            z = np.array([[1.0, 0.0], [np.cos(theta), np.sin(theta)], [-1.0, 0.0], [-1.0, 0.0]])
            losses.append(supcon_loss(Tensor(z), labels, tau=0.5).item())
        assert (np.diff(losses) < 0).all()

    def test_positive_pairs(self):
        anchors, positives, counts = positive_pairs(np.array([0, 1, 0, 0]))
        assert list(zip(anchors, positives)) == [(0, 2), (0, 3), (2, 0), (2, 3), (3, 0), (3, 2)]
        np.testing.assert_array_equal(counts, [2, 0, 2, 2])

    def test_invalid_temperature(self, float64):
        with pytest.raises(ContractError):
            supcon_loss(Tensor(np.eye(2)), np.array([0, 0]), tau=0.0)

    def test_cosine_sim_zero_vector(self, float64):
        assert cosine_sim(np.zeros(3), np.array([1.0, 2.0, 3.0])).item() == 0.0
        assert cosine_sim(np.array([1.0, 0.0]), np.array([2.0, 0.0])).item() == pytest.approx(1.0)

    def test_cosine_sim_zero_vector_has_finite_grad(self, float64):
        z1 = Tensor(np.zeros(4), requires_grad=True, dtype=np.float64)
        z2 = Tensor(np.ones(4), requires_grad=True, dtype=np.float64)
        cosine_sim(z1, z2).backward()
        assert np.isfinite(z1.grad).all()
        np.testing.assert_array_equal(z2.grad, np.zeros(4))

    def test_zero_embedding_row_has_finite_grad(self, float64):
        z = Tensor(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), requires_grad=True, dtype=np.float64)
        loss = supcon_loss(z, np.array([0, 0, 1]), tau=0.5)
        assert np.isfinite(loss.item())
        loss.backward()
        assert np.isfinite(z.grad).all()


class TestTotalLoss:

    @pytest.fixture
    def batch(self, rng):
        return (Tensor(rng.standard_normal((6, 4)), dtype=np.float64),
                Tensor(rng.standard_normal((6, 3)), dtype=np.float64),
                np.array([0, 1, 2, 0, 1, 2]))

    def test_endpoints_are_exact(self, batch):
        emb, logits, labels = batch
        ce = ce_loss(logits, labels).item()
        sup = supcon_loss(emb, labels, 0.07).item()
        assert total_loss(emb, logits, labels, alpha=0.0).total.item() == ce
        assert total_loss(emb, logits, labels, alpha=1.0).total.item() == sup

    def test_mixture(self, batch):
        emb, logits, labels = batch
        terms = total_loss(emb, logits, labels, alpha=0.3, tau=0.2)
        assert terms.total.item() == pytest.approx(0.3 * terms.supcon + 0.7 * terms.ce)
        assert not terms.degenerate

    def test_alpha_zero_keeps_embeddings_off_tape(self, rng):
        emb = Tensor(rng.standard_normal((4, 3)), requires_grad=True, dtype=np.float64)
        logits = Tensor(rng.standard_normal((4, 2)), requires_grad=True, dtype=np.float64)
        total_loss(emb, logits, np.array([0, 0, 1, 1]), alpha=0.0).total.backward()
        assert emb.grad is None or not emb.grad.any()
        assert logits.grad.any()

    def test_cross_entropy_closed_form(self):
        logits = Tensor(np.array([[2.0, 0.0]]), dtype=np.float64)
        assert ce_loss(logits, np.array([0])).item() == pytest.approx(math.log1p(math.exp(-2.0)), abs=1e-7)

    def test_alpha_range(self, batch):
        with pytest.raises(ContractError):
            total_loss(*batch, alpha=1.5)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _batch(config, rng, labels):
    return rng.standard_normal((len(labels), config.n_leads, config.input_len)).astype(np.float32)


class TestFinetuneStep:

    def test_linear_eval_freezes_encoder(self, mini_config, rng):
        model = ECGNAT(mini_config, rng=0)
        before = model.state_dict()
        state = FinetuneState.create(model, FinetuneConfig(mode="linear_eval", lr=1e-2), steps_per_epoch=2)
        labels = np.array([0, 0, 1, 1])
        for _ in range(2):
            finetune_step(state, _batch(mini_config, rng, labels), labels)
        after = model.state_dict()
        for name, _ in model.encoder_parameters():
            np.testing.assert_array_equal(after[name], before[name])
        assert not np.array_equal(after["classifier.weight"], before["classifier.weight"])
        assert np.array_equal(after["decoder.0.weight"], before["decoder.0.weight"])

    def test_full_finetune_updates_encoder(self, mini_config, rng):
        model = ECGNAT(mini_config, rng=0)
        before = model.state_dict()
        state = FinetuneState.create(model, FinetuneConfig(mode="full_finetune", lr=1e-2), steps_per_epoch=1)
        labels = np.array([0, 1, 0, 1])
        metrics, preds = finetune_step(state, _batch(mini_config, rng, labels), labels)
        assert set(metrics) == {"total_loss", "supcon", "ce"}
        assert preds.shape == (4,)
        assert not np.array_equal(model.state_dict()["tok1.weight"], before["tok1.weight"])
        assert state.step == 1

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            FinetuneConfig(mode="frozen")
        with pytest.raises(ConfigurationError):
            FinetuneConfig(alpha=2.0)


def test_masked_reconstruction_backpropagates(mini_config, rng):
    model = ECGNAT(mini_config, rng=0)
    loss = masked_reconstruction(model, _batch(mini_config, rng, [0, 1]), rng, 0.5, 0.2)
    loss.backward()
    assert np.isfinite(loss.item()) and loss.item() > 0
    assert model.tok1.weight.grad.any()
    assert model.decoder[0].weight.grad.any()
    assert model.classifier.weight.grad is None


class TestPretrainRun:

    def test_log_and_checkpoints(self, tiny_corpus):
        _, config = tiny_corpus
        result = run_pretrain(config)
        assert len(result.losses) == 2
        assert np.isfinite(result.initial_loss)
        header, rows = read_run_log(result.log_path)
        assert header["embed_dim"] == 8
        assert list(rows["epoch"]) == [0, 1, 2]
        assert rows["recon_loss"].iloc[0] == pytest.approx(result.initial_loss)
        ckpt = load_checkpoint(result.checkpoint)
        assert result.checkpoint.name == "pretrain_epoch0002.ckpt"
        assert ckpt.meta["kind"] == "pretrain" and ckpt.meta["epoch"] == 2
        assert ckpt.meta["step"] == result.state.step == 6

    def test_same_seed_same_run(self, tiny_corpus, tmp_path):
        _, config = tiny_corpus
        a = run_pretrain(config, out_dir=tmp_path / "a")
        b = run_pretrain(config, out_dir=tmp_path / "b")
        assert a.losses == b.losses
        for (name, pa), (_, pb) in zip(a.state.model.named_parameters(), b.state.model.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_resume_matches_uninterrupted(self, tiny_corpus):
        _, config = tiny_corpus
        full = run_pretrain(config)
        reference = full.state.model.state_dict()
        first = full.log_path.parent / "pretrain_epoch0001.ckpt"
        resumed = run_pretrain(config, resume=first)
        assert resumed.state.epoch == 2
        assert resumed.losses[-1] == pytest.approx(full.losses[-1], rel=1e-6)
        for name, arr in resumed.state.model.state_dict().items():
            np.testing.assert_allclose(arr, reference[name], rtol=1e-6, atol=1e-7)
        _, rows = read_run_log(full.log_path)
        assert list(rows["epoch"]) == [0, 1, 2]

    def test_zero_mask_ablation_runs(self, tiny_corpus):
        _, config = tiny_corpus
        result = run_pretrain(config.replace(ablation="zero-mask", pretrain_epochs=1))
        assert len(result.losses) == 1 and np.isfinite(result.losses[0])


class TestFinetuneRun:

    def test_repeats_and_outputs(self, tiny_corpus):
        _, config = tiny_corpus
        out = run_finetune(config)
        assert len(out.repeats) == 2
        assert out.summary["repeats"] == 2
        assert 0.0 <= out.summary["accuracy_mean"] <= 1.0
        out_dir = config.out_dir
        for r in range(2):
            _, rows = read_run_log(f"{out_dir}/finetune_log_r{r}.csv")
            assert list(rows["epoch"]) == [1, 2]
            assert list(rows.columns) == FINETUNE_COLUMNS
            assert np.isfinite(rows["test_loss"]).all() and (rows["test_loss"] > 0).all()
            assert out.repeats[r].checkpoint.exists()

    def test_held_out_loss_matches_cross_entropy_and_mixture(self, float64):
        probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3], [0.5, 0.25, 0.25], [0.2, 0.2, 0.6]])
        embeddings = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.2], [0.3, 1.0]])
        labels = np.array([0, 1, 0, 1])
        out = Predictions(probs=probs, embeddings=embeddings)
        ce = -np.log(probs[np.arange(4), labels]).mean()
        assert held_out_loss(out, labels, alpha=0.0, tau=0.5) == pytest.approx(ce)
        sup = supcon_loss(Tensor(embeddings), labels, tau=0.5).item()
        assert held_out_loss(out, labels, alpha=0.25, tau=0.5) == pytest.approx(0.25 * sup + 0.75 * ce)

    def test_linear_eval_keeps_pretrained_encoder(self, tiny_corpus, tmp_path):
        _, config = tiny_corpus
        pretrained = run_pretrain(config.replace(pretrain_epochs=1), out_dir=tmp_path / "pre")
        tuned = run_finetune(config.replace(mode="linear_eval", repeats=1), init_checkpoint=pretrained.checkpoint,
                             dump_embeddings=tmp_path / "emb.csv")
        before = load_checkpoint(pretrained.checkpoint).tensors
        after = load_checkpoint(tuned.repeats[0].checkpoint).tensors
        for name in before:
            if name.startswith(("model.tok", "model.stages.", "model.downsamplers.")):
                np.testing.assert_array_equal(after[name], before[name])
        header = (tmp_path / "emb.csv").read_text().splitlines()[0]
        assert header == "label," + ",".join(f"e{i}" for i in range(16))

    def test_label_fraction(self, tiny_corpus):
        _, config = tiny_corpus
        out = run_finetune(config.replace(label_fraction=0.25, repeats=1, finetune_epochs=1))
        assert len(out.repeats) == 1

    def test_alpha_sweep(self, tiny_corpus, tmp_path):
        _, config = tiny_corpus
        frame = alpha_sweep(config.replace(repeats=1, finetune_epochs=1), [0.0, 1.0], out_dir=tmp_path / "sweep")
        assert list(frame["alpha"]) == [0.0, 1.0]
        assert (tmp_path / "sweep" / "alpha_sweep.csv").exists()
