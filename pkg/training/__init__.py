"""Masked-autoencoder pretraining and dual-loss fine-tuning."""

from .masking import MaskPlan, apply_mask, corrupt, sample_plans, zero_mask_variant
from .losses import (LossBreakdown, ce_loss, cosine_matrix, cosine_sim, positive_pairs, recon_loss,
                     supcon_loss, supcon_terms, total_loss)
from .state import check_compatible, load_encoder, pack_state, unpack_state
from .pretrain import (PRETRAIN_COLUMNS, PretrainResult, PretrainState, initial_recon_loss,
                       load_pretrain_datasets, make_loaders, masked_reconstruction, pretrain_epoch,
                       pretrain_step, run_pretrain)
from .finetune import (FINETUNE_COLUMNS, FinetuneConfig, FinetuneResult, FinetuneState, Predictions,
                       alpha_sweep, build_model, evaluate_checkpoint, finetune_epoch, finetune_step, held_out_loss,
                       load_labeled_dataset, predict, run_finetune, write_embeddings)

__all__ = [
    "MaskPlan", "apply_mask", "corrupt", "sample_plans", "zero_mask_variant",
    "LossBreakdown", "ce_loss", "cosine_matrix", "cosine_sim", "positive_pairs", "recon_loss",
    "supcon_loss", "supcon_terms", "total_loss",
    "check_compatible", "load_encoder", "pack_state", "unpack_state",
    "PRETRAIN_COLUMNS", "PretrainResult", "PretrainState", "initial_recon_loss", "load_pretrain_datasets",
    "make_loaders", "masked_reconstruction", "pretrain_epoch", "pretrain_step", "run_pretrain",
    "FINETUNE_COLUMNS", "FinetuneConfig", "FinetuneResult", "FinetuneState", "Predictions", "alpha_sweep",
    "build_model", "evaluate_checkpoint", "finetune_epoch", "finetune_step", "held_out_loss", "load_labeled_dataset",
    "predict",
    "run_finetune", "write_embeddings",
]
