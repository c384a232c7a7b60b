"""Packing training state into checkpoints and back."""

from typing import Any, Dict, Optional, Tuple
import logging

import numpy as np

from autograd import AdamW, CosineAnnealingLR, Module
from models import ModelConfig
from models.model_manager import Checkpoint, restore_rng, rng_state
from utils.error_handling import CheckpointError

logger = logging.getLogger(__name__)

MODEL_PREFIX = "model."
M_PREFIX = "optim.m."
V_PREFIX = "optim.v."

# keys that fix the encoder's parameter shapes
ENCODER_KEYS = ("n_leads", "input_len", "embed_dim", "stage_heads", "stage_depths",
                "blocks_per_stage", "mlp_ratio", "window_k")


def pack_state(kind: str, model: Module, config: Dict[str, Any],
               optimizer: Optional[AdamW] = None, scheduler: Optional[CosineAnnealingLR] = None,
               rng: Optional[np.random.Generator] = None, epoch: int = 0, step: int = 0,
               extra: Optional[Dict[str, Any]] = None) -> Checkpoint:
    """Model weights, AdamW moments, schedule position, counters and RNG state."""
    tensors = {MODEL_PREFIX + name: arr for name, arr in model.state_dict().items()}
    meta: Dict[str, Any] = {"kind": kind, "epoch": int(epoch), "step": int(step)}
    if optimizer is not None:
        opt = optimizer.state_dict()
        tensors.update({M_PREFIX + k: v for k, v in opt["m"].items()})
        tensors.update({V_PREFIX + k: v for k, v in opt["v"].items()})
        meta["optimizer"] = {"step": opt["step"], "lr": opt["lr"]}
    if scheduler is not None:
        meta["scheduler"] = scheduler.state_dict()
    if extra:
        meta.update(extra)
    return Checkpoint(config=dict(config), tensors=tensors, meta=meta,
                      rng_state=rng_state(rng) if rng is not None else {})


def unpack_state(ckpt: Checkpoint, model: Module, optimizer: Optional[AdamW] = None,
                 scheduler: Optional[CosineAnnealingLR] = None) -> Tuple[np.random.Generator, int, int]:
    """Restore everything `pack_state` stored; returns (rng, epoch, step)."""
    model.load_state_dict(ckpt.subset(MODEL_PREFIX), strict=True)
    if optimizer is not None:
        opt_meta = ckpt.meta.get("optimizer", {})
        optimizer.load_state_dict({"step": opt_meta.get("step", 0), "lr": opt_meta.get("lr", optimizer.lr),
                                   "m": ckpt.subset(M_PREFIX), "v": ckpt.subset(V_PREFIX)})
    if scheduler is not None and "scheduler" in ckpt.meta:
        scheduler.load_state_dict(ckpt.meta["scheduler"])
    return restore_rng(ckpt.rng_state), int(ckpt.meta.get("epoch", 0)), int(ckpt.meta.get("step", 0))


def check_compatible(ckpt: Checkpoint, config: ModelConfig, keys=ENCODER_KEYS) -> None:
    """Raise CheckpointError naming both values of the first mismatching key."""
    saved = ModelConfig.from_dict(ckpt.config).to_dict() if ckpt.config else {}
    current = config.to_dict()
    for key in keys:
        if key in saved and saved[key] != current[key]:
            raise CheckpointError(f"Checkpoint {key} does not match the run configuration",
                                  f"checkpoint {key}={saved[key]}, configured {key}={current[key]}")


def load_encoder(ckpt: Checkpoint, model: Module, config: ModelConfig) -> int:
    """Copy tokenizer, stage and downsampler weights; the heads keep their initialisation."""
    check_compatible(ckpt, config)
    weights = {name: arr for name, arr in ckpt.subset(MODEL_PREFIX).items()
               if name.startswith(("tok1.", "tok2.", "stages.", "downsamplers."))}
    if not weights:
        raise CheckpointError("Checkpoint holds no encoder weights")
    model.load_state_dict(weights, strict=False)
    logger.info(f"Initialised {len(weights)} encoder tensors from checkpoint")
    return len(weights)


__all__ = ["pack_state", "unpack_state", "check_compatible", "load_encoder",
           "MODEL_PREFIX", "M_PREFIX", "V_PREFIX", "ENCODER_KEYS"]
