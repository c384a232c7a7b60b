"""Masked-autoencoder pretraining.

Each step tokenizes a batch, corrupts a random subset of token columns,
encodes the corrupted tokens, decodes back to the signal and minimises the
squared error over the masked spans. Batches of several datasets are
interleaved round-robin, each dataset shuffled per epoch.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union
import logging

import numpy as np

from acquisition import ArrayDataset, BatchLoader, DatasetManifest, load_dataset, round_robin
from autograd import AdamW, CosineAnnealingLR, Tensor, no_grad
from models import ECGNAT, ModelConfig
from models.model_manager import CheckpointManager
from preprocessing_bio import ECGPipeline
from utils import ProgressTracker, RunConfig, RunLogger
from utils.error_handling import ConfigurationError, MLTrainingError
from .losses import recon_loss
from .masking import corrupt, sample_plans
from .state import pack_state, unpack_state

logger = logging.getLogger(__name__)

PRETRAIN_COLUMNS = ["epoch", "step", "recon_loss", "lr"]
PRETRAIN_LOG = "pretrain_log.csv"


@dataclass
class PretrainState:
    """Everything a pretraining run needs to continue exactly where it stopped."""
    model: ECGNAT
    optimizer: AdamW
    scheduler: CosineAnnealingLR
    rng: np.random.Generator
    config: RunConfig
    epoch: int = 0
    step: int = 0
    history: List[float] = field(default_factory=list)

    @classmethod
    def create(cls, config: RunConfig, steps_per_epoch: int) -> "PretrainState":
        model = ECGNAT(ModelConfig.from_run_config(config), rng=np.random.default_rng([config.seed, 0]))
        optimizer = AdamW(model.named_parameters(), lr=config.pretrain_lr, weight_decay=config.weight_decay)
        scheduler = CosineAnnealingLR(optimizer, total_steps=max(1, steps_per_epoch * config.pretrain_epochs),
                                      lr_min=min(config.lr_min, config.pretrain_lr))
        return cls(model=model, optimizer=optimizer, scheduler=scheduler,
                   rng=np.random.default_rng([config.seed, 1]), config=config)

    def to_checkpoint(self):
        return pack_state("pretrain", self.model, self.config.to_dict(), self.optimizer, self.scheduler,
                          self.rng, self.epoch, self.step)

    def restore(self, ckpt) -> None:
        self.rng, self.epoch, self.step = unpack_state(ckpt, self.model, self.optimizer, self.scheduler)


def masked_reconstruction(model: ECGNAT, x: np.ndarray, rng: np.random.Generator,
                          mask_ratio: float, noise_std: float, ablation: str = "none") -> Tensor:
    """tokenize -> mask -> encode -> decode -> masked MSE for one batch."""
    signal = Tensor(x, dtype=model.tok1.weight.dtype)
    tokens = model.tokenize(signal)
    plans = sample_plans(tokens.shape[0], tokens.shape[-1], mask_ratio, noise_std, rng)
    corrupted = corrupt(tokens, plans, rng, ablation)
    x_hat = model.decode(model.encode_tokens(corrupted))
    return recon_loss(signal, x_hat, plans)


def pretrain_step(state: PretrainState, x: np.ndarray) -> float:
    cfg = state.config
    state.optimizer.zero_grad()
    loss = masked_reconstruction(state.model, x, state.rng, cfg.mask_ratio, cfg.noise_std, cfg.ablation)
    value = loss.item()
    if not np.isfinite(value):
        raise MLTrainingError("Reconstruction loss is not finite",
                              f"loss={value} at step {state.step}",
                              model_state={"epoch": state.epoch, "step": state.step, "lr": state.optimizer.lr})
    loss.backward()
    state.optimizer.step()
    state.scheduler.step()
    state.step += 1
    return value


def pretrain_epoch(state: PretrainState, loaders: Sequence[BatchLoader],
                   progress: bool = False) -> Dict[str, float]:
    """One pass over every dataset; returns the mean reconstruction loss."""
    if not loaders:
        raise ConfigurationError("Pretraining needs at least one dataset")
    total = sum(len(loader) for loader in loaders)
    losses = []
    with ProgressTracker(total, desc=f"pretrain epoch {state.epoch + 1}", disable=not progress) as tracker:
        for _, (x, _) in round_robin([loader.epoch(state.epoch) for loader in loaders]):
            losses.append(pretrain_step(state, x))
            tracker.update(loss=f"{losses[-1]:.4f}")
    state.epoch += 1
    mean = float(np.mean(losses))
    state.history.append(mean)
    return {"recon_loss": mean, "steps": len(losses), "lr": state.optimizer.lr}


def initial_recon_loss(state: PretrainState, loaders: Sequence[BatchLoader]) -> float:
    """Masked MSE of the untrained model, with masks drawn from a separate generator."""
    rng = np.random.default_rng([state.config.seed, 2])
    cfg = state.config
    values, weights = [], []
    with no_grad():
        for loader in loaders:
            for x, _ in loader.epoch(0):
                loss = masked_reconstruction(state.model, x, rng, cfg.mask_ratio, cfg.noise_std, cfg.ablation)
                values.append(loss.item())
                weights.append(len(x))
    return float(np.average(values, weights=weights))


def load_pretrain_datasets(config: RunConfig, manifests: Optional[Sequence[Union[str, Path]]] = None) -> List[ArrayDataset]:
    """Every window of every manifest record, labels ignored."""
    paths = list(manifests or config.manifests)
    if not paths:
        raise ConfigurationError("Pretraining needs at least one manifest")
    pipeline = ECGPipeline.from_run_config(config)
    return [load_dataset(DatasetManifest.read(p), transform=pipeline, all_windows=True) for p in paths]


def make_loaders(datasets: Sequence[ArrayDataset], config: RunConfig) -> List[BatchLoader]:
    return [BatchLoader(ds, config.batch_size, shuffle=True, seed=config.seed, stream=i, prefetch=config.prefetch)
            for i, ds in enumerate(datasets)]


@dataclass
class PretrainResult:
    state: PretrainState
    initial_loss: float
    losses: List[float]
    checkpoint: Optional[Path]
    log_path: Path


def run_pretrain(config: RunConfig, datasets: Optional[Sequence[ArrayDataset]] = None,
                 resume: Optional[Union[str, Path]] = None, out_dir: Optional[Union[str, Path]] = None) -> PretrainResult:
    """Full pretraining run with per-epoch logging and periodic checkpoints.

    The log gets an epoch-0 row with the untrained model's loss. When `resume`
    points at a checkpoint, training continues from its epoch and the log
    rows after that epoch are replaced.
    """
    out_dir = Path(out_dir or config.out_dir)
    datasets = list(datasets) if datasets is not None else load_pretrain_datasets(config)
    loaders = make_loaders(datasets, config)
    state = PretrainState.create(config, sum(len(loader) for loader in loaders))
    manager = CheckpointManager(out_dir)
    log_path = out_dir / PRETRAIN_LOG

    if resume is not None:
        ckpt = manager.load(resume)
        state.restore(ckpt)
        run_log = RunLogger(log_path, PRETRAIN_COLUMNS, config, append=True)
        if log_path.exists():
            run_log.truncate_after("epoch", state.epoch)
        logger.info(f"Resumed pretraining at epoch {state.epoch}, step {state.step}")
        initial = float("nan")
    else:
        run_log = RunLogger(log_path, PRETRAIN_COLUMNS, config)
        initial = initial_recon_loss(state, loaders)
        run_log.log(epoch=0, step=0, recon_loss=initial, lr=state.optimizer.lr)
        logger.info(f"Initial masked reconstruction loss {initial:.5f}")

    checkpoint = None
    while state.epoch < config.pretrain_epochs:
        metrics = pretrain_epoch(state, loaders, progress=config.progress)
        run_log.log(epoch=state.epoch, step=state.step, recon_loss=metrics["recon_loss"], lr=metrics["lr"])
        logger.info(f"Pretrain epoch {state.epoch}/{config.pretrain_epochs}: "
                    f"recon_loss={metrics['recon_loss']:.5f} lr={metrics['lr']:.2e}")
        if state.epoch % config.checkpoint_every == 0 or state.epoch == config.pretrain_epochs:
            checkpoint = manager.save(state.to_checkpoint(), "pretrain", state.epoch)
    return PretrainResult(state=state, initial_loss=initial, losses=list(state.history),
                          checkpoint=checkpoint, log_path=log_path)


__all__ = ["PretrainState", "masked_reconstruction", "pretrain_step", "pretrain_epoch", "initial_recon_loss",
           "load_pretrain_datasets", "make_loaders", "run_pretrain", "PretrainResult",
           "PRETRAIN_COLUMNS", "PRETRAIN_LOG"]
