"""Dual-loss fine-tuning: supervised contrastive + cross-entropy.

`linear_eval` runs the encoder under no_grad and optimises only the
classifier; `full_finetune` optimises the encoder and the classifier
together. The contrastive term acts on the length-pooled encoder output; no
projection head is used.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd

from acquisition import (ArrayDataset, BatchLoader, DatasetManifest, label_fraction_indices, load_dataset,
                         split_indices)
from autograd import AdamW, CosineAnnealingLR, Tensor, no_grad
from evaluation import EvalResult, aggregate_results, evaluate, write_aggregate_csv, write_eval_json
from models import ECGNAT, ModelConfig
from models.model_manager import CheckpointManager, load_checkpoint
from preprocessing_bio import ECGPipeline
from utils import ProgressTracker, RunConfig, RunLogger
from utils.error_handling import CheckpointError, ConfigurationError, MLTrainingError
from .losses import total_loss
from .state import ENCODER_KEYS, MODEL_PREFIX, check_compatible, load_encoder, pack_state

logger = logging.getLogger(__name__)

FINETUNE_COLUMNS = ["epoch", "total_loss", "supcon", "ce", "train_acc", "test_loss", "test_acc"]
MODES = ("linear_eval", "full_finetune")


@dataclass
class FinetuneConfig:
    mode: str = "full_finetune"
    alpha: float = 0.5
    tau: float = 0.07
    lr: float = 1e-4
    weight_decay: float = 4e-4
    lr_min: float = 1e-5
    epochs: int = 25
    batch_size: int = 32

    def __post_init__(self):
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.alpha <= 1:
            problems.append(f"alpha must be in [0, 1], got {self.alpha}")
        if self.tau <= 0:
            problems.append(f"tau must be positive, got {self.tau}")
        if self.epochs < 1 or self.batch_size < 1:
            problems.append("epochs and batch_size must be >= 1")
        if problems:
            raise ConfigurationError("Invalid fine-tuning configuration", "; ".join(problems))

    @property
    def frozen_encoder(self) -> bool:
        return self.mode == "linear_eval"

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_run_config(cls, config: RunConfig) -> "FinetuneConfig":
        return cls(mode=config.mode, alpha=config.alpha, tau=config.tau, lr=config.effective_finetune_lr(),
                   weight_decay=config.weight_decay, lr_min=min(config.lr_min, config.effective_finetune_lr()),
                   epochs=config.finetune_epochs, batch_size=config.batch_size)


@dataclass
class FinetuneState:
    model: ECGNAT
    optimizer: AdamW
    scheduler: CosineAnnealingLR
    config: FinetuneConfig
    epoch: int = 0
    step: int = 0

    @classmethod
    def create(cls, model: ECGNAT, config: FinetuneConfig, steps_per_epoch: int) -> "FinetuneState":
        params = model.head_parameters() if config.frozen_encoder else \
            model.encoder_parameters() + model.head_parameters()
        optimizer = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
        scheduler = CosineAnnealingLR(optimizer, total_steps=max(1, steps_per_epoch * config.epochs),
                                      lr_min=config.lr_min)
        return cls(model=model, optimizer=optimizer, scheduler=scheduler, config=config)


def encode_batch(model: ECGNAT, x: np.ndarray, frozen: bool) -> Tensor:
    signal = Tensor(x, dtype=model.tok1.weight.dtype)
    if frozen:
        with no_grad():
            return model.encode(signal)
    return model.encode(signal)


def finetune_step(state: FinetuneState, x: np.ndarray, y: np.ndarray) -> Tuple[Dict[str, float], np.ndarray]:
    """encode -> pool -> classify -> dual loss -> backward -> AdamW -> schedule."""
    cfg = state.config
    state.optimizer.zero_grad()
    z = encode_batch(state.model, x, cfg.frozen_encoder)
    logits = state.model.classify(z)
    terms = total_loss(state.model.embed(z), logits, y, cfg.alpha, cfg.tau)
    value = terms.total.item()
    if not np.isfinite(value):
        raise MLTrainingError("Fine-tuning loss is not finite", f"loss={value} at step {state.step}",
                              model_state={"epoch": state.epoch, "step": state.step, "lr": state.optimizer.lr})
    if terms.total.requires_grad:
        terms.total.backward()
    else:
        logger.debug(f"Step {state.step}: loss has no gradient (contrastive-only batch without positives)")
    state.optimizer.step()
    state.scheduler.step()
    state.step += 1
    preds = logits.data.argmax(axis=1)
    return {"total_loss": value, "supcon": terms.supcon, "ce": terms.ce}, preds


def finetune_epoch(state: FinetuneState, loader: BatchLoader, progress: bool = False) -> Dict[str, float]:
    """One pass over the labeled loader; returns mean losses and training accuracy."""
    if loader.dataset.labels is None:
        raise ConfigurationError("Fine-tuning needs labeled data")
    sums = {"total_loss": 0.0, "supcon": 0.0, "ce": 0.0}
    correct = seen = 0
    with ProgressTracker(len(loader), desc=f"finetune epoch {state.epoch + 1}", disable=not progress) as tracker:
        for x, y in loader.epoch(state.epoch):
            metrics, preds = finetune_step(state, x, y)
            for key in sums:
                sums[key] += metrics[key] * len(y)
            correct += int((preds == y).sum())
            seen += len(y)
            tracker.update(loss=f"{metrics['total_loss']:.4f}")
    state.epoch += 1
    out = {key: total / seen for key, total in sums.items()}
    out["train_acc"] = correct / seen
    return out


@dataclass
class Predictions:
    probs: np.ndarray
    embeddings: np.ndarray

    @property
    def preds(self) -> np.ndarray:
        return self.probs.argmax(axis=1)


def predict(model: ECGNAT, dataset: ArrayDataset, batch_size: int = 32) -> Predictions:
    """Softmax probabilities and pooled embeddings, in dataset order."""
    loader = BatchLoader(dataset, batch_size, shuffle=False, prefetch=0)
    probs, embeddings = [], []
    with no_grad():
        for x, _ in loader.epoch(0):
            z = model.encode(Tensor(x, dtype=model.tok1.weight.dtype))
            logits = model.classify(z).data.astype(np.float64)
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            probs.append(p / p.sum(axis=1, keepdims=True))
            embeddings.append(model.embed(z).data)
    return Predictions(probs=np.concatenate(probs), embeddings=np.concatenate(embeddings))


def held_out_loss(out: Predictions, labels: np.ndarray, alpha: float, tau: float) -> float:
    """The fine-tuning objective over a whole evaluated split.

    Log-probabilities stand in for the logits; cross-entropy is invariant to
    the per-row shift between them.
    """
    logits = np.log(np.maximum(out.probs, np.finfo(np.float64).tiny))
    with no_grad():
        terms = total_loss(Tensor(out.embeddings, dtype=np.float64), Tensor(logits, dtype=np.float64),
                           np.asarray(labels), alpha=alpha, tau=tau)
    return float(terms.total.item())


def write_embeddings(path: Union[str, Path], embeddings: np.ndarray, labels: Optional[np.ndarray]) -> Path:
    """CSV `label,e0,...,e{D-1}`, one row per sample."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(embeddings, columns=[f"e{i}" for i in range(embeddings.shape[1])])
    frame.insert(0, "label", labels if labels is not None else -1)
    frame.to_csv(path, index=False)
    return path


def load_labeled_dataset(config: RunConfig, manifest_path: Optional[Union[str, Path]] = None) -> Tuple[DatasetManifest, ArrayDataset]:
    path = manifest_path or (config.manifests[0] if config.manifests else None)
    if path is None:
        raise ConfigurationError("Fine-tuning needs a labeled manifest")
    manifest = DatasetManifest.read(path)
    if not manifest.has_labels:
        raise ConfigurationError("Manifest has unlabeled records", f"{path}: every row needs a label")
    dataset = load_dataset(manifest, transform=ECGPipeline.from_run_config(config))
    if dataset.labels.max() >= config.n_classes:
        raise ConfigurationError("Manifest labels exceed the configured class count",
                                 f"max label {int(dataset.labels.max())}, n_classes={config.n_classes}")
    return manifest, dataset


def repeat_splits(manifest: DatasetManifest, config: RunConfig) -> List[Tuple[np.ndarray, np.ndarray]]:
    """The manifest's own train/test assignment for single runs, else seeded random splits."""
    assigned = manifest.assigned_split()
    if config.repeats == 1 and assigned is not None:
        logger.info("Using the train/test split recorded in the manifest")
        return [assigned]
    return split_indices(len(manifest), config.train_frac, config.seed, config.repeats)


def build_model(config: RunConfig, repeat: int, init_checkpoint: Optional[Union[str, Path]] = None) -> ECGNAT:
    model_config = ModelConfig.from_run_config(config)
    model = ECGNAT(model_config, rng=np.random.default_rng([config.seed, 100 + repeat]))
    if init_checkpoint:
        load_encoder(load_checkpoint(init_checkpoint), model, model_config)
    return model


@dataclass
class RepeatResult:
    repeat: int
    result: EvalResult
    history: List[Dict[str, float]]
    checkpoint: Path


@dataclass
class FinetuneResult:
    repeats: List[RepeatResult] = field(default_factory=list)
    summary: Dict[str, float] = field(default_factory=dict)

    @property
    def results(self) -> List[EvalResult]:
        return [r.result for r in self.repeats]


def finetune_repeat(config: RunConfig, dataset: ArrayDataset, train_idx: np.ndarray, test_idx: np.ndarray,
                    repeat: int, out_dir: Path, init_checkpoint: Optional[Union[str, Path]] = None,
                    dump_embeddings: Optional[Union[str, Path]] = None) -> RepeatResult:
    if config.label_fraction < 1:
        keep = label_fraction_indices(dataset.labels[train_idx], config.label_fraction, seed=config.seed + repeat)
        train_idx = train_idx[keep]
        logger.info(f"Repeat {repeat}: label fraction {config.label_fraction} keeps {len(train_idx)} records")
    train, test = dataset.subset(train_idx), dataset.subset(test_idx)
    ft_config = FinetuneConfig.from_run_config(config)
    loader = BatchLoader(train, ft_config.batch_size, shuffle=True, seed=config.seed, stream=repeat,
                         prefetch=config.prefetch)
    state = FinetuneState.create(build_model(config, repeat, init_checkpoint), ft_config, len(loader))

    run_log = RunLogger(out_dir / f"finetune_log_r{repeat}.csv", FINETUNE_COLUMNS, config)
    history = []
    for _ in range(ft_config.epochs):
        metrics = finetune_epoch(state, loader, progress=config.progress)
        held_out = predict(state.model, test, ft_config.batch_size)
        metrics["test_loss"] = held_out_loss(held_out, test.labels, ft_config.alpha, ft_config.tau)
        metrics["test_acc"] = float((held_out.preds == test.labels).mean())
        run_log.log(epoch=state.epoch, **metrics)
        history.append(metrics)
        logger.info(f"Repeat {repeat} epoch {state.epoch}/{ft_config.epochs}: loss={metrics['total_loss']:.4f} "
                    f"train_acc={metrics['train_acc']:.3f} test_loss={metrics['test_loss']:.4f} "
                    f"test_acc={metrics['test_acc']:.3f}")

    out = predict(state.model, test, ft_config.batch_size)
    result = evaluate(out.probs, test.labels, config.n_classes)
    write_eval_json(result, out_dir / f"eval_r{repeat}.json")
    if dump_embeddings is not None:
        write_embeddings(dump_embeddings, out.embeddings, test.labels)
    checkpoint = CheckpointManager(out_dir / f"repeat{repeat}").save(
        pack_state("finetune", state.model, config.to_dict(), state.optimizer, state.scheduler,
                   epoch=state.epoch, step=state.step, extra={"repeat": repeat}),
        "finetune", state.epoch)
    return RepeatResult(repeat=repeat, result=result, history=history, checkpoint=checkpoint)


def run_finetune(config: RunConfig, dataset: Optional[ArrayDataset] = None,
                 manifest: Optional[DatasetManifest] = None, init_checkpoint: Optional[Union[str, Path]] = None,
                 dump_embeddings: Optional[Union[str, Path]] = None,
                 out_dir: Optional[Union[str, Path]] = None) -> FinetuneResult:
    """Fine-tune once per split repeat and aggregate the test metrics.

    Args:
        config: Resolved run configuration.
        dataset, manifest: Preloaded data; read from `config.manifests[0]` when omitted.
        init_checkpoint: Pretraining checkpoint whose encoder initialises every repeat.
        dump_embeddings: CSV path for the first repeat's test embeddings.
        out_dir: Output directory; defaults to `config.out_dir`.
    """
    out_dir = Path(out_dir or config.out_dir)
    init_checkpoint = init_checkpoint or config.init_checkpoint
    if dataset is None:
        manifest, dataset = load_labeled_dataset(config)
    if dataset.labels is None:
        raise ConfigurationError("Fine-tuning needs labeled data")
    splits = repeat_splits(manifest, config) if manifest is not None else \
        split_indices(len(dataset), config.train_frac, config.seed, config.repeats)

    outcome = FinetuneResult()
    for r, (train_idx, test_idx) in enumerate(splits):
        outcome.repeats.append(finetune_repeat(config, dataset, train_idx, test_idx, r, out_dir, init_checkpoint,
                                               dump_embeddings if r == 0 else None))
    outcome.summary = aggregate_results(outcome.results)
    write_aggregate_csv(outcome.results, out_dir / "finetune_summary.csv")
    logger.info("Fine-tuning summary: " + ", ".join(
        f"{k}={v:.4f}" for k, v in outcome.summary.items() if k != "repeats"))
    return outcome


def evaluate_checkpoint(checkpoint: Union[str, Path], manifest_path: Union[str, Path],
                        config: Optional[RunConfig] = None,
                        dump_embeddings: Optional[Union[str, Path]] = None) -> EvalResult:
    """Deterministic inference of a saved model on every record of a labeled manifest.

    Args:
        checkpoint: Fine-tuning checkpoint; the network is rebuilt from its stored config.
        manifest_path: Labeled manifest to evaluate on.
        config: Run configuration for preprocessing and batch size; the checkpoint's
            own config when omitted. Architecture keys and n_classes must agree with it.
        dump_embeddings: Optional CSV path for the pooled embeddings.
    """
    ckpt = load_checkpoint(checkpoint)
    if not ckpt.config:
        raise CheckpointError("Checkpoint has no stored configuration", file_path=str(checkpoint))
    model_config = ModelConfig.from_dict(ckpt.config)
    config = config or RunConfig.from_dict(ckpt.config)
    check_compatible(ckpt, ModelConfig.from_run_config(config), keys=ENCODER_KEYS + ("n_classes",))

    manifest = DatasetManifest.read(manifest_path)
    if not manifest.has_labels:
        raise ConfigurationError("Evaluation needs a labeled manifest", f"{manifest_path}: every row needs a label")
    dataset = load_dataset(manifest, transform=ECGPipeline.from_run_config(config))
    n_labels = int(dataset.labels.max()) + 1
    if n_labels > model_config.n_classes:
        raise CheckpointError("Manifest class count does not match the checkpoint",
                              f"manifest has {n_labels} classes, checkpoint n_classes={model_config.n_classes}",
                              file_path=str(checkpoint))

    model = ECGNAT(model_config, rng=0)
    model.load_state_dict(ckpt.subset(MODEL_PREFIX), strict=True)
    out = predict(model, dataset, config.batch_size)
    result = evaluate(out.probs, dataset.labels, model_config.n_classes)
    if dump_embeddings is not None:
        write_embeddings(dump_embeddings, out.embeddings, dataset.labels)
    logger.info(f"Evaluated {checkpoint} on {len(dataset)} samples: accuracy={result.accuracy:.4f} "
                f"macro_f1={result.macro_f1:.4f}")
    return result


def alpha_sweep(config: RunConfig, alphas: Sequence[float], dataset: Optional[ArrayDataset] = None,
                manifest: Optional[DatasetManifest] = None, init_checkpoint: Optional[Union[str, Path]] = None,
                out_dir: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """Run `run_finetune` for every alpha; one aggregate row per alpha."""
    out_dir = Path(out_dir or config.out_dir)
    if dataset is None:
        manifest, dataset = load_labeled_dataset(config)
    rows = []
    for alpha in alphas:
        sub = config.replace(alpha=float(alpha))
        result = run_finetune(sub, dataset=dataset, manifest=manifest, init_checkpoint=init_checkpoint,
                              out_dir=out_dir / f"alpha_{alpha:g}")
        rows.append({"alpha": float(alpha), **result.summary})
    frame = pd.DataFrame(rows)
    frame.to_csv(out_dir / "alpha_sweep.csv", index=False)
    return frame


__all__ = [
    "FinetuneConfig", "FinetuneState", "finetune_step", "finetune_epoch", "predict", "Predictions", "held_out_loss",
    "write_embeddings", "load_labeled_dataset", "repeat_splits", "build_model", "finetune_repeat",
    "run_finetune", "alpha_sweep", "evaluate_checkpoint", "FinetuneResult", "RepeatResult", "FINETUNE_COLUMNS", "MODES",
]
