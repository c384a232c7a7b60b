"""Run configuration, logging and file helpers shared by every command.

This module provides:
1. Logging setup - one console format for the whole toolkit, optional log file
2. Run configuration - `RunConfig`, key=value / YAML / JSON loading, validation
3. Run logs - append-only CSV files with a `#`-prefixed JSON config header
4. Helpers - structured file IO and tqdm progress tracking
"""

import os
import json
import yaml
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union
from datetime import datetime

import numpy as np
import pandas as pd
from tqdm import tqdm

from .error_handling import ConfigurationError, DataLoadingError, ValidationError

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
SEED_ENV_VAR = "ECGNAT_SEED"

logger = logging.getLogger(__name__)


def configure_logging(level: Union[int, str] = logging.INFO, log_file: Optional[str] = None) -> None:
    """Install the toolkit's log format on the root logger.

    Calling it again replaces the handlers installed by the previous call.
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_ecgnat", False):
            root.removeHandler(handler)
    formatter = logging.Formatter(LOG_FORMAT)
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    for handler in handlers:
        handler.setFormatter(formatter)
        handler._ecgnat = True
        root.addHandler(handler)
    root.setLevel(level if isinstance(level, int) else level.upper())


# I/O Operations
def detect_file_format(filepath: str) -> str:
    """Detect file format based on extension."""
    ext = Path(filepath).suffix.lower()
    format_map = {
        '.csv': 'csv',
        '.json': 'json',
        '.yaml': 'yaml',
        '.yml': 'yaml',
        '.npy': 'numpy',
        '.cfg': 'keyvalue',
        '.conf': 'keyvalue',
        '.txt': 'keyvalue',
    }
    return format_map.get(ext, 'keyvalue')


def load_data(filepath: str, **kwargs) -> Any:
    """Load a CSV, JSON, YAML or .npy file."""
    format_type = detect_file_format(filepath)
    try:
        if format_type == 'csv':
            return pd.read_csv(filepath, **kwargs)
        elif format_type == 'json':
            with open(filepath, 'r') as f:
                return json.load(f)
        elif format_type == 'yaml':
            with open(filepath, 'r') as f:
                return yaml.safe_load(f)
        elif format_type == 'numpy':
            return np.load(filepath)
        raise DataLoadingError(f"Unsupported file format: {format_type}", file_path=filepath)
    except OSError as e:
        raise DataLoadingError("Could not read file", str(e), file_path=filepath) from e


def save_data(data: Any, filepath: str, **kwargs) -> None:
    """Save a DataFrame, JSON- or YAML-able mapping, or array; parent dirs are created."""
    format_type = detect_file_format(filepath)
    try:
        Path(filepath).parent.mkdir(parents=True, exist_ok=True)
        if format_type == 'csv':
            frame = data if isinstance(data, pd.DataFrame) else pd.DataFrame(data)
            frame.to_csv(filepath, index=False, **kwargs)
        elif format_type == 'json':
            with open(filepath, 'w') as f:
                json.dump(data, f, indent=2, sort_keys=True)
        elif format_type == 'yaml':
            with open(filepath, 'w') as f:
                yaml.safe_dump(data, f)
        elif format_type == 'numpy':
            np.save(filepath, data)
        else:
            raise DataLoadingError(f"Unsupported file format: {format_type}", file_path=filepath)
    except OSError as e:
        raise DataLoadingError("Could not write file", str(e), file_path=filepath) from e


# Run configuration
def _int_tuple(value: Any) -> Tuple[int, ...]:
    if isinstance(value, str):
        value = [v for v in value.replace("(", "").replace(")", "").split(",") if v.strip()]
    return tuple(int(v) for v in value)


def _optional(parse: Callable[[Any], Any]) -> Callable[[Any], Any]:
    def parser(value):
        if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null")):
            return None
        return parse(value)
    return parser


def _bool(value: Any) -> bool:
    if isinstance(value, str):
        return value.strip().lower() in ("1", "true", "yes", "on")
    return bool(value)


def _str_list(value: Any) -> Tuple[str, ...]:
    if isinstance(value, str):
        return tuple(v.strip() for v in value.split(",") if v.strip())
    return tuple(str(v) for v in value)


@dataclass
class RunConfig:
    """Every key a command can read; defaults reproduce the published architecture."""
    # architecture
    n_leads: int = 12
    input_len: int = 2500
    embed_dim: int = 96
    stage_heads: Tuple[int, ...] = (2, 4, 8, 16)
    stage_depths: Tuple[int, ...] = (2, 2, 6, 2)
    blocks_per_stage: Optional[int] = None
    mlp_ratio: float = 4.0
    window_k: int = 7
    activation: str = "gelu"
    n_classes: int = 3
    # masking / pretraining
    noise_std: float = 0.2
    mask_ratio: float = 0.5
    ablation: str = "none"
    pretrain_epochs: int = 10
    pretrain_lr: float = 1e-3
    checkpoint_every: int = 1
    # fine-tuning
    mode: str = "full_finetune"
    tau: float = 0.07
    alpha: float = 0.5
    finetune_epochs: int = 25
    finetune_lr: Optional[float] = None
    label_fraction: float = 1.0
    repeats: int = 5
    train_frac: float = 0.8
    # shared optimisation
    batch_size: int = 32
    weight_decay: float = 4e-4
    lr_min: float = 1e-5
    # data
    fs: float = 500.0
    band_lo: float = 0.5
    band_hi: float = 40.0
    n_per_class: int = 400
    prefetch: int = 2
    # run
    seed: int = 0
    threads: Optional[int] = None
    precision: str = "float32"
    out_dir: str = "runs"
    manifests: Tuple[str, ...] = field(default_factory=tuple)
    init_checkpoint: Optional[str] = None
    progress: bool = True

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    def to_header(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def effective_depths(self) -> Tuple[int, ...]:
        if self.blocks_per_stage is not None:
            return (self.blocks_per_stage,) * len(self.stage_heads)
        return tuple(self.stage_depths)

    def effective_finetune_lr(self) -> float:
        if self.finetune_lr is not None:
            return self.finetune_lr
        return 1e-3 if self.mode == "linear_eval" else 1e-4

    def replace(self, **changes) -> "RunConfig":
        data = self.to_dict()
        data.update(changes)
        return RunConfig.from_dict(data)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "RunConfig":
        """Coerce raw (string or JSON) values; unknown keys raise ValidationError."""
        unknown = sorted(set(values) - set(_FIELD_PARSERS))
        if unknown:
            raise ValidationError("Unknown configuration keys", [f"unknown key '{k}'" for k in unknown])
        errors, parsed = [], {}
        for key, raw in values.items():
            try:
                parsed[key] = _FIELD_PARSERS[key](raw)
            except (TypeError, ValueError):
                errors.append(f"{key}: cannot parse {raw!r}")
        if errors:
            raise ValidationError("Invalid configuration values", errors)
        return cls(**parsed)

    @classmethod
    def from_header(cls, source: Union[str, Path]) -> "RunConfig":
        """Rebuild a config from a log file or its first (`#`-prefixed JSON) line."""
        text = str(source)
        if not text.lstrip().startswith(("#", "{")) and Path(text).exists():
            with open(text, "r") as f:
                text = f.readline()
        text = text.strip().lstrip("#").strip()
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise DataLoadingError("Log header is not a JSON config", str(e)) from e


_FIELD_PARSERS: Dict[str, Callable[[Any], Any]] = {
    "n_leads": int, "input_len": int, "embed_dim": int, "stage_heads": _int_tuple,
    "stage_depths": _int_tuple, "blocks_per_stage": _optional(int), "mlp_ratio": float,
    "window_k": int, "activation": str, "n_classes": int,
    "noise_std": float, "mask_ratio": float, "ablation": str, "pretrain_epochs": int,
    "pretrain_lr": float, "checkpoint_every": int,
    "mode": str, "tau": float, "alpha": float, "finetune_epochs": int,
    "finetune_lr": _optional(float), "label_fraction": float, "repeats": int, "train_frac": float,
    "batch_size": int, "weight_decay": float, "lr_min": float,
    "fs": float, "band_lo": float, "band_hi": float, "n_per_class": int, "prefetch": int,
    "seed": int, "threads": _optional(int), "precision": str, "out_dir": str,
    "manifests": _str_list, "init_checkpoint": _optional(str), "progress": _bool,
}


def parse_key_value(text: str, source: str = "<string>") -> Dict[str, str]:
    """Parse flat `key = value` lines; `#` starts a comment."""
    values: Dict[str, str] = {}
    errors = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    if errors:
        raise ValidationError("Malformed configuration file", errors)
    return values


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a key=value, YAML or JSON config into a flat mapping."""
    path = str(path)
    if not os.path.exists(path):
        raise DataLoadingError("Config file not found", file_path=path)
    fmt = detect_file_format(path)
    if fmt in ("yaml", "json"):
        data = load_data(path) or {}
        if not isinstance(data, dict):
            raise ValidationError("Config file must contain a mapping", [f"{path}: top level is {type(data).__name__}"])
        return data
    with open(path, "r") as f:
        return parse_key_value(f.read(), source=path)


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Mapping[str, Any]] = None,
                    env: Optional[Mapping[str, str]] = None,
                    base: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Resolve defaults, then `base`, then the config file, then overrides (flags win).

    `base` is a stored config (e.g. a checkpoint's). The seed falls back to
    ECGNAT_SEED when none of the sources set it.
    """
    env = os.environ if env is None else env
    values: Dict[str, Any] = dict(base or {})
    if path:
        values.update(read_config_file(path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if "seed" not in values and env.get(SEED_ENV_VAR):
        values["seed"] = env[SEED_ENV_VAR]
    config = RunConfig.from_dict(values)
    validate_run_config(config)
    return config


def validate_run_config(config: RunConfig) -> RunConfig:
    """Check every key and raise one ValidationError listing all problems."""
    errors: List[str] = []

    def check(condition: bool, message: str):
        if not condition:
            errors.append(message)

    check(1 <= config.n_leads <= 12, f"n_leads must be in 1..12, got {config.n_leads}")
    check(config.embed_dim > 0, f"embed_dim must be positive, got {config.embed_dim}")
    check(config.embed_dim % 2 == 0, f"embed_dim must be even, got {config.embed_dim}")
    check(len(config.stage_heads) >= 1, "stage_heads must list at least one stage")
    for h in config.stage_heads:
        check(h > 0 and config.embed_dim % h == 0,
              f"embed_dim {config.embed_dim} is not divisible by head count {h}")
    depths = config.effective_depths()
    check(len(depths) == len(config.stage_heads),
          f"stage_depths has {len(depths)} entries but stage_heads has {len(config.stage_heads)}")
    check(all(d >= 1 for d in depths), f"every stage needs at least one block, got {depths}")
    final_len = (config.input_len // 4) >> max(len(config.stage_heads) - 1, 0)
    check(config.input_len >= 4 and final_len >= 1,
          f"input_len {config.input_len} is too short for {len(config.stage_heads)} stages")
    check(config.window_k >= 1 and config.window_k % 2 == 1,
          f"window_k must be odd and >= 1, got {config.window_k}")
    check(config.mlp_ratio > 0, f"mlp_ratio must be positive, got {config.mlp_ratio}")
    check(config.activation in ("gelu", "relu"), f"activation must be gelu or relu, got {config.activation!r}")
    check(config.n_classes >= 2, f"n_classes must be >= 2, got {config.n_classes}")
    check(config.noise_std >= 0, f"noise_std must be >= 0, got {config.noise_std}")
    check(0 < config.mask_ratio <= 1, f"mask_ratio must be in (0, 1], got {config.mask_ratio}")
    check(config.ablation in ("none", "zero-mask"), f"ablation must be none or zero-mask, got {config.ablation!r}")
    check(config.mode in ("linear_eval", "full_finetune"),
          f"mode must be linear_eval or full_finetune, got {config.mode!r}")
    check(config.tau > 0, f"tau must be positive, got {config.tau}")
    check(0 <= config.alpha <= 1, f"alpha must be in [0, 1], got {config.alpha}")
    for name in ("pretrain_epochs", "finetune_epochs", "checkpoint_every", "repeats", "batch_size", "n_per_class"):
        check(getattr(config, name) >= 1, f"{name} must be >= 1, got {getattr(config, name)}")
    for name in ("pretrain_lr", "lr_min"):
        check(getattr(config, name) > 0, f"{name} must be positive, got {getattr(config, name)}")
    check(config.finetune_lr is None or config.finetune_lr > 0, f"finetune_lr must be positive, got {config.finetune_lr}")
    check(config.weight_decay >= 0, f"weight_decay must be >= 0, got {config.weight_decay}")
    check(0 < config.label_fraction <= 1, f"label_fraction must be in (0, 1], got {config.label_fraction}")
    check(0 < config.train_frac < 1, f"train_frac must be in (0, 1), got {config.train_frac}")
    check(config.fs > 0, f"fs must be positive, got {config.fs}")
    check(0 < config.band_lo < config.band_hi, f"band edges must satisfy 0 < lo < hi, got ({config.band_lo}, {config.band_hi})")
    check(0 <= config.prefetch <= 4, f"prefetch must be in 0..4 batches, got {config.prefetch}")
    check(config.seed >= 0, f"seed must be >= 0, got {config.seed}")
    check(config.threads is None or config.threads >= 1, f"threads must be >= 1, got {config.threads}")
    check(config.precision in ("float32", "float64"), f"precision must be float32 or float64, got {config.precision!r}")

    if errors:
        raise ValidationError(f"{len(errors)} configuration problem(s)", errors)
    return config


# Run logs
class RunLogger:
    """Append-only CSV log whose first line is `# <resolved config JSON>`."""

    def __init__(self, path: Union[str, Path], columns: Sequence[str],
                 config: Optional[RunConfig] = None, append: bool = False):
        self.path = Path(path)
        self.columns = list(columns)
        if append and self.path.exists():
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as f:
            header = config.to_header() if config is not None else "{}"
            f.write(f"# {header}\n")
            f.write(",".join(self.columns) + "\n")

    def log(self, **row) -> None:
        missing = [c for c in self.columns if c not in row]
        if missing:
            raise ConfigurationError("Log row is missing columns", ", ".join(missing))
        frame = pd.DataFrame([[row[c] for c in self.columns]], columns=self.columns)
        frame.to_csv(self.path, mode="a", header=False, index=False)

    def truncate_after(self, column: str, last: int) -> None:
        """Drop rows whose `column` exceeds `last` (used when resuming)."""
        header = self.path.read_text().splitlines()[0]
        frame = read_run_log(self.path)[1]
        frame = frame[frame[column] <= last]
        with open(self.path, "w") as f:
            f.write(header + "\n")
        frame.to_csv(self.path, mode="a", header=True, index=False)


def read_run_log(path: Union[str, Path]) -> Tuple[Dict[str, Any], pd.DataFrame]:
    """Return (config header, rows) of a run log."""
    path = Path(path)
    if not path.exists():
        raise DataLoadingError("Run log not found", file_path=str(path))
    with open(path, "r") as f:
        first = f.readline()
    header = json.loads(first.lstrip("#").strip() or "{}")
    return header, pd.read_csv(path, skiprows=1)


# Helper Functions
class ProgressTracker:
    """Track progress of long-running operations."""

    def __init__(self, total: int, desc: str = "Progress", disable: bool = False):
        self.pbar = tqdm(total=total, desc=desc, disable=disable, leave=False)
        self.desc = desc
        self.start_time = datetime.now()

    def update(self, n: int = 1, **postfix) -> None:
        """Update progress."""
        if postfix:
            self.pbar.set_postfix(postfix, refresh=False)
        self.pbar.update(n)

    def close(self) -> None:
        """Close progress tracker."""
        self.pbar.close()
        duration = datetime.now() - self.start_time
        logger.info(f"{self.desc} completed in {duration}")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


__all__ = [
    "LOG_FORMAT", "SEED_ENV_VAR", "configure_logging", "detect_file_format", "load_data", "save_data",
    "RunConfig", "parse_key_value", "read_config_file", "load_run_config", "validate_run_config",
    "RunLogger", "read_run_log", "ProgressTracker",
]
