"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from typing import Dict, Iterable, Tuple
import math

import numpy as np

from utils.error_handling import CheckpointError, ConfigurationError
from .nn import Parameter


class AdamW:
    """Adam whose weight decay is applied to the weights directly, not to the gradient.

    Parameters are addressed by name so optimizer moments can be checkpointed
    next to the model weights. Parameters whose `.grad` is None are skipped.
    """

    def __init__(self, named_params: Iterable[Tuple[str, Parameter]], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigurationError(f"Learning rate must be positive, got {lr}")
        if weight_decay < 0:
            raise ConfigurationError(f"Weight decay must be non-negative, got {weight_decay}")
        self.params: Dict[str, Parameter] = dict(named_params)
        self.lr = float(lr)
        self.betas = betas
        self.eps = eps
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None or not p.requires_grad:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)).astype(p.dtype)

    def state_dict(self) -> Dict:
        return {
            "step": self.step_count,
            "lr": self.lr,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: Dict) -> None:
        unknown = set(state.get("m", {})) - set(self.params)
        if unknown:
            raise CheckpointError("Optimizer state names unknown parameters",
                                  f"e.g. {sorted(unknown)[:3]}")
        self.step_count = int(state.get("step", 0))
        self.lr = float(state.get("lr", self.lr))
        self.m = {k: np.array(v, dtype=self.params[k].dtype) for k, v in state.get("m", {}).items()}
        self.v = {k: np.array(v, dtype=self.params[k].dtype) for k, v in state.get("v", {}).items()}


class CosineAnnealingLR:
    """lr(t) = lr_min + (lr_max - lr_min) * (1 + cos(pi * t / T)) / 2, held at lr_min after T."""

    def __init__(self, optimizer: AdamW, total_steps: int, lr_min: float = 1e-5):
        if total_steps < 1:
            raise ConfigurationError(f"Schedule needs at least one step, got {total_steps}")
        self.optimizer = optimizer
        self.total_steps = int(total_steps)
        self.lr_max = optimizer.lr
        self.lr_min = float(lr_min)
        self.last_step = 0

    def lr_at(self, t: int) -> float:
        t = min(t, self.total_steps)
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math.cos(math.pi * t / self.total_steps))

    def step(self) -> float:
        self.last_step += 1
        self.optimizer.lr = self.lr_at(self.last_step)
        return self.optimizer.lr

    def state_dict(self) -> Dict:
        return {"last_step": self.last_step, "total_steps": self.total_steps,
                "lr_max": self.lr_max, "lr_min": self.lr_min}

    def load_state_dict(self, state: Dict) -> None:
        self.last_step = int(state["last_step"])
        self.total_steps = int(state["total_steps"])
        self.lr_max = float(state["lr_max"])
        self.lr_min = float(state["lr_min"])
        self.optimizer.lr = self.lr_at(self.last_step)
