"""Parameter containers and the layers the encoder and decoder are built from."""

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple
import logging

import numpy as np
from scipy.stats import truncnorm

from utils.error_handling import CheckpointError
from . import functional as F
from .tensor import Tensor, get_default_dtype

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """A leaf tensor that requires grad and is registered by its owning Module."""

    def __init__(self, data, dtype=None, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def trunc_normal(shape: Tuple[int, ...], rng: np.random.Generator, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations."""
    values = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)
    return np.asarray(values, dtype=get_default_dtype())


def fan_in_uniform(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Module:
    """Base class; attributes that are Parameters or Modules are registered in order."""

    def __init__(self):
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._parameters.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
        """Copy arrays into parameters by name; returns the names that were missing."""
        own = dict(self.named_parameters())
        missing = [name for name in own if name not in state]
        unexpected = [name for name in state if name not in own]
        if strict and (missing or unexpected):
            raise CheckpointError("State does not match model parameters",
                                  f"missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise CheckpointError(f"Shape mismatch for {name}",
                                      f"checkpoint {value.shape} vs model {p.shape}")
            p.data = value.astype(p.dtype, copy=True)
        if missing:
            logger.warning(f"{len(missing)} parameters kept their initial values")
        return missing


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """y = x @ W + b with W of shape (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(trunc_normal((in_features, out_features), rng))
        if bias:
            self.bias = Parameter(np.zeros(out_features, dtype=get_default_dtype()))
        else:
            object.__setattr__(self, "bias", None)

    def forward(self, x: Tensor) -> Tensor:
        y = F.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype=get_default_dtype()))
        self.bias = Parameter(np.zeros(dim, dtype=get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: F.Padding = 0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(fan_in_uniform((out_channels, in_channels, kernel_size),
                                               in_channels * kernel_size, rng))
        self.bias = Parameter(np.zeros(out_channels, dtype=get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: F.Padding = 0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(fan_in_uniform((in_channels, out_channels, kernel_size),
                                               in_channels * kernel_size, rng))
        self.bias = Parameter(np.zeros(out_channels, dtype=get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose1d(x, self.weight, self.bias, stride=self.stride,
                                  padding=self.padding)
