"""
ECG-NAT network: convolutional tokenizer, hierarchical neighborhood-attention
encoder with strided-convolution downsamplers, transposed-convolution decoder
and a linear classification head.

Signals enter as (leads, samples) or (batch, leads, samples). Between stages
the feature maps are channel-major (batch, channels, length); NAT blocks work
token-major (batch, length, channels) internally.
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union
import logging

import numpy as np

from autograd import (Conv1d, ConvTranspose1d, LayerNorm, Linear, Module, ModuleList, Parameter,
                      Tensor, functional as F, get_default_dtype)
from natten1d import NeighborhoodSpec, neighborhood_attention
from utils.error_handling import ConfigurationError, DimensionError

logger = logging.getLogger(__name__)

TOKENIZER_STRIDE = 4


@dataclass
class ModelConfig:
    """Architecture and loss hyperparameters; stored with every checkpoint."""
    n_leads: int = 12
    input_len: int = 2500
    embed_dim: int = 96
    stage_heads: Tuple[int, ...] = (2, 4, 8, 16)
    stage_depths: Tuple[int, ...] = (2, 2, 6, 2)
    blocks_per_stage: Optional[int] = None
    mlp_ratio: float = 4.0
    window_k: int = 7
    n_classes: int = 3
    noise_std: float = 0.2
    mask_ratio: float = 0.5
    tau: float = 0.07
    alpha: float = 0.5
    activation: str = "gelu"

    def __post_init__(self):
        self.stage_heads = tuple(int(h) for h in self.stage_heads)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.validate()

    def validate(self) -> None:
        problems = []
        for h in self.stage_heads:
            if h < 1 or self.embed_dim % h:
                problems.append(f"embed_dim {self.embed_dim} not divisible by {h} heads")
        if self.embed_dim % 2:
            problems.append(f"embed_dim {self.embed_dim} must be even")
        if len(self.depths) != len(self.stage_heads):
            problems.append(f"{len(self.depths)} stage depths for {len(self.stage_heads)} stages")
        if self.window_k < 1 or self.window_k % 2 == 0:
            problems.append(f"window_k {self.window_k} must be odd")
        if self.activation not in ("gelu", "relu"):
            problems.append(f"unknown activation {self.activation!r}")
        if self.n_classes < 1:
            problems.append(f"n_classes {self.n_classes} must be positive")
        if problems:
            raise ConfigurationError("Invalid model configuration", "; ".join(problems))
        if self.stage_lengths()[-1] < 1:
            raise ConfigurationError("input_len too short for the stage ladder",
                                     f"input_len={self.input_len}, stages={self.n_stages}")

    @property
    def n_stages(self) -> int:
        return len(self.stage_heads)

    @property
    def depths(self) -> Tuple[int, ...]:
        if self.blocks_per_stage is not None:
            return (int(self.blocks_per_stage),) * len(self.stage_heads)
        return self.stage_depths

    @property
    def token_len(self) -> int:
        return _conv_len(_conv_len(self.input_len))

    def stage_widths(self) -> List[int]:
        return [self.embed_dim * 2 ** s for s in range(self.n_stages)]

    def stage_lengths(self) -> List[int]:
        lengths = [self.token_len]
        for _ in range(self.n_stages - 1):
            lengths.append(lengths[-1] // 2)
        return lengths

    def stage_shapes(self) -> List[Tuple[int, int]]:
        """(channels, length) after every encoder stage."""
        return list(zip(self.stage_widths(), self.stage_lengths()))

    def decoder_plan(self) -> List[Tuple[int, int, int, int]]:
        """(in_channels, out_channels, kernel, out_length) for every decoder layer."""
        widths = self.stage_widths()[::-1] + [self.embed_dim // 2, self.n_leads]
        lengths = self.stage_lengths()[::-1] + [_conv_len(self.input_len), self.input_len]
        plan = []
        for i in range(len(widths) - 1):
            kernel = lengths[i + 1] - 2 * (lengths[i] - 1)
            if kernel < 1:
                raise ConfigurationError("Decoder cannot mirror the encoder ladder",
                                         f"{lengths[i]} -> {lengths[i + 1]}")
            plan.append((widths[i], widths[i + 1], kernel, lengths[i + 1]))
        return plan

    @property
    def latent_shape(self) -> Tuple[int, int]:
        return self.stage_shapes()[-1]

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in values.items() if k in known})

    @classmethod
    def from_run_config(cls, run_config) -> "ModelConfig":
        return cls.from_dict(run_config.to_dict())


def _conv_len(n: int) -> int:
    """Length after a kernel-3, stride-2, padding-1 convolution."""
    return (n + 2 - 3) // 2 + 1


def _activate(x: Tensor, name: str) -> Tensor:
    return F.gelu(x) if name == "gelu" else F.relu(x)


class NATBlock(Module):
    """Pre-norm transformer block with neighborhood attention.

    x <- x + proj(NA(LN(x))); x <- x + fc2(act(fc1(LN(x)))), on (B, n, C) tokens.
    """

    def __init__(self, dim: int, heads: int, window: int, mlp_ratio: float,
                 rng: np.random.Generator, activation: str = "gelu"):
        super().__init__()
        if dim % heads:
            raise DimensionError("Block width not divisible by head count", {"dim": dim, "heads": heads})
        self.spec = NeighborhoodSpec(k=window, n_heads=heads, head_dim=dim // heads)
        self.dim = dim
        self.activation = activation
        hidden = int(dim * mlp_ratio)
        self.norm1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim, rng)
        self.rpb = Parameter(self.spec.init_bias(get_default_dtype()))
        self.proj = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def attention(self, x: Tensor) -> Tensor:
        batch, n, dim = x.shape
        heads, head_dim = self.spec.n_heads, self.spec.head_dim
        qkv = self.qkv(x).reshape(batch, n, 3, heads, head_dim)
        q, k, v = (qkv[:, :, i].transpose(0, 2, 1, 3) for i in range(3))
        out = neighborhood_attention(q, k, v, self.rpb, self.spec.k)
        return self.proj(out.transpose(0, 2, 1, 3).reshape(batch, n, dim))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise DimensionError("NAT block expects (batch, n, channels) tokens",
                                 {"shape": x.shape, "channels": self.dim})
        x = x + self.attention(self.norm1(x))
        hidden = _activate(self.fc1(self.norm2(x)), self.activation)
        return x + self.fc2(hidden)


class ECGNAT(Module):
    """Tokenizer, encoder, decoder and classifier of the ECG-NAT network."""

    def __init__(self, config: ModelConfig, rng: Union[np.random.Generator, int, None] = None):
        super().__init__()
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = config
        half = config.embed_dim // 2
        self.tok1 = Conv1d(config.n_leads, half, 3, rng, stride=2, padding=1)
        self.tok2 = Conv1d(half, config.embed_dim, 3, rng, stride=2, padding=1)

        self.stages = ModuleList()
        self.downsamplers = ModuleList()
        widths = config.stage_widths()
        for s, (width, heads, depth) in enumerate(zip(widths, config.stage_heads, config.depths)):
            self.stages.append(ModuleList(
                NATBlock(width, heads, config.window_k, config.mlp_ratio, rng, config.activation)
                for _ in range(depth)))
            if s < config.n_stages - 1:
                self.downsamplers.append(Conv1d(width, 2 * width, 3, rng, stride=2, padding=(1, 0)))

        self.decoder = ModuleList(
            ConvTranspose1d(c_in, c_out, kernel, rng, stride=2)
            for c_in, c_out, kernel, _ in config.decoder_plan())

        c_last, l_last = config.latent_shape
        self.classifier = Linear(c_last * l_last, config.n_classes, rng)

    # --- encoder ---------------------------------------------------------

    def tokenize(self, x: Tensor) -> Tensor:
        """(B, leads, D) -> (B, embed_dim, D/4)."""
        x, squeeze = self._batched(x, (self.config.n_leads, self.config.input_len), "signal")
        h = self.tok2(_activate(self.tok1(x), self.config.activation))
        return self._unbatch(h, squeeze)

    def nat_block(self, u: Tensor, stage: int = 0, index: int = 0) -> Tensor:
        """Apply one block to channel-major features (C, n) or (B, C, n)."""
        u, squeeze = self._batched(u, None, "features")
        block = self.stages[stage][index]
        out = block(u.transpose(0, 2, 1)).transpose(0, 2, 1)
        return self._unbatch(out, squeeze)

    def run_stage(self, u: Tensor, stage: int) -> Tensor:
        h = u.transpose(0, 2, 1)
        for block in self.stages[stage]:
            h = block(h)
        return h.transpose(0, 2, 1)

    def downsample(self, u: Tensor, stage: int = 0) -> Tensor:
        """(B, C, n) -> (B, 2C, floor(n/2)), strided convolution then ReLU."""
        u, squeeze = self._batched(u, None, "features")
        if u.shape[-1] < 2:
            raise DimensionError("Downsampling needs at least two positions", {"length": u.shape[-1]})
        return self._unbatch(F.relu(self.downsamplers[stage](u)), squeeze)

    def encode_tokens(self, tokens: Tensor) -> Tensor:
        """Stages and downsamplers applied to tokenized (and possibly masked) input."""
        tokens, squeeze = self._batched(tokens, (self.config.embed_dim, self.config.token_len), "tokens")
        h = tokens
        for s in range(self.config.n_stages):
            h = self.run_stage(h, s)
            if s < self.config.n_stages - 1:
                h = F.relu(self.downsamplers[s](h))
        return self._unbatch(h, squeeze)

    def encode(self, x: Tensor) -> Tensor:
        """Signal -> latent code Z of shape (C_last, L_last)."""
        return self.encode_tokens(self.tokenize(x))

    # --- heads -----------------------------------------------------------

    def decode(self, z: Tensor) -> Tensor:
        """Latent code -> reconstructed signal (leads, input_len)."""
        z, squeeze = self._batched(z, self.config.latent_shape, "latent")
        h = z
        last = len(self.decoder) - 1
        for i, layer in enumerate(self.decoder):
            h = layer(h)
            if i < last:
                h = F.relu(h)
        return self._unbatch(h, squeeze)

    def embed(self, z: Tensor) -> Tensor:
        """Mean over the length axis of Z."""
        return F.mean(z, axis=-1)

    def classify(self, z: Tensor) -> Tensor:
        z, squeeze = self._batched(z, self.config.latent_shape, "latent")
        logits = self.classifier(z.reshape(z.shape[0], -1))
        return logits.reshape(logits.shape[-1]) if squeeze else logits

    def forward(self, x: Tensor) -> Tensor:
        return self.classify(self.encode(x))

    def encoder_parameters(self) -> List[Tuple[str, Parameter]]:
        """Tokenizer, stage and downsampler parameters."""
        return [(name, p) for name, p in self.named_parameters()
                if name.startswith(("tok1.", "tok2.", "stages.", "downsamplers."))]

    def head_parameters(self) -> List[Tuple[str, Parameter]]:
        return [(name, p) for name, p in self.named_parameters() if name.startswith("classifier.")]

    # --- helpers ---------------------------------------------------------

    @staticmethod
    def _batched(x, expected: Optional[Tuple[int, int]], what: str):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3:
            raise DimensionError(f"Expected {what} of shape (C, L) or (B, C, L)", {"shape": x.shape})
        if expected is not None and tuple(x.shape[1:]) != tuple(expected):
            raise DimensionError(f"{what} shape does not match the model configuration",
                                 {"got": tuple(x.shape[1:]), "expected": tuple(expected)})
        return x, squeeze

    @staticmethod
    def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
        return x.reshape(x.shape[1:]) if squeeze else x


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Shape of every learnable tensor, named as in `ECGNAT.named_parameters`."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    half = config.embed_dim // 2
    shapes.update({"tok1.weight": (half, config.n_leads, 3), "tok1.bias": (half,),
                   "tok2.weight": (config.embed_dim, half, 3), "tok2.bias": (config.embed_dim,)})
    widths = config.stage_widths()
    for s, (c, heads, depth) in enumerate(zip(widths, config.stage_heads, config.depths)):
        hidden = int(c * config.mlp_ratio)
        for b in range(depth):
            p = f"stages.{s}.{b}."
            shapes.update({
                p + "norm1.weight": (c,), p + "norm1.bias": (c,),
                p + "qkv.weight": (c, 3 * c), p + "qkv.bias": (3 * c,),
                p + "rpb": (heads, 2 * config.window_k - 1),
                p + "proj.weight": (c, c), p + "proj.bias": (c,),
                p + "norm2.weight": (c,), p + "norm2.bias": (c,),
                p + "fc1.weight": (c, hidden), p + "fc1.bias": (hidden,),
                p + "fc2.weight": (hidden, c), p + "fc2.bias": (c,),
            })
        if s < config.n_stages - 1:
            shapes[f"downsamplers.{s}.weight"] = (2 * c, c, 3)
            shapes[f"downsamplers.{s}.bias"] = (2 * c,)
    for i, (c_in, c_out, kernel, _) in enumerate(config.decoder_plan()):
        shapes[f"decoder.{i}.weight"] = (c_in, c_out, kernel)
        shapes[f"decoder.{i}.bias"] = (c_out,)
    c_last, l_last = config.latent_shape
    shapes["classifier.weight"] = (c_last * l_last, config.n_classes)
    shapes["classifier.bias"] = (config.n_classes,)
    return shapes


def count_params(config: ModelConfig) -> int:
    """Exact number of learnable scalars, computed without allocating the model."""
    return int(sum(int(np.prod(shape)) for shape in parameter_shapes(config).values()))


__all__ = ["ModelConfig", "NATBlock", "ECGNAT", "parameter_shapes", "count_params", "TOKENIZER_STRIDE"]
