"""Width-switchable embedding network.

One parameter set serves every width in the crop-ratio list. A sub-model at
ratio ``r`` keeps the leading ``ceil(r * n)`` channels of every hidden
layer; the embedding layer always emits the full feature dimension (only
its input is cut), and each ratio owns a private batch-norm bank. The
classifier is never sliced: it is shared by all ratios and doubles as the
evidence head of the compatible loss.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

FULL = 1.0


def normalize_ratios(ratios: Sequence[float]) -> tuple[float, ...]:
    """Sorted, deduplicated crop ratios with the implicit 1.0 removed."""
    out = []
    for r in ratios:
        r = float(r)
        if not (0.0 < r <= 1.0) or math.isnan(r):
            raise ConfigError(f"crop ratio must lie in (0, 1], got {r!r}")
        if r != FULL and r not in out:
            out.append(r)
    return tuple(sorted(out))


def sliced_width(n: int, ratio: float) -> int:
    # the epsilon stops 0.1 * 30 = 3.0000000000000004 rounding up to 4
    return max(1, math.ceil(ratio * n - 1e-9))


@dataclass
class ModelConfig:
    input_dim: int
    widths: list[int]
    feature_dim: int
    classes: int
    crop_ratios: list[float] = field(default_factory=list)
    seed: int = 0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        self.crop_ratios = list(normalize_ratios(self.crop_ratios))
        if self.input_dim < 1 or self.feature_dim < 1:
            raise ConfigError("input_dim and feature_dim must be positive")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if not self.widths:
            raise ConfigError("at least one hidden width is required")
        for w in self.widths:
            if w < len(self.crop_ratios) or w < 1:
                raise ConfigError(
                    f"hidden width {w} is smaller than the number of crop ratios ({len(self.crop_ratios)})"
                )
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ConfigError(f"bn_momentum must lie in (0, 1], got {self.bn_momentum}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class SwitchableLinear:
    """Fully connected layer executable at any crop ratio.

    The input side is cut unless ``slice_input`` is False (the data-facing
    layer); the output side is cut unless ``is_final``.
    """

    def __init__(self, name: str, in_width: int, out_width: int, rng, *, is_final=False, slice_input=True):
        bound = math.sqrt(6.0 / in_width)
        self.name = name
        self.weight = Tensor(rng.uniform(-bound, bound, size=(out_width, in_width)), requires_grad=True,
                             name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_width), requires_grad=True, name=f"{name}.bias")
        self.is_final = is_final
        self.slice_input = slice_input

    def shapes_at(self, ratio: float) -> tuple[int, int]:
        out_w, in_w = self.weight.shape
        if ratio != FULL:
            if not self.is_final:
                out_w = sliced_width(out_w, ratio)
            if self.slice_input:
                in_w = sliced_width(in_w, ratio)
        return out_w, in_w

    def __call__(self, x: Tensor, ratio: float) -> Tensor:
        out_w, in_w = self.shapes_at(ratio)
        if x.shape[1] != in_w:
            raise ShapeError(f"{self.name}: input has {x.shape[1]} columns, expected {in_w} at ratio {ratio}")
        w = T.leading_slice(self.weight, (out_w, in_w))
        b = T.leading_slice(self.bias, (out_w,))
        return T.matmul(x, T.transpose(w)) + b

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class BNBank:
    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


class SwitchableBatchNorm:
    """Per-ratio batch-norm banks, each sized to that ratio's channel count."""

    def __init__(self, name: str, width: int, ratios: Sequence[float], momentum: float, eps: float):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.banks: dict[float, BNBank] = {}
        for r in (*ratios, FULL):
            n = width if r == FULL else sliced_width(width, r)
            tag = f"{name}@{r:g}"
            self.banks[r] = BNBank(
                scale=Tensor(np.ones(n), requires_grad=True, name=f"{tag}.scale"),
                shift=Tensor(np.zeros(n), requires_grad=True, name=f"{tag}.shift"),
                running_mean=np.zeros(n),
                running_var=np.ones(n),
            )

    def __call__(self, x: Tensor, ratio: float, train: bool, update_stats: bool = True) -> Tensor:
        bank = self.banks[ratio]
        if train:
            y, mu, var = T.batch_norm(x, bank.scale, bank.shift, eps=self.eps)
            if update_stats:
                n = x.shape[0]
                unbiased = var * (n / (n - 1)) if n > 1 else var
                m = self.momentum
                bank.running_mean[:] = (1.0 - m) * bank.running_mean + m * mu
                bank.running_var[:] = (1.0 - m) * bank.running_var + m * unbiased
            return y
        y, _, _ = T.batch_norm(x, bank.scale, bank.shift, bank.running_mean, bank.running_var, eps=self.eps)
        return y


class SwitchableModel:
    """Hidden stack of (linear, batch-norm, relu) blocks, an embedding layer and a shared classifier."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.ratios: tuple[float, ...] = tuple(config.crop_ratios)
        self.step = 0
        rng = np.random.default_rng(config.seed)
        self.hidden: list[SwitchableLinear] = []
        self.norms: list[SwitchableBatchNorm] = []
        prev = config.input_dim
        for i, w in enumerate(config.widths):
            self.hidden.append(SwitchableLinear(f"hidden{i}", prev, w, rng, slice_input=i > 0))
            self.norms.append(SwitchableBatchNorm(f"bn{i}", w, self.ratios, config.bn_momentum, config.bn_eps))
            prev = w
        self.embed = SwitchableLinear("embed", prev, config.feature_dim, rng, is_final=True)
        bound = math.sqrt(6.0 / config.feature_dim)
        self.classifier_weight = Tensor(
            rng.uniform(-bound, bound, size=(config.classes, config.feature_dim)), requires_grad=True,
            name="classifier.weight",
        )
        self.classifier_bias = Tensor(np.zeros(config.classes), requires_grad=True, name="classifier.bias")

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def all_ratios(self) -> tuple[float, ...]:
        return (*self.ratios, FULL)

    def resolve_ratio(self, ratio: float) -> float:
        for r in self.all_ratios:
            if math.isclose(r, float(ratio), rel_tol=0.0, abs_tol=1e-12):
                return r
        known = ", ".join(f"{r:g}" for r in self.all_ratios)
        raise ConfigError(f"unknown crop ratio {ratio!r}; known ratios: {known}")

    def forward(self, x, ratio: float = FULL, train: bool = False, update_stats: bool = True) -> Tensor:
        """Raw (unnormalised) embeddings of ``x`` from the sub-model at ``ratio``."""
        ratio = self.resolve_ratio(ratio)
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.data.ndim != 2 or h.shape[1] != self.config.input_dim:
            raise ShapeError(f"input shape {h.shape} does not match input_dim {self.config.input_dim}")
        for lin, bn in zip(self.hidden, self.norms):
            h = T.relu(bn(lin(h, ratio), ratio, train, update_stats))
        return self.embed(h, ratio)

    def logits(self, features: Tensor) -> Tensor:
        if features.data.ndim != 2 or features.shape[1] != self.feature_dim:
            raise ShapeError(f"features of shape {features.shape} do not match classifier width {self.feature_dim}")
        return T.matmul(features, T.transpose(self.classifier_weight)) + self.classifier_bias

    # ------------------------------------------------------------------
    # parameter bookkeeping

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Trainable tensors in manifest order."""
        for lin, bn in zip(self.hidden, self.norms):
            yield lin.weight.name, lin.weight
            yield lin.bias.name, lin.bias
            for bank in bn.banks.values():
                yield bank.scale.name, bank.scale
                yield bank.shift.name, bank.shift
        yield self.embed.weight.name, self.embed.weight
        yield self.embed.bias.name, self.embed.bias
        yield self.classifier_weight.name, self.classifier_weight
        yield self.classifier_bias.name, self.classifier_bias

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for bn in self.norms:
            for r, bank in bn.banks.items():
                tag = f"{bn.name}@{r:g}"
                yield f"{tag}.running_mean", bank.running_mean
                yield f"{tag}.running_var", bank.running_var

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every persistent array, parameters first, then running statistics."""
        return [(n, p.data) for n, p in self.named_parameters()] + list(self.named_buffers())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def parameter_count(self, ratio: float = FULL, include_bn: bool = False) -> int:
        """Parameters used by the embedding sub-model at ``ratio`` (classifier excluded)."""
        ratio = self.resolve_ratio(ratio)
        total = 0
        for lin, bn in zip(self.hidden, self.norms):
            out_w, in_w = lin.shapes_at(ratio)
            total += out_w * in_w + out_w
            if include_bn:
                total += 2 * bn.banks[ratio].scale.size
        out_w, in_w = self.embed.shapes_at(ratio)
        return total + out_w * in_w + out_w

    def layer_shapes(self, ratio: float = FULL) -> list[tuple[int, int]]:
        ratio = self.resolve_ratio(ratio)
        return [lin.shapes_at(ratio) for lin in self.hidden] + [self.embed.shapes_at(ratio)]


def build_model(config: ModelConfig | dict) -> SwitchableModel:
    if isinstance(config, dict):
        config = ModelConfig.from_dict(config)
    return SwitchableModel(config)
