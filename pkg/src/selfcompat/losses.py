"""Compatible losses for sub-model features.

Sub-model features go through the full model's classifier. For the
evidential loss the logits become non-negative evidence via a clamped
``exp``, which parameterises a Dirichlet opinion over the classes. The loss
is the expected cross-entropy under that Dirichlet plus a KL pull toward
the uniform Dirichlet. The softmax loss is the classification-style
baseline used for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import special
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

LOSS_KINDS = ("evidential", "bct_baseline")


@dataclass
class DirichletOpinion:
    evidence: Tensor
    alpha: Tensor
    strength: Tensor  # [batch, 1]
    belief: Tensor
    uncertainty: Tensor  # [batch, 1]

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[1]


@dataclass
class CompatibleLossConfig:
    lam: float = 0.2
    loss_kind: str = "evidential"

    def __post_init__(self):
        if not self.lam >= 0.0:
            raise ConfigError(f"KL weight must be >= 0, got {self.lam}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")


def label_indices(labels, num_classes: int) -> np.ndarray:
    """Class indices from either an index vector or a one-hot matrix."""
    y = np.asarray(labels)
    if y.ndim == 2:
        if y.shape[1] != num_classes:
            raise ShapeError(f"one-hot labels have {y.shape[1]} columns, expected {num_classes}")
        ok = np.all((y == 0) | (y == 1), axis=1) & (y.sum(axis=1) == 1)
        if not ok.all():
            row = int(np.flatnonzero(~ok)[0])
            raise ShapeError(f"label row {row} is not one-hot")
        return y.argmax(axis=1)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise ShapeError(f"labels must be an integer vector or a one-hot matrix, got shape {y.shape} dtype {y.dtype}")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ShapeError(f"label out of range [0, {num_classes})")
    return y.astype(np.int64)


def opinion_from_evidence(evidence: Tensor) -> DirichletOpinion:
    if evidence.data.ndim != 2:
        raise ShapeError(f"evidence must be [batch, classes], got {evidence.shape}")
    if np.any(evidence.data < 0.0):
        raise ShapeError("evidence must be non-negative")
    c = evidence.shape[1]
    alpha = evidence + 1.0
    strength = T.sum(alpha, axis=1, keepdims=True)
    belief = evidence / strength
    uncertainty = T.div(Tensor(np.full((evidence.shape[0], 1), float(c))), strength)
    return DirichletOpinion(evidence, alpha, strength, belief, uncertainty)


def opinion_from_logits(logits: Tensor) -> DirichletOpinion:
    return opinion_from_evidence(T.exp(logits))


def make_opinion(features: Tensor, head) -> DirichletOpinion:
    """Dirichlet opinion from features through ``head`` (the full model, or anything with ``.logits``)."""
    return opinion_from_logits(head.logits(features))


def evidential_ce(opinion: DirichletOpinion, labels) -> Tensor:
    """Batch mean of E_{p ~ Dir(alpha)}[-log p_y] = psi(S) - psi(alpha_y)."""
    y = label_indices(labels, opinion.num_classes)
    if y.shape[0] != opinion.alpha.shape[0]:
        raise ShapeError(f"{y.shape[0]} labels for a batch of {opinion.alpha.shape[0]}")
    per_row = T.sub(T.sum(T.digamma(opinion.strength), axis=1), T.gather_rows(T.digamma(opinion.alpha), y))
    return T.mean(per_row)


def kl_to_uniform(opinion: DirichletOpinion) -> Tensor:
    """Batch mean of KL(Dir(alpha) || Dir(1, ..., 1))."""
    alpha, strength = opinion.alpha, opinion.strength
    c = opinion.num_classes
    log_norm = T.sum(T.lgamma(strength), axis=1) - T.sum(T.lgamma(alpha), axis=1) - special.lgamma(float(c))
    spread = T.sum((alpha - 1.0) * (T.digamma(alpha) - T.digamma(strength)), axis=1)
    return T.mean(log_norm + spread)


def softmax_ce(logits: Tensor, labels) -> Tensor:
    y = label_indices(labels, logits.shape[1])
    if y.shape[0] != logits.shape[0]:
        raise ShapeError(f"{y.shape[0]} labels for a batch of {logits.shape[0]}")
    return -T.mean(T.gather_rows(T.log_softmax_rows(logits), y))


def bct_baseline_loss(features: Tensor, head, labels) -> Tensor:
    """Softmax cross-entropy of sub-model features through the shared classifier."""
    return softmax_ce(head.logits(features), labels)


def compatible_loss(features: Tensor, head, labels, cfg: CompatibleLossConfig | None = None) -> Tensor:
    cfg = cfg or CompatibleLossConfig()
    if cfg.loss_kind == "bct_baseline":
        return bct_baseline_loss(features, head, labels)
    opinion = make_opinion(features, head)
    ce = evidential_ce(opinion, labels)
    if cfg.lam == 0.0:
        return ce
    return ce + T.scale(kl_to_uniform(opinion), cfg.lam)
