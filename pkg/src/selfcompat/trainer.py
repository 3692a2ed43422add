"""Joint training of the full model and its sub-models.

One step computes the original loss on the full model, a compatible loss
on each sub-model in the crop-ratio list, captures each objective's
gradient over the whole parameter vector, aggregates them and applies an
SGD-with-momentum update.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .aggregate import (
    AggregationConfig,
    aggregate,
    apply_step,
    capture_gradients,
    flatten_gradients,
    step_seed,
)
from .checkpoint import save_checkpoint
from .data import LabeledVectorSet
from .errors import ConfigError, NonFiniteError, NumericalAbort, ShapeError
from .losses import LOSS_KINDS, CompatibleLossConfig, compatible_loss, softmax_ce
from .model import FULL, SwitchableModel, normalize_ratios
from .tensor import Tensor

ORIGINAL_LOSSES = ("softmax_ce", "softmax_ce_plus_triplet")
OBJECTIVE_ORI = "ori"


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    crop_ratios: list[float] = field(default_factory=lambda: [0.25, 0.5, 0.75])
    lam: float = 0.2
    loss_kind: str = "evidential"
    aggregation: str = "project"
    original_loss: str = "softmax_ce"
    triplet_margin: float = 0.3
    instances_per_class: int = 4
    checkpoint_every: int = 0

    def __post_init__(self):
        self.crop_ratios = list(normalize_ratios(self.crop_ratios))
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.original_loss not in ORIGINAL_LOSSES:
            raise ConfigError(f"original_loss must be one of {ORIGINAL_LOSSES}, got {self.original_loss!r}")
        AggregationConfig(self.aggregation)
        CompatibleLossConfig(self.lam, self.loss_kind)
        k = self.instances_per_class
        if k < 1 or self.batch_size % k:
            raise ConfigError(f"batch_size {self.batch_size} must be a multiple of instances_per_class {k}")
        if self.uses_triplet and (k < 2 or self.batch_size < 2 * (self.batch_size // k)):
            raise ConfigError("triplet loss needs at least 2 instances per class in every batch")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    @property
    def uses_triplet(self) -> bool:
        return self.original_loss == "softmax_ce_plus_triplet"

    @property
    def classes_per_batch(self) -> int:
        return self.batch_size // self.instances_per_class

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses on the full model


def batch_hard_triplet(features: Tensor, labels, margin: float) -> Tensor:
    """Batch-hard triplet loss on L2-normalised features (Euclidean distance)."""
    y = np.asarray(labels)
    same = y[:, None] == y[None, :]
    np.fill_diagonal(same, False)
    diff = y[:, None] != y[None, :]
    if not diff.any():
        raise ShapeError("triplet loss needs at least 2 classes in the batch")
    if not same.any(axis=1).all():
        raise ShapeError("triplet loss needs a positive for every anchor (>= 2 instances per class)")
    n = T.l2_normalize_rows(features)
    sq = T.relu(2.0 - T.scale(T.matmul(n, T.transpose(n)), 2.0))
    dist = T.sqrt(sq + 1e-12)
    d = dist.data
    hardest_pos = np.where(same, d, -np.inf).argmax(axis=1)
    hardest_neg = np.where(diff, d, np.inf).argmin(axis=1)
    gap = T.gather_rows(dist, hardest_pos) - T.gather_rows(dist, hardest_neg) + margin
    return T.mean(T.relu(gap))


def original_loss(model: SwitchableModel, x, labels, cfg: TrainConfig, train: bool = True,
                  update_stats: bool = True) -> Tensor:
    feats = model.forward(x, FULL, train=train, update_stats=update_stats)
    loss = softmax_ce(model.logits(feats), labels)
    if cfg.uses_triplet:
        loss = loss + batch_hard_triplet(feats, labels, cfg.triplet_margin)
    return loss


def sub_model_loss(model: SwitchableModel, ratio: float, x, labels, cfg: TrainConfig, train: bool = True,
                   update_stats: bool = True) -> Tensor:
    feats = model.forward(x, ratio, train=train, update_stats=update_stats)
    return compatible_loss(feats, model, labels, CompatibleLossConfig(cfg.lam, cfg.loss_kind))


def objective_name(ratio: float) -> str:
    return OBJECTIVE_ORI if ratio == FULL else f"{ratio:g}"


# ---------------------------------------------------------------------------
# the training step


@dataclass
class StepReport:
    step: int
    losses: dict[str, float]
    conflict_rate: float
    conflicts: int


class TrainerState:
    """Momentum buffer and step counter carried across steps."""

    def __init__(self, model: SwitchableModel):
        n = sum(p.size for p in model.parameters())
        self.velocity = np.zeros(n)
        self.step = model.step


def _objective_gradient(model, name, step, loss_fn):
    model.zero_grad()
    try:
        loss = loss_fn()
        T.backward(loss)
    except NonFiniteError as exc:
        raise NumericalAbort(name, step, str(exc)) from exc
    return loss.item(), capture_gradients(model)


def train_step(model: SwitchableModel, x, labels, cfg: TrainConfig, state: TrainerState | None = None) -> StepReport:
    state = state or TrainerState(model)
    ratios = [model.resolve_ratio(r) for r in cfg.crop_ratios]
    step = state.step
    x = Tensor(x)
    losses: dict[str, float] = {}
    buffers: dict[str, dict[str, np.ndarray]] = {}

    losses[OBJECTIVE_ORI], buffers[OBJECTIVE_ORI] = _objective_gradient(
        model, OBJECTIVE_ORI, step, lambda: original_loss(model, x, labels, cfg))
    for r in ratios:
        name = objective_name(r)
        losses[name], buffers[name] = _objective_gradient(
            model, name, step, lambda r=r: sub_model_loss(model, r, x, labels, cfg))
    model.zero_grad()

    gset = flatten_gradients(model, buffers, rng_seed=step_seed(cfg.seed, step))
    direction = aggregate(gset, AggregationConfig(cfg.aggregation, cfg.seed))
    if not np.all(np.isfinite(direction)):
        raise NumericalAbort("aggregate", step, "non-finite update direction")
    state.velocity = cfg.momentum * state.velocity - direction
    apply_step(model, state.velocity, cfg.lr)
    state.step += 1
    model.step = state.step
    rate = gset.conflict_rate()
    k = len(gset.raw)
    return StepReport(step, losses, rate, round(rate * (k * (k - 1) // 2)))


# ---------------------------------------------------------------------------
# sampling and the epoch loop


class PKSampler:
    """Batches of P classes times K instances, drawn from a seeded generator."""

    def __init__(self, labels: np.ndarray, batch_size: int, instances_per_class: int, seed: int):
        self.labels = np.asarray(labels)
        self.k = instances_per_class
        self.p = batch_size // instances_per_class
        self.batch_size = batch_size
        self.by_class = [np.flatnonzero(self.labels == c) for c in np.unique(self.labels)]
        if len(self.by_class) < self.p:
            raise ConfigError(f"batch needs {self.p} classes but the training split has {len(self.by_class)}")
        short = [i for i, idx in enumerate(self.by_class) if idx.size < self.k]
        if short:
            raise ConfigError(f"classes {short[:5]} have fewer than {self.k} training samples")
        self.rng = np.random.default_rng(seed)

    def batches_per_epoch(self) -> int:
        return max(1, self.labels.size // self.batch_size)

    def epoch(self):
        for _ in range(self.batches_per_epoch()):
            classes = self.rng.choice(len(self.by_class), size=self.p, replace=False)
            idx = [self.rng.choice(self.by_class[c], size=self.k, replace=False) for c in classes]
            yield np.concatenate(idx)


@dataclass
class RunManifest:
    config: dict
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    checkpoint_path: str | None = None

    def summary(self) -> dict:
        return {
            "config": self.config,
            "epochs": self.epochs,
            "steps": len(self.steps),
            "checkpoint": self.checkpoint_path,
        }


def _step_record(report: StepReport, epoch: int) -> dict:
    return {
        "step": report.step,
        "epoch": epoch,
        "L_ori": report.losses[OBJECTIVE_ORI],
        "L_c": {k: v for k, v in report.losses.items() if k != OBJECTIVE_ORI},
        "conflict_rate": report.conflict_rate,
    }


def train(model: SwitchableModel, dataset: LabeledVectorSet, cfg: TrainConfig, out_dir=None,
          extra_config: dict | None = None) -> RunManifest:
    """Run ``cfg.epochs`` epochs on the train split.

    With ``out_dir`` the step log goes to ``manifest.jsonl`` (one JSON record
    per step, then a summary record) and the final weights to
    ``checkpoint.sfsc``.
    """
    vectors, labels = dataset.part("train")
    if vectors.shape[0] == 0:
        raise ConfigError("dataset has no training rows")
    missing = [r for r in cfg.crop_ratios if r not in model.ratios]
    if missing:
        raise ConfigError(f"crop ratios {missing} have no batch-norm bank in the model (model has {list(model.ratios)})")
    resolved = {"train": cfg.to_dict(), "model": model.config.to_dict()}
    resolved.update(extra_config or {})
    manifest = RunManifest(resolved)
    sampler = PKSampler(labels, cfg.batch_size, cfg.instances_per_class, cfg.seed)
    state = TrainerState(model)

    out = Path(out_dir) if out_dir is not None else None
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log = open(out / "manifest.jsonl", "w")
    try:
        for epoch in range(cfg.epochs):
            sums: dict[str, float] = {}
            count = 0
            for idx in sampler.epoch():
                report = train_step(model, vectors[idx], labels[idx], cfg, state)
                rec = _step_record(report, epoch)
                manifest.steps.append(rec)
                if log is not None:
                    log.write(json.dumps(rec, sort_keys=True) + "\n")
                for k, v in report.losses.items():
                    sums[k] = sums.get(k, 0.0) + v
                count += 1
            manifest.epochs.append({"epoch": epoch, **{k: v / count for k, v in sums.items()}})
            if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, out / f"checkpoint_epoch{epoch + 1}.sfsc")
        if out is not None:
            save_checkpoint(model, out / "checkpoint.sfsc")
            manifest.checkpoint_path = "checkpoint.sfsc"
            log.write(json.dumps({"summary": manifest.summary()}, sort_keys=True) + "\n")
    finally:
        if log is not None:
            log.close()
    return manifest
