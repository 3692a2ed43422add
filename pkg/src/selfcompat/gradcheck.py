"""End-to-end finite-difference check of every training objective on a tiny model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import ModelConfig, SwitchableModel, build_model
from .trainer import TrainConfig, objective_name, original_loss, sub_model_loss

EPS = 1e-4
THRESHOLD = 1e-4
# gradients smaller than this are compared in absolute terms
DENOM_FLOOR = 1e-6


@dataclass
class ObjectiveCheck:
    name: str
    max_rel_error: float
    worst_index: int
    worst_parameter: str
    n_params: int

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "worst_index": self.worst_index,
            "worst_parameter": self.worst_parameter,
            "n_params": self.n_params,
        }


def tiny_problem(cfg: TrainConfig, input_dim: int = 5):
    model = build_model(ModelConfig(input_dim, [8, 8], 4, 3, cfg.crop_ratios, seed=cfg.seed))
    rng = np.random.default_rng(cfg.seed + 1)
    x = rng.normal(size=(4, input_dim))
    labels = np.array([0, 0, 1, 1] if cfg.uses_triplet else [0, 1, 2, 0])
    # non-trivial BN scales/shifts so their gradients are generic
    for _, p in model.named_parameters():
        if p.name.endswith(".scale"):
            p.data[:] = rng.uniform(0.5, 1.5, size=p.shape)
        elif p.name.endswith(".shift") or p.name.endswith(".bias"):
            p.data[:] = rng.uniform(-0.3, 0.3, size=p.shape)
    return model, x, labels


def check_objective(model: SwitchableModel, name: str, loss_fn) -> ObjectiveCheck:
    """Compare analytic gradients of ``loss_fn()`` with central differences over every parameter element."""
    model.zero_grad()
    loss = loss_fn()
    T.backward(loss)
    worst, worst_idx, worst_name = 0.0, -1, ""
    flat_index = 0
    for pname, p in model.named_parameters():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + EPS
            up = loss_fn().item()
            flat[i] = orig - EPS
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * EPS)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), DENOM_FLOOR)
            if err > worst:
                worst, worst_idx, worst_name = err, flat_index + i, f"{pname}[{i}]"
        flat_index += flat.size
    model.zero_grad()
    return ObjectiveCheck(name, worst, worst_idx, worst_name, flat_index)


def run_gradcheck(cfg: TrainConfig | None = None) -> dict:
    cfg = cfg or TrainConfig(epochs=0, batch_size=4, instances_per_class=2)
    model, x, labels = tiny_problem(cfg)
    xt = T.Tensor(x)
    checks = [check_objective(model, "L_ori", lambda: original_loss(model, xt, labels, cfg, update_stats=False))]
    for kind in ("evidential", "bct_baseline"):
        sub_cfg = TrainConfig(**{**cfg.to_dict(), "loss_kind": kind})
        for r in model.ratios:
            tag = "L_c" if kind == "evidential" else "L_bct"
            checks.append(check_objective(
                model, f"{tag}[{objective_name(r)}]",
                lambda r=r, c=sub_cfg: sub_model_loss(model, r, xt, labels, c, update_stats=False)))
    worst = max(checks, key=lambda c: c.max_rel_error)
    return {
        "epsilon": EPS,
        "threshold": THRESHOLD,
        "objectives": {c.name: c.to_dict() for c in checks},
        "max_rel_error": worst.max_rel_error,
        "worst_objective": worst.name,
        "worst_index": worst.worst_index,
        "worst_parameter": worst.worst_parameter,
        "passed": worst.max_rel_error < THRESHOLD,
    }
