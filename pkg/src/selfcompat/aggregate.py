"""Combining per-objective gradients into one update direction.

In ``project`` mode every gradient is de-conflicted against the raw
gradients of all objectives, visited in a seeded random order: whenever
the running copy has a negative inner product with a raw gradient, the
component along that gradient is removed. The projected copies are then
summed. ``summation`` mode sums the raw gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError

MODES = ("project", "summation")


@dataclass
class AggregationConfig:
    mode: str = "project"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"aggregation mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class GradientSet:
    """Flat gradients over the full parameter vector, keyed by objective name."""

    names: list[str]
    raw: list[np.ndarray]
    projected: list[np.ndarray] = field(default_factory=list)
    rng_seed: int = 0

    def __post_init__(self):
        if len(self.names) != len(self.raw):
            raise ShapeError(f"{len(self.names)} names for {len(self.raw)} gradients")
        if self.raw:
            n = self.raw[0].shape
            for name, g in zip(self.names, self.raw):
                if g.ndim != 1 or g.shape != n:
                    raise ShapeError(f"gradient {name!r} has shape {g.shape}, expected {n}")

    def conflict_rate(self) -> float:
        """Fraction of distinct pairs whose inner product is negative."""
        k = len(self.raw)
        if k < 2:
            return 0.0
        bad = 0
        for i in range(k):
            for j in range(i + 1, k):
                bad += float(self.raw[i] @ self.raw[j]) < 0.0
        return bad / (k * (k - 1) // 2)


def project_pair(g_a: np.ndarray, g_b: np.ndarray) -> np.ndarray:
    """``g_a`` with its component along ``g_b`` removed when the two conflict."""
    g_a = np.asarray(g_a, dtype=np.float64)
    g_b = np.asarray(g_b, dtype=np.float64)
    if g_a.shape != g_b.shape:
        raise ShapeError(f"gradient lengths differ: {g_a.shape} vs {g_b.shape}")
    d = float(g_a @ g_b)
    if d >= 0.0:
        return g_a
    # rescale g_b so that |g_b|^2 cannot underflow for tiny gradients
    scale = float(np.max(np.abs(g_b)))
    assert scale > 0.0, "negative inner product with a zero vector"
    unit = g_b / scale
    return g_a - (float(g_a @ unit) / float(unit @ unit)) * unit


def _sum(vectors: Sequence[np.ndarray]) -> np.ndarray:
    out = np.zeros_like(vectors[0])
    for v in vectors:
        out = out + v
    return out


def aggregate(gset: GradientSet, cfg: AggregationConfig) -> np.ndarray:
    if not gset.raw:
        raise ShapeError("cannot aggregate an empty gradient set")
    if cfg.mode == "summation":
        return _sum(gset.raw)
    rng = np.random.default_rng(gset.rng_seed)
    projected = []
    for g_a in gset.raw:
        g = g_a.copy()
        for b in rng.permutation(len(gset.raw)):
            g = project_pair(g, gset.raw[b])
        projected.append(g)
    gset.projected = projected
    return _sum(projected)


def step_seed(global_seed: int, step: int) -> int:
    return int(global_seed) ^ int(step)


# ---------------------------------------------------------------------------
# moving between per-tensor gradients and flat vectors


def parameter_layout(model) -> list[tuple[str, tuple]]:
    return [(name, p.shape) for name, p in model.named_parameters()]


def capture_gradients(model) -> dict[str, np.ndarray]:
    """Copy of every parameter's accumulated gradient (zeros where none flowed)."""
    return {name: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for name, p in model.named_parameters()}


def flatten_gradients(model, buffers: dict[str, dict[str, np.ndarray]], rng_seed: int = 0) -> GradientSet:
    """Stack per-objective gradient buffers into flat vectors in manifest order."""
    layout = parameter_layout(model)
    names = [n for n, _ in layout]
    flat = []
    for objective, buf in buffers.items():
        if list(buf.keys()) != names:
            raise ShapeError(f"gradient buffer for {objective!r} does not follow the parameter manifest order")
        parts = []
        for (name, shape) in layout:
            g = np.asarray(buf[name], dtype=np.float64)
            if g.shape != shape:
                raise ShapeError(f"{objective!r}: gradient for {name} has shape {g.shape}, expected {shape}")
            parts.append(g.ravel())
        flat.append(np.concatenate(parts))
    return GradientSet(list(buffers.keys()), flat, rng_seed=rng_seed)


def split_flat(vector: np.ndarray, model) -> dict[str, np.ndarray]:
    layout = parameter_layout(model)
    total = sum(int(np.prod(s)) for _, s in layout)
    if vector.shape != (total,):
        raise ShapeError(f"flat vector has shape {vector.shape}, model has {total} parameters")
    out = {}
    pos = 0
    for name, shape in layout:
        n = int(np.prod(shape))
        out[name] = vector[pos:pos + n].reshape(shape)
        pos += n
    return out


def apply_step(model, step: np.ndarray, lr: float) -> None:
    """theta <- theta + lr * step, in place."""
    parts = split_flat(step, model)
    for name, p in model.named_parameters():
        p.data += lr * parts[name]


def unflatten(update: np.ndarray, model, lr: float) -> None:
    """Plain descent along an aggregated direction: theta <- theta - lr * update."""
    apply_step(model, -update, lr)
