"""Cross-model retrieval evaluation (mAP and rank-1)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError
from .model import SwitchableModel


@dataclass
class RetrievalScores:
    map: float
    r1: float
    num_queries: int
    num_skipped: int = 0

    def __iter__(self):
        # unpacks as (mAP, R1)
        yield self.map
        yield self.r1


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Unit-length rows; an all-zero row stays zero (cosine 0 against everything)."""
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norms, 1e-12)


def cosine_similarity(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise ShapeError(f"query features {query.shape} and gallery features {gallery.shape} do not conform")
    return normalize_rows(query) @ normalize_rows(gallery).T


def extract_features(model: SwitchableModel, ratio: float, vectors: np.ndarray) -> np.ndarray:
    """L2-normalised eval-mode embeddings."""
    if vectors.shape[0] == 0:
        raise ShapeError("cannot extract features from an empty dataset")
    return normalize_rows(model.forward(vectors, ratio, train=False).data)


def average_precision(relevant_in_rank_order: np.ndarray) -> float:
    hits = np.flatnonzero(relevant_in_rank_order)
    precisions = (np.arange(1, hits.size + 1) / (hits + 1)).tolist()
    return math.fsum(precisions) / hits.size


def map_r1(query_feats, query_labels, gallery_feats, gallery_labels, *, similarity=None) -> RetrievalScores:
    """Rank gallery rows by descending cosine similarity (ties by gallery index) and score.

    Queries without any same-label gallery row are skipped and counted.
    """
    query_labels = np.asarray(query_labels)
    gallery_labels = np.asarray(gallery_labels)
    sims = cosine_similarity(np.asarray(query_feats), np.asarray(gallery_feats)) if similarity is None else similarity
    if sims.shape != (query_labels.size, gallery_labels.size):
        raise ShapeError(f"similarity matrix {sims.shape} vs {query_labels.size} queries / {gallery_labels.size} gallery")
    order = np.argsort(-sims, axis=1, kind="stable")
    aps, tops = [], []
    skipped = 0
    for qi in range(query_labels.size):
        rel = gallery_labels[order[qi]] == query_labels[qi]
        if not rel.any():
            skipped += 1
            continue
        aps.append(average_precision(rel))
        tops.append(1.0 if rel[0] else 0.0)
    if not aps:
        return RetrievalScores(0.0, 0.0, 0, skipped)
    return RetrievalScores(math.fsum(aps) / len(aps), math.fsum(tops) / len(tops), len(aps), skipped)


def chance_map(query_labels, gallery_labels) -> float:
    """Expected mAP of a uniformly random ranking, from label frequencies.

    For R relevant among N gallery rows, E[AP] = (R-1)/(N-1) + H_N (N-R) / (N (N-1)).
    """
    gallery_labels = np.asarray(gallery_labels)
    n = gallery_labels.size
    harmonic = math.fsum(1.0 / k for k in range(1, n + 1))
    counts = {int(c): int(k) for c, k in zip(*np.unique(gallery_labels, return_counts=True))}
    vals = []
    for y in np.asarray(query_labels).tolist():
        r = counts.get(int(y), 0)
        if r == 0:
            continue
        if n == 1:
            vals.append(1.0)
            continue
        vals.append((r - 1) / (n - 1) + harmonic * (n - r) / (n * (n - 1)))
    return math.fsum(vals) / len(vals) if vals else 0.0


@dataclass
class CompatMatrix:
    ratios: list[float]
    entries: dict[tuple[float, float], RetrievalScores]
    metadata: dict = field(default_factory=dict)
    metric: str = "cosine"

    def map(self, q: float, g: float) -> float:
        return self.entries[(q, g)].map

    def to_json(self) -> dict:
        return {
            "ratios": self.ratios,
            "metric": self.metric,
            "normalized": True,
            "metadata": self.metadata,
            "entries": [
                {"q": q, "g": g, "map": s.map, "r1": s.r1, "skipped_queries": s.num_skipped}
                for (q, g), s in self.entries.items()
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CompatMatrix":
        try:
            ratios = [float(r) for r in doc["ratios"]]
            entries = {
                (float(e["q"]), float(e["g"])): RetrievalScores(float(e["map"]), float(e["r1"]), 0,
                                                               int(e.get("skipped_queries", 0)))
                for e in doc["entries"]
            }
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed compatibility matrix: {exc!r}") from None
        return cls(ratios, entries, dict(doc.get("metadata", {})), doc.get("metric", "cosine"))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def table(self, metric: str = "map") -> str:
        """Aligned text table: rows are query models, columns gallery models, values in percent."""
        heads = [f"{r:g}x" for r in self.ratios]
        lines = [f"{metric.upper():>10} q\\g " + " ".join(f"{h:>7}" for h in heads)]
        for q in self.ratios:
            cells = [f"{100.0 * getattr(self.entries[(q, g)], metric):7.2f}" for g in self.ratios]
            lines.append(f"{q:>13g}x " + " ".join(cells))
        return "\n".join(lines)

    def off_diagonal_ratios(self) -> dict[tuple[float, float], float]:
        """Off-diagonal mAP divided by the larger of the two corresponding diagonal entries."""
        out = {}
        for (q, g), s in self.entries.items():
            if q == g:
                continue
            ref = max(self.map(q, q), self.map(g, g))
            out[(q, g)] = s.map / ref if ref > 0 else 0.0
        return out

    def mean_cross_map(self) -> float:
        vals = [s.map for (q, g), s in self.entries.items() if q != g]
        return math.fsum(vals) / len(vals) if vals else 0.0


def compat_matrix(model: SwitchableModel, query, gallery, ratios=None, metadata=None) -> CompatMatrix:
    """Retrieval scores for every (query ratio, gallery ratio) pair.

    ``query`` and ``gallery`` are (vectors, labels) pairs.
    """
    ratios = list(model.all_ratios if ratios is None else [model.resolve_ratio(r) for r in ratios])
    qv, ql = query
    gv, gl = gallery
    q_feats = {r: extract_features(model, r, qv) for r in ratios}
    g_feats = {r: extract_features(model, r, gv) for r in ratios}
    entries = {}
    for rq in ratios:
        for rg in ratios:
            entries[(rq, rg)] = map_r1(q_feats[rq], ql, g_feats[rg], gl)
    meta = {"distance": "cosine", "l2_normalized": True}
    meta.update(metadata or {})
    return CompatMatrix(ratios, entries, meta)


def cross_model_scores(query_model, q_ratio, gallery_model, g_ratio, query, gallery) -> RetrievalScores:
    """M(query model at q_ratio, gallery model at g_ratio) for two possibly unrelated networks."""
    qf = extract_features(query_model, q_ratio, query[0])
    gf = extract_features(gallery_model, g_ratio, gallery[0])
    return map_r1(qf, query[1], gf, gallery[1])
