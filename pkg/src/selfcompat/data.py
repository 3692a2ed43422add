"""Labelled vector datasets: synthetic clusters, CSV and IDX files.

CSV files carry a header ``id,label,f0,...,f{d-1}``. IDX files follow the
MNIST layout: a big-endian magic (0x00000803 for images, 0x00000801 for
labels), big-endian uint32 extents, then raw unsigned bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

SPLITS = ("train", "query", "gallery")
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledVectorSet:
    vectors: np.ndarray
    labels: np.ndarray
    split: np.ndarray  # one of SPLITS per row
    ids: np.ndarray

    def __post_init__(self):
        v, y, s, ids = self.vectors, self.labels, self.split, self.ids
        if v.ndim != 2:
            raise FormatError(f"vectors must be 2-D, got shape {v.shape}")
        n = v.shape[0]
        if y.shape != (n,) or s.shape != (n,) or ids.shape != (n,):
            raise FormatError(f"{n} vectors but {y.shape[0]} labels / {s.shape[0]} split tags / {ids.shape[0]} ids")
        if not np.all(np.isfinite(v)):
            raise FormatError("vectors contain NaN/Inf")
        if n:
            if y.min() < 0:
                raise FormatError("labels must be non-negative")
            present = np.unique(y)
            if present[-1] != present.size - 1:
                raise FormatError(f"labels are not dense in [0, {present.size}): max label is {int(present[-1])}")
        bad = set(np.unique(s).tolist()) - set(SPLITS)
        if bad:
            raise FormatError(f"unknown split tags {sorted(bad)}")
        if np.unique(ids).size != n:
            raise FormatError("sample ids are not unique")
        q, g = s == "query", s == "gallery"
        if q.any() and g.any():
            missing = np.setdiff1d(np.unique(y[q]), np.unique(y[g]))
            if missing.size:
                raise FormatError(f"query labels {missing.tolist()[:5]} never appear in the gallery")
        for arr in (v, y, s, ids):
            arr.setflags(write=False)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def part(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """(vectors, labels) of one split."""
        mask = self.split == split
        return self.vectors[mask], self.labels[mask]


def make_set(vectors, labels, split="train", ids=None) -> LabeledVectorSet:
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = vectors.shape[0]
    split = np.full(n, split, dtype="<U7") if isinstance(split, str) else np.asarray(split, dtype="<U7")
    ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    return LabeledVectorSet(vectors, labels, split, ids)


def stratified_split(labels: np.ndarray, fractions=(0.70, 0.15, 0.15)) -> np.ndarray:
    """Deterministic per-class split tags; within a class, rows keep their order."""
    labels = np.asarray(labels)
    tags = np.empty(labels.shape[0], dtype="<U7")
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n = idx.size
        if n < 3:
            raise ConfigError(f"class {int(c)} has {n} samples; at least 3 are needed for a train/query/gallery split")
        n_query = max(1, round(fractions[1] * n))
        n_gallery = max(1, round(fractions[2] * n))
        n_train = n - n_query - n_gallery
        tags[idx[:n_train]] = "train"
        tags[idx[n_train:n_train + n_query]] = "query"
        tags[idx[n_train + n_query:]] = "gallery"
    return tags


# ---------------------------------------------------------------------------
# synthetic clusters


@dataclass
class SyntheticSpec:
    classes: int = 50
    samples_per_class: int = 200
    dim: int = 64
    center_scale: float = 1.0
    noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.samples_per_class < 3:
            raise ConfigError(f"samples_per_class must be >= 3, got {self.samples_per_class}")
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if not (self.noise > 0 and math.isfinite(self.noise)):
            raise ConfigError(f"noise must be > 0, got {self.noise}")
        if not (self.center_scale > 0 and math.isfinite(self.center_scale)):
            raise ConfigError(f"center_scale must be > 0, got {self.center_scale}")

    def to_dict(self) -> dict:
        return asdict(self)


def generate_synthetic(spec: SyntheticSpec) -> LabeledVectorSet:
    """Gaussian blobs around centres drawn uniformly from [-scale, scale]^dim."""
    rng = np.random.default_rng(spec.seed)
    centers = rng.uniform(-spec.center_scale, spec.center_scale, size=(spec.classes, spec.dim))
    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    noise = rng.normal(0.0, spec.noise, size=(labels.size, spec.dim))
    vectors = centers[labels] + noise
    return make_set(vectors, labels, stratified_split(labels))


# ---------------------------------------------------------------------------
# CSV


def write_csv(path, vectors, labels, ids) -> None:
    d = vectors.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", *[f"f{i}" for i in range(d)]])
        for i, y, row in zip(ids, labels, vectors):
            w.writerow([int(i), int(y), *[repr(float(x)) for x in row]])


def write_dataset_dir(ds: LabeledVectorSet, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for split in SPLITS:
        mask = ds.split == split
        p = out_dir / f"{split}.csv"
        write_csv(p, ds.vectors[mask], ds.labels[mask], ds.ids[mask])
        paths.append(p)
    return paths


def _parse_csv(text: str, path):
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty CSV file", path=path, line=1) from None
    d = len(header) - 2
    expected = ["id", "label", *[f"f{i}" for i in range(d)]]
    if d < 1 or header != expected:
        raise FormatError("header must be 'id,label,f0,...,f{d-1}'", path=path, line=1)
    ids, labels, rows = [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != d + 2:
            raise FormatError(f"expected {d + 2} fields, got {len(row)}", path=path, line=lineno)
        try:
            ids.append(int(row[0]))
            labels.append(int(row[1]))
            vals = [float(x) for x in row[2:]]
        except ValueError as exc:
            raise FormatError(f"unparseable field: {exc}", path=path, line=lineno) from None
        if not all(math.isfinite(x) for x in vals):
            raise FormatError("non-finite feature value", path=path, line=lineno)
        rows.append(vals)
    if not rows:
        raise FormatError("CSV has a header but no data rows", path=path, line=2)
    return np.asarray(ids, dtype=np.int64), np.asarray(labels, dtype=np.int64), np.asarray(rows, dtype=np.float64)


def _read_text(path) -> str:
    try:
        return Path(path).read_bytes().decode("utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read file: {exc.strerror}", path=path) from None
    except UnicodeDecodeError as exc:
        raise FormatError("file is not UTF-8 text", path=path, offset=exc.start) from None


def load_csv(path, split: str = "train") -> LabeledVectorSet:
    ids, labels, vectors = _parse_csv(_read_text(path), path)
    try:
        return make_set(vectors, labels, split, ids)
    except FormatError as exc:
        raise FormatError(str(exc), path=path) from None


def load_dataset_dir(path) -> LabeledVectorSet:
    """Load ``train.csv``/``query.csv``/``gallery.csv`` from a directory (train optional)."""
    path = Path(path)
    parts = []
    for split in SPLITS:
        p = path / f"{split}.csv"
        if not p.exists():
            if split == "train":
                continue
            raise FormatError(f"missing {split}.csv", path=path)
        parts.append((split, _parse_csv(_read_text(p), p)))
    dims = {rows.shape[1] for _, (_, _, rows) in parts}
    if len(dims) != 1:
        raise FormatError(f"splits disagree on feature width: {sorted(dims)}", path=path)
    ids = np.concatenate([p[1][0] for p in parts])
    labels = np.concatenate([p[1][1] for p in parts])
    vectors = np.concatenate([p[1][2] for p in parts])
    split = np.concatenate([np.full(p[1][0].size, p[0], dtype="<U7") for p in parts])
    try:
        return make_set(vectors, labels, split, ids)
    except FormatError as exc:
        raise FormatError(str(exc), path=path) from None


# ---------------------------------------------------------------------------
# IDX


def _idx_header(data: bytes, magic: int, path) -> tuple[tuple[int, ...], int]:
    if len(data) < 4:
        raise FormatError(f"truncated IDX file: {len(data)} bytes, need at least 4", path=path, offset=len(data))
    (got,) = struct.unpack(">I", data[:4])
    if got != magic:
        raise FormatError(f"bad IDX magic 0x{got:08x}, expected 0x{magic:08x}", path=path, offset=0)
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(data) < end:
        raise FormatError(f"truncated IDX header: need {end} bytes, got {len(data)}", path=path, offset=len(data))
    dims = struct.unpack(f">{ndim}I", data[4:end])
    count = math.prod(dims)
    if len(data) != end + count:
        raise FormatError(
            f"IDX payload size mismatch: dimensions {dims} need {count} bytes, got {len(data) - end}",
            path=path, offset=end,
        )
    return dims, end


def parse_idx_images(data: bytes, path=None) -> np.ndarray:
    dims, start = _idx_header(data, IDX_IMAGES_MAGIC, path)
    pixels = np.frombuffer(data, dtype=np.uint8, offset=start)
    return pixels.reshape(dims[0], dims[1] * dims[2]).astype(np.float64) / 255.0


def parse_idx_labels(data: bytes, path=None) -> np.ndarray:
    dims, start = _idx_header(data, IDX_LABELS_MAGIC, path)
    return np.frombuffer(data, dtype=np.uint8, offset=start).astype(np.int64)


def load_idx(images_path, labels_path, split: str | None = None) -> LabeledVectorSet:
    """Images scaled to [0, 1] and flattened. With ``split=None`` a stratified 70/15/15 split is assigned."""
    try:
        img_bytes = Path(images_path).read_bytes()
        lab_bytes = Path(labels_path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read IDX file: {exc.strerror}", path=exc.filename) from None
    images = parse_idx_images(img_bytes, images_path)
    labels = parse_idx_labels(lab_bytes, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"image/label count mismatch: {images.shape[0]} images, {labels.shape[0]} labels",
                          path=labels_path, offset=4)
    try:
        tags = stratified_split(labels) if split is None else split
        return make_set(images, labels, tags)
    except (FormatError, ConfigError) as exc:
        raise FormatError(str(exc), path=labels_path) from None


def write_spec(spec: SyntheticSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
