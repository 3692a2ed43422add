"""JSON run configuration with strict key checking.

Sections::

    model  {widths, feature_dim, classes?, bn_momentum?, bn_eps?}
    train  TrainConfig fields
    data   {"synthetic": SyntheticSpec fields} | {"dir": path} | {"idx_images": path, "idx_labels": path}
    eval   {ratios?}
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import LabeledVectorSet, SyntheticSpec, generate_synthetic, load_dataset_dir, load_idx
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig

_SECTIONS = {"model", "train", "data", "eval"}
_MODEL_KEYS = {"widths", "feature_dim", "classes", "bn_momentum", "bn_eps"}
_DATA_FORMS = ({"synthetic"}, {"dir"}, {"idx_images", "idx_labels"})
_EVAL_KEYS = {"ratios"}


def _reject_unknown(section: str, got: dict, allowed) -> None:
    if not isinstance(got, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    extra = sorted(set(got) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(extra)}")


def build_dataclass(cls, section: str, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    _reject_unknown(section, values, names)
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"section {section!r}: {exc}") from None


@dataclass
class RunConfig:
    model: dict
    train: TrainConfig
    data: dict
    eval_ratios: list[float] | None = None  # None with evaluate=True means every ratio
    raw: dict = field(default_factory=dict)
    evaluate: bool = False

    def load_data(self, base_dir: Path | None = None) -> LabeledVectorSet:
        base = base_dir or Path(".")
        if "synthetic" in self.data:
            return generate_synthetic(build_dataclass(SyntheticSpec, "data.synthetic", self.data["synthetic"]))
        if "dir" in self.data:
            return load_dataset_dir(base / self.data["dir"])
        return load_idx(base / self.data["idx_images"], base / self.data["idx_labels"])

    def model_config(self, data: LabeledVectorSet) -> ModelConfig:
        m = dict(self.model)
        classes = m.pop("classes", None)
        if classes is not None and classes != data.num_classes:
            raise ConfigError(f"model.classes = {classes} but the data has {data.num_classes} classes")
        try:
            return ModelConfig(input_dim=data.dim, classes=data.num_classes, crop_ratios=self.train.crop_ratios,
                               seed=self.train.seed, **m)
        except TypeError as exc:
            raise ConfigError(f"section 'model': {exc}") from None

    def resolved(self, data: LabeledVectorSet) -> dict:
        """Every setting after defaults are applied, for the run manifest."""
        out = {
            "model": self.model_config(data).to_dict(),
            "train": self.train.to_dict(),
            "data": self.data,
        }
        if "synthetic" in self.data:
            out["data"] = {"synthetic": build_dataclass(SyntheticSpec, "data.synthetic",
                                                        self.data["synthetic"]).to_dict()}
        if self.evaluate:
            out["eval"] = {"ratios": self.eval_ratios}
        return out


def parse_config(doc: dict) -> RunConfig:
    _reject_unknown("config", doc, _SECTIONS)
    for required in ("model", "data"):
        if required not in doc:
            raise ConfigError(f"missing section {required!r}")
    model = doc["model"]
    _reject_unknown("model", model, _MODEL_KEYS)
    for required in ("widths", "feature_dim"):
        if required not in model:
            raise ConfigError(f"model.{required} is required")
    train = build_dataclass(TrainConfig, "train", doc.get("train", {}))
    data = doc["data"]
    if not isinstance(data, dict) or set(data) not in [set(f) for f in _DATA_FORMS]:
        raise ConfigError("data must be one of {synthetic: {...}}, {dir: path}, {idx_images: path, idx_labels: path}")
    if "synthetic" in data:
        build_dataclass(SyntheticSpec, "data.synthetic", data["synthetic"])
    ev = doc.get("eval")
    ratios = None
    if ev is not None:
        _reject_unknown("eval", ev, _EVAL_KEYS)
        ratios = [float(r) for r in ev.get("ratios", [])] or None
    return RunConfig(dict(model), train, dict(data), ratios, doc, evaluate=ev is not None)


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_config(doc)
