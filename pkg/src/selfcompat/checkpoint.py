"""Binary checkpoint format.

Layout::

    b"SFSC1"                      5 bytes
    header length                 uint64, little endian
    header                        UTF-8 JSON
    tensor blobs                  float64 little endian, manifest order

The header holds the model architecture, crop ratios, RNG seed, training
step, a tensor manifest (name, shape, byte offset relative to the blob
section, byte count) and the SHA-256 of the blob section.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, SelfCompatError
from .model import ModelConfig, SwitchableModel, sliced_width

MAGIC = b"SFSC1"
_PREFIX = len(MAGIC) + 8


def encode(model: SwitchableModel) -> bytes:
    manifest = []
    blobs = []
    offset = 0
    for name, arr in model.state_arrays():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    header = {
        "architecture": model.config.to_dict(),
        "crop_ratios": list(model.ratios),
        "seed": model.config.seed,
        "step": model.step,
        "tensors": manifest,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + blob


def save_checkpoint(model: SwitchableModel, path) -> None:
    path = Path(path)
    data = encode(model)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def decode(data: bytes, path=None) -> SwitchableModel:
    try:
        return _decode(data, path)
    except SelfCompatError as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"invalid checkpoint contents: {exc}", path=path, offset=_PREFIX) from exc
    except (KeyError, TypeError, ValueError, AttributeError, OverflowError, RecursionError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc!r}", path=path, offset=_PREFIX) from exc


def _decode(data: bytes, path) -> SwitchableModel:
    if len(data) < _PREFIX:
        raise CheckpointError(f"truncated checkpoint: expected at least {_PREFIX} bytes, got {len(data)}",
                              path=path, offset=len(data))
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}", path=path, offset=0)
    (head_len,) = struct.unpack("<Q", data[len(MAGIC):_PREFIX])
    blob_start = _PREFIX + head_len
    if blob_start > len(data):
        raise CheckpointError(
            f"truncated checkpoint: header needs {blob_start} bytes, file has {len(data)}",
            path=path, offset=len(MAGIC),
        )
    try:
        header = json.loads(data[_PREFIX:blob_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as exc:
        raise CheckpointError(f"header is not valid UTF-8 JSON: {exc}", path=path, offset=_PREFIX) from None
    if not isinstance(header, dict):
        raise CheckpointError("header is not a JSON object", path=path, offset=_PREFIX)

    tensors = header["tensors"]
    blob = data[blob_start:]
    expected = sum(int(t["nbytes"]) for t in tensors)
    if len(blob) != expected:
        raise CheckpointError(
            f"tensor data size mismatch: expected {expected} bytes, got {len(blob)}",
            path=path, offset=blob_start + min(len(blob), expected),
        )
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CheckpointError("tensor data checksum mismatch", path=path, offset=blob_start)

    config = ModelConfig.from_dict(header["architecture"])
    if 8 * _state_size(config) != len(blob):
        raise CheckpointError(
            f"architecture implies {8 * _state_size(config)} bytes of tensor data, file has {len(blob)}",
            path=path, offset=_PREFIX,
        )
    model = SwitchableModel(config)
    model.step = int(header["step"])
    if list(model.ratios) != [float(r) for r in header["crop_ratios"]]:
        raise CheckpointError("crop_ratios disagree with architecture", path=path, offset=_PREFIX)

    targets = model.state_arrays()
    if [t["name"] for t in tensors] != [n for n, _ in targets]:
        raise CheckpointError("tensor manifest does not match the architecture", path=path, offset=_PREFIX)
    cursor = 0
    for entry, (name, arr) in zip(tensors, targets):
        shape = tuple(int(s) for s in entry["shape"])
        off, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if shape != arr.shape or nbytes != arr.size * 8 or off != cursor:
            raise CheckpointError(
                f"tensor {name}: header shape {shape} / {nbytes} bytes disagrees with architecture shape {arr.shape}",
                path=path, offset=blob_start + off,
            )
        values = np.frombuffer(blob, dtype="<f8", count=arr.size, offset=off).reshape(shape)
        if not np.all(np.isfinite(values)):
            raise CheckpointError(f"tensor {name} holds NaN/Inf", path=path, offset=blob_start + off)
        arr[...] = values
        cursor += nbytes
    return model


def _state_size(config: ModelConfig) -> int:
    """Number of float64 values a model with ``config`` persists, computed without allocating it."""
    total = 0
    prev = config.input_dim
    for w in config.widths:
        total += w * prev + w
        for r in (*config.crop_ratios, 1.0):
            total += 4 * (w if r == 1.0 else sliced_width(w, r))
        prev = w
    total += config.feature_dim * prev + config.feature_dim
    return total + config.classes * config.feature_dim + config.classes


def load_checkpoint(path) -> SwitchableModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc.strerror}", path=path) from None
    return decode(data, path)
