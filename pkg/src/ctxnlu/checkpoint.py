"""Single-file checkpoints: an 8-byte little-endian header length, a JSON
header (metadata plus a tensor directory with byte offsets), then the raw
float32 little-endian payload.

Parameters are stored at 32-bit precision. ``round_params`` applies the same
rounding to a live model so that the in-memory model and a reloaded one
evaluate identically.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoder import Vocabulary
from .featurizer import Featurizer
from .models import IntentCatalog, IntentModel, ModelConfig
from .training import Classifier, TrainingConfig

FORMAT = "ctxnlu-checkpoint"
VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def round_params(clf: Classifier) -> None:
    """Round every parameter to float32 in place (values stay float64 arrays)."""
    for p in clf.model.params.values():
        p.data[...] = p.data.astype(np.float32).astype(np.float64)


def to_bytes(clf: Classifier) -> bytes:
    model = clf.model
    directory, chunks, offset = [], [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].data, dtype=_DTYPE)
        raw = arr.tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "kind": model.kind,
        "dtype": "float32-le",
        "tensors": directory,
        "vocab": clf.vocab.tokens[2:],
        "featurizer": model.featurizer.to_dict(),
        "catalog": model.catalog.to_dict(),
        "model_config": model.config.to_dict(),
        "training_config": clf.train_config.to_dict(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save(clf: Classifier, path) -> None:
    Path(path).write_bytes(to_bytes(clf))


def from_bytes(blob: bytes) -> Classifier:
    if len(blob) < 8:
        raise CheckpointError("checkpoint truncated: no header length")
    (n,) = struct.unpack("<Q", blob[:8])
    if 8 + n > len(blob):
        raise CheckpointError("checkpoint truncated: header runs past end of file")
    try:
        header = json.loads(blob[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint header is not valid JSON: {exc}") from None
    if header.get("format") != FORMAT:
        raise CheckpointError("not a checkpoint file")
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    payload = memoryview(blob)[8 + n :]

    vocab = Vocabulary(header["vocab"])
    featurizer = Featurizer.from_dict(header["featurizer"])
    catalog = IntentCatalog.from_dict(header["catalog"])
    config = ModelConfig.from_dict(header["model_config"])
    train_config = TrainingConfig.from_dict(header["training_config"])
    model = IntentModel(header["kind"], catalog, len(vocab), featurizer, config, seed=train_config.seed)

    stored = {t["name"]: t for t in header["tensors"]}
    if set(stored) != set(model.params):
        missing = sorted(set(model.params) - set(stored))
        extra = sorted(set(stored) - set(model.params))
        raise CheckpointError(f"tensor directory mismatch: missing {missing}, unexpected {extra}")
    for name, entry in stored.items():
        p = model.params[name]
        if tuple(entry["shape"]) != p.data.shape:
            raise CheckpointError(f"{name}: stored shape {entry['shape']} vs model {list(p.data.shape)}")
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{name}: payload truncated")
        arr = np.frombuffer(payload[entry["offset"] : end], dtype=_DTYPE).reshape(p.data.shape)
        p.data[...] = arr.astype(np.float64)
    return Classifier(model, vocab, train_config)


def load(path) -> Classifier:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return from_bytes(blob)
