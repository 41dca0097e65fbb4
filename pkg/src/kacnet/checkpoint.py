"""Checkpoint persistence.

Layout (text, one JSON document per line)::

    # kacnet-checkpoint v1
    {"model_config": {...}, "vocab": [...], "run_config": {...}, "tensors": K}
    {"name": "embedding", "shape": [V, E], "data": [row-major floats]}
    ... K tensor lines (parameters, then normalization buffers) ...
    # end K

Floats are written with their shortest round-trip repr, so loading gives
back every value bit for bit.  The trailing line guards against truncation.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from kacnet.errors import CheckpointError
from kacnet.model import KacModel, ModelConfig
from kacnet.records import RESERVED, Vocabulary

HEADER = "# kacnet-checkpoint v1"


def _tensors(model: KacModel):
    for name, p in model.parameters():
        yield name, p.data
    yield from model.buffers()


def save_checkpoint(model: KacModel, path, run_config: dict | None = None) -> None:
    tensors = list(_tensors(model))
    meta = {
        "model_config": vars(model.config),
        "vocab": model.vocab.itos if model.vocab is not None else None,
        "run_config": run_config or {},
        "tensors": len(tensors),
    }
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(HEADER + "\n")
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for name, arr in tensors:
            rec = {"name": name, "shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}
            fh.write(json.dumps(rec) + "\n")
        fh.write(f"# end {len(tensors)}\n")
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
    if not lines or lines[0] != HEADER:
        raise CheckpointError(f"{path}: not a kacnet checkpoint (missing '{HEADER}')")
    try:
        meta = json.loads(lines[1])
        count = int(meta["tensors"])
    except (IndexError, ValueError, KeyError, TypeError):
        raise CheckpointError(f"{path}: malformed metadata line") from None
    if len(lines) != count + 3 or lines[-1] != f"# end {count}":
        raise CheckpointError(f"{path}: truncated checkpoint (expected {count} tensors and an end marker)")
    tensors: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[2:-1], start=3):
        try:
            rec = json.loads(line)
            arr = np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
        except (ValueError, KeyError, TypeError):
            raise CheckpointError(f"{path}:{lineno}: malformed tensor record") from None
        tensors[rec["name"]] = arr
    return meta, tensors


def load_checkpoint(path, config: ModelConfig | None = None) -> tuple[KacModel, dict]:
    """Rebuild a model from ``path``; returns the model and its run config.

    When ``config`` is given the stored tensors must fit that architecture.
    """
    meta, tensors = read_checkpoint(path)
    try:
        stored = ModelConfig(**meta["model_config"])
    except TypeError as exc:
        raise CheckpointError(f"{path}: bad model config ({exc})") from None
    cfg = config or stored
    vocab = None
    if meta.get("vocab") is not None:
        words = meta["vocab"]
        if tuple(words[: len(RESERVED)]) != RESERVED:
            raise CheckpointError(f"{path}: vocabulary does not start with the reserved tokens")
        vocab = Vocabulary(words[len(RESERVED):])
    try:
        model = KacModel(cfg, vocab if vocab is not None and len(vocab) == cfg.vocab_size else None)
    except Exception as exc:
        raise CheckpointError(f"{path}: cannot build model ({exc})") from None
    if vocab is not None and model.vocab is None:
        raise CheckpointError(f"{path}: vocabulary of {len(vocab)} words does not match vocab_size={cfg.vocab_size}")
    targets = {name: p.data for name, p in model.parameters()}
    targets.update(dict(model.buffers()))
    missing = sorted(set(targets) - set(tensors))
    if missing:
        raise CheckpointError(f"{path}: missing tensor {missing[0]!r}")
    for name, dest in targets.items():
        src = tensors[name]
        if src.shape != dest.shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {src.shape}, model expects {dest.shape}")
    for name, dest in targets.items():
        dest[...] = tensors[name]
    return model, meta.get("run_config", {})
