"""Checkpoints: a JSON manifest plus one little-endian float64 blob.

Layout of a checkpoint directory::

    manifest.json   format_version, model/train config, vocab, entries
    params.bin      concatenated arrays, offsets in bytes from the manifest
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .model import ITDDModel, ModelConfig
from .vocab import Vocab

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    """Checkpoint is missing, malformed or does not match the model config."""


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model: ITDDModel, vocab: Vocab | None = None, adam=None, train_config=None,
                    step: int = 0) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays: list[tuple[str, np.ndarray]] = list((k, p.data) for k, p in model.parameters().items())
    if adam is not None:
        arrays += [(f"adam.m/{k}", a) for k, a in adam.m.items()]
        arrays += [(f"adam.v/{k}", a) for k, a in adam.v.items()]
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        entries.append({"path": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "step": step,
        "vocab": vocab.itos if vocab is not None else None,
        "adam": None if adam is None else {
            "t": adam.t, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
        },
        "entries": entries,
    }
    _atomic_write(path / BLOB, b"".join(chunks))
    _atomic_write(path / MANIFEST, json.dumps(manifest, indent=1, sort_keys=True).encode("utf-8"))
    return path


class Checkpoint:
    def __init__(self, model: ITDDModel, vocab: Vocab | None, adam, manifest: dict):
        self.model = model
        self.vocab = vocab
        self.adam = adam
        self.manifest = manifest

    @property
    def step(self) -> int:
        return int(self.manifest.get("step", 0))


def load_checkpoint(path) -> Checkpoint:
    from .train import AdamState

    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: missing checkpoint file {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}/{MANIFEST}: malformed JSON") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {manifest.get('format_version')!r} != supported {FORMAT_VERSION}"
        )
    try:
        config = ModelConfig.from_dict(manifest["model_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid model_config ({exc})") from exc
    model = ITDDModel(config)
    params = model.parameters()
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest.get("entries", []):
        name, shape, offset = entry["path"], tuple(entry["shape"]), entry["offset"]
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if entry.get("nbytes", nbytes) != nbytes or offset < 0 or offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: entry {name} with shape {list(shape)} does not fit the blob")
        arrays[name] = np.frombuffer(blob, dtype=_DTYPE, count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
    for name, p in params.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: parameter {name} missing from checkpoint")
        if arrays[name].shape != p.shape:
            raise CheckpointError(
                f"{path}: parameter {name} has shape {list(arrays[name].shape)}, model expects {list(p.shape)}"
            )
        p.data[...] = arrays[name]
    extra = [n for n in arrays if not n.startswith("adam.") and n not in params]
    if extra:
        raise CheckpointError(f"{path}: unexpected parameters {extra[:3]}")
    adam = None
    if manifest.get("adam") is not None:
        h = manifest["adam"]
        adam = AdamState(lr=h["lr"], beta1=h["beta1"], beta2=h["beta2"], eps=h["eps"], t=h["t"])
        for name, p in params.items():
            for kind, store in (("m", adam.m), ("v", adam.v)):
                key = f"adam.{kind}/{name}"
                if key not in arrays or arrays[key].shape != p.shape:
                    raise CheckpointError(f"{path}: optimizer state {key} missing or misshapen")
                store[name] = arrays[key].copy()
    vocab = Vocab(manifest["vocab"]) if manifest.get("vocab") else None
    if vocab is not None and len(vocab) != config.vocab_size:
        raise CheckpointError(f"{path}: vocab has {len(vocab)} tokens, config says {config.vocab_size}")
    return Checkpoint(model, vocab, adam, manifest)
