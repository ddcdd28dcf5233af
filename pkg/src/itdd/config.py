"""Flat ``key = value`` run configuration.

One setting per line; ``#`` starts a comment. Keys are the fields of
:class:`ModelConfig` and :class:`TrainConfig` plus a few run-level extras::

    d_model = 32
    heads = 4
    variant = ITE+DD
    max_steps = 2000
    variants = ITE+DD, ITE+CKAD, KAT   # only read by `compare`

``vocab_size`` is never read from the file; it comes from the corpus.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import VARIANTS, ModelConfig
from .nn import ConfigError
from .train import TrainConfig

_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    variants: tuple[str, ...] = VARIANTS
    beam: int = 5
    max_decode_len: int = 30
    min_count: int = 1
    max_vocab: int | None = None
    val_fraction: float = 0.1

    def model_config(self, vocab_size: int, **override) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **{**self.model, **override})


_EXTRAS = {f.name: f for f in fields(RunConfig) if f.name not in ("model", "train")}


def _split(raw: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in raw.split(",") if v.strip())


_PARSERS = {"bool": lambda r: _BOOL[r.lower()], "int": int, "float": float, "str": str, "tuple[str, ...]": _split}


def _coerce(key: str, raw: str, kind: str):
    # annotations are strings here (postponed evaluation), e.g. "int | None"
    options = [k.strip() for k in str(kind).split("|")]
    if "None" in options and raw.lower() == "none":
        return None
    try:
        return _PARSERS[options[0]](raw)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from exc


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    model_fields = {f.name: f.type for f in fields(ModelConfig) if f.name != "vocab_size"}
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    model, train, extras = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in model_fields:
            model[key] = _coerce(key, raw, model_fields[key])
        elif key in train_fields:
            train[key] = _coerce(key, raw, train_fields[key])
        elif key in _EXTRAS:
            extras[key] = _coerce(key, raw, _EXTRAS[key].type)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    bad = [v for v in extras.get("variants", ()) if v not in VARIANTS]
    if bad:
        raise ConfigError(f"{source}: unknown variants {bad}; expected a subset of {VARIANTS}")
    ModelConfig(vocab_size=4, **model)  # validate early
    return RunConfig(model=model, train=TrainConfig(**train), **extras)


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))
