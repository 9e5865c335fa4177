"""Declarative run configuration.

A config file is flat ``key = value`` text: one pair per line, ``#`` starts
a comment, unknown keys are rejected. Command-line flags override file
values. Relative paths resolve against ``data_dir``, which itself defaults
to the config file's directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .data import FeatureSet
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    d_k: int = 0
    d_v: int = 0
    grid_len: int = 8
    d_feat: int = 16
    p_drop_visual: float = 0.5
    p_drop_residual: float = 0.0
    max_len: int = 100
    # training
    epochs: int = 100
    batch_size: int = 32
    warmup_steps: int = 4000
    label_smoothing: float = 0.1
    selection_metric: str = "bleu4"
    seed: int = 0
    checkpoint_every: int = 1
    grad_clip: float = 5.0
    decode_max_len: int = 100
    # data
    data_dir: str = ""
    train_src: str = ""
    train_tgt: str = ""
    train_manifest: str = ""
    train_features: str = ""
    val_src: str = ""
    val_tgt: str = ""
    val_manifest: str = ""
    val_features: str = ""
    min_count: int = 1
    out_dir: str = "out"
    # warm start
    init_model: str = ""  # checkpoint to continue from (pretrain -> finetune)


_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_PATH_KEYS = (
    "train_src",
    "train_tgt",
    "train_manifest",
    "train_features",
    "val_src",
    "val_tgt",
    "val_manifest",
    "val_features",
    "init_model",
)


def parse_config_text(text, origin="<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        values[key] = val
    return values


def _convert(key, val):
    kind = _FIELDS[key]
    try:
        if "int" in str(kind):
            return int(val)
        if "float" in str(kind):
            return float(val)
        return str(val)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {val!r} ({e})") from None


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """File values, then overrides; resolves paths and checks they exist."""
    with open(path, encoding="utf-8") as f:
        raw = parse_config_text(f.read(), origin=str(path))
    values = {k: _convert(k, v) for k, v in raw.items()}
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in _FIELDS:
            raise ConfigError(f"unknown override {k!r}")
        values[k] = v
    rc = RunConfig(**values)
    if not rc.data_dir:
        rc.data_dir = os.path.dirname(os.path.abspath(path))
    for key in _PATH_KEYS:
        val = getattr(rc, key)
        if val:
            resolved = val if os.path.isabs(val) else os.path.join(rc.data_dir, val)
            if not os.path.exists(resolved):
                raise ConfigError(f"{key}: no such file {resolved}")
            setattr(rc, key, resolved)
    if not os.path.isabs(rc.out_dir):
        rc.out_dir = os.path.join(rc.data_dir, rc.out_dir)
    return rc


def model_config(rc: RunConfig, src_vocab: int, tgt_vocab: int,
                 features: FeatureSet | None = None) -> ModelConfig:
    grid_len, d_feat = rc.grid_len, rc.d_feat
    if features is not None:
        if (grid_len, d_feat) != (features.grid_len, features.d_feat):
            raise ConfigError(
                f"config grid {grid_len}x{d_feat} != feature file "
                f"{features.grid_len}x{features.d_feat}"
            )
    return ModelConfig(
        n_layers=rc.n_layers,
        n_heads=rc.n_heads,
        d_model=rc.d_model,
        d_ff=rc.d_ff,
        d_k=rc.d_k,
        d_v=rc.d_v,
        src_vocab=src_vocab,
        tgt_vocab=tgt_vocab,
        grid_len=grid_len,
        d_feat=d_feat,
        p_drop_visual=rc.p_drop_visual,
        p_drop_residual=rc.p_drop_residual,
        max_len=rc.max_len,
    )


def train_config(rc: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=rc.epochs,
        batch_size=rc.batch_size,
        warmup_steps=rc.warmup_steps,
        label_smoothing=rc.label_smoothing,
        selection_metric=rc.selection_metric,
        seed=rc.seed,
        checkpoint_every=rc.checkpoint_every,
        grad_clip=rc.grad_clip if rc.grad_clip > 0 else None,
        decode_max_len=rc.decode_max_len,
    )
