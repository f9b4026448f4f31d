"""Flat key=value run configuration with dotted keys and strict validation."""
from __future__ import annotations

import os
from pathlib import Path

from .networks import ModelDims


class ConfigError(ValueError):
    """Raised for unknown keys, malformed values, or bad combinations."""


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


# key -> (type, default); the single source of truth for every knob
DEFAULTS: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "dims.n_z": (int, 16),
    "dims.w0": (int, 16),
    "dims.h0": (int, 16),
    "dims.m_d": (int, 4),
    "dims.n_di": (int, 512),
    "dims.n_d": (int, 16),
    "dims.n_g": (int, 16),
    "dims.m_g": (int, 8),
    "dims.n_gi": (int, 512),
    "dims.w": (int, 32),
    "dims.d": (int, 32),
    "dims.channel_base": (float, 0.125),
    "dims.residual_blocks": (int, 2),
    "model.dialogue_encoder": (str, "recurrent"),
    "model.embed_dim": (int, 16),
    "model.d_cap": (int, 16),
    "model.d_turn": (int, 16),
    "model.h_rnn": (int, 32),
    "model.d_dlg": (int, 32),
    "train.epochs": (int, 60),
    "train.batch_size": (int, 16),
    "train.lr0": (float, 2e-4),
    "train.lr_half_every": (int, 10),
    "train.lambda_kl": (float, 2.0),
    "train.beta1": (float, 0.5),
    "train.beta2": (float, 0.999),
    "train.non_saturating": (bool, False),
    "train.checkpoint_every": (int, 10),
    "eval.n_splits": (int, 10),
    "eval.split_fraction": (float, 0.75),
    "eval.judge_epochs": (int, 20),
    "eval.judge_lr": (float, 1e-3),
    "eval.judge_batch_size": (int, 64),
    "eval.accuracy_floor": (float, 0.9),
    "eval.val_fraction": (float, 0.2),
}


class RunConfig:
    """Resolved configuration: defaults, overlaid file values, then overrides."""

    def __init__(self, values: dict | None = None):
        self._values = {k: default for k, (_, default) in DEFAULTS.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key!r}")
        typ = DEFAULTS[key][0]
        try:
            if isinstance(value, str):
                value = _parse_bool(value) if typ is bool else typ(value.strip())
            elif typ is bool:
                value = bool(value)
            elif isinstance(value, bool):
                raise ValueError(f"expected {typ.__name__}")
            else:
                value = typ(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        self._values[key] = value

    def __getitem__(self, key: str):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key!r}")
        return self._values[key]

    def as_dict(self) -> dict:
        return dict(self._values)

    @classmethod
    def from_file(cls, path, overrides=()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            cfg.update_from_file(path)
        cfg.update_from_pairs(overrides)
        return cfg

    def update_from_file(self, path) -> None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, raw = stripped.partition("=")
            try:
                self.set(key.strip(), raw.strip())
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc

    def update_from_pairs(self, pairs) -> None:
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override must be key=value, got {pair!r}")
            key, _, raw = pair.partition("=")
            self.set(key.strip(), raw.strip())

    def dims(self) -> ModelDims:
        prefix = "dims."
        kwargs = {k[len(prefix):]: v for k, v in self._values.items() if k.startswith(prefix)}
        try:
            return ModelDims(**kwargs).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def estimator_kwargs(self) -> dict:
        return {
            "dims": self.dims(),
            "dialogue_encoder": self["model.dialogue_encoder"],
            "embed_dim": self["model.embed_dim"],
            "d_cap": self["model.d_cap"],
            "d_turn": self["model.d_turn"],
            "h_rnn": self["model.h_rnn"],
            "d_dlg": self["model.d_dlg"],
            "epochs": self["train.epochs"],
            "batch_size": self["train.batch_size"],
            "lr0": self["train.lr0"],
            "lr_half_every": self["train.lr_half_every"],
            "lambda_kl": self["train.lambda_kl"],
            "beta1": self["train.beta1"],
            "beta2": self["train.beta2"],
            "non_saturating": self["train.non_saturating"],
            "checkpoint_every": self["train.checkpoint_every"],
            "seed": self["seed"],
        }


def configured_threads() -> int:
    """Worker cap: CHATPAINTER_THREADS when set, else min(4, cpu count)."""
    raw = os.environ.get("CHATPAINTER_THREADS")
    if raw is not None:
        try:
            value = int(raw)
        except ValueError as exc:
            raise ConfigError(f"CHATPAINTER_THREADS must be an integer, got {raw!r}") from exc
        if value < 1:
            raise ConfigError("CHATPAINTER_THREADS must be >= 1")
        return value
    return min(4, os.cpu_count() or 1)
