"""Flat ``section.key=value`` run configuration.

Files hold one assignment per line (``#`` starts a comment); command-line
overrides use the same keys and are applied afterwards, last one winning.
"""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path

from .losses import LossConfig
from .sampling import SAMPLER_KINDS, as_rate
from .trainer import TrainConfig

DEFAULTS = {
    "loss.kind": "DSoftmax",
    "loss.s": "32",
    "loss.d": "0.9",
    "loss.m1": "4",
    "loss.m2": "0.5",
    "loss.m3": "0.35",
    "sampler.kind": "FullClasses",
    "sampler.rate": "1",
    "train.B": "64",
    "train.epochs": "30",
    "train.lr": "0.2",
    "train.momentum": "0.9",
    "train.seed": "0",
    "train.deterministic": "true",
    "train.encoder": "linear",
    "train.inter_weight": "1",
    "train.metrics_every": "50",
    "train.pair_budget": "100000",
    "train.eval_pairs": "4000",
    "data.C": "100",
    "data.n": "64",
    "data.per_class": "40",
    "data.noise_sigma": "0.08",
    "data.seed": "0",
    "ps.shards": "1",
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def parse_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


def load(path=None, overrides=()):
    """Defaults, then the file at ``path`` (if any), then ``overrides`` in order."""
    values = dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_text(p.read_text(), str(path)))
    for key, value in overrides:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return values


def _typed(values, key, conv):
    try:
        return conv(values[key])
    except (TypeError, ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{key}: invalid value {values[key]!r} ({exc})") from None


def _bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def loss_config(values):
    try:
        return LossConfig(
            kind=values["loss.kind"],
            s=_typed(values, "loss.s", float),
            d=_typed(values, "loss.d", float),
            m1=_typed(values, "loss.m1", int),
            m2=_typed(values, "loss.m2", float),
            m3=_typed(values, "loss.m3", float),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"loss: {exc}") from None


def train_config(values):
    sampler = values["sampler.kind"]
    if sampler not in SAMPLER_KINDS:
        raise ConfigError(f"sampler.kind: unknown sampler {sampler!r}; expected one of {SAMPLER_KINDS}")
    rate = _typed(values, "sampler.rate", lambda t: as_rate(Fraction(t)))
    try:
        return TrainConfig(
            loss=loss_config(values),
            sampler=sampler,
            rate=rate,
            B=_typed(values, "train.B", int),
            epochs=_typed(values, "train.epochs", int),
            lr=_typed(values, "train.lr", float),
            momentum=_typed(values, "train.momentum", float),
            seed=_typed(values, "train.seed", int),
            deterministic=_typed(values, "train.deterministic", _bool),
            encoder=values["train.encoder"],
            inter_weight=_typed(values, "train.inter_weight", float),
            metrics_every=_typed(values, "train.metrics_every", int),
            pair_budget=_typed(values, "train.pair_budget", int),
            eval_pairs=_typed(values, "train.eval_pairs", int),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None


def data_params(values):
    return {
        "C": _typed(values, "data.C", int),
        "n": _typed(values, "data.n", int),
        "per_class": _typed(values, "data.per_class", int),
        "noise_sigma": _typed(values, "data.noise_sigma", float),
        "seed": _typed(values, "data.seed", int),
    }


def render(values):
    """Resolved config as text, with the derived eps shown for reference."""
    lines = [f"{k}={values[k]}" for k in DEFAULTS]
    try:
        lines.append(f"# loss.eps (derived) = {loss_config(values).eps:.6g}")
    except ConfigError:
        pass
    return "\n".join(lines) + "\n"
