"""Flat key=value run configuration for the command-line tools.

One key per line, ``#`` starts a comment line, blank lines are ignored.
Unknown and duplicate keys are hard errors. Relative paths are resolved
against the directory containing the config file.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .train import TrainConfig


def _parse_int(text: str) -> int:
    return int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_str(text: str) -> str:
    return text


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(","))


def _parse_floats3(text: str) -> tuple[float, float, float]:
    parts = tuple(float(p) for p in text.split(","))
    if len(parts) != 3:
        raise ValueError(f"expected 3 comma-separated values, got {len(parts)}")
    return parts


@dataclass
class RunConfig:
    """Every settable field of a run; None means "derive from the data"."""

    # architecture
    channels: int | None = None
    feature_h: int | None = None
    feature_w: int | None = None
    classes: int | None = None
    epa_reduction: int = 4
    csw_reduction: int = 16
    head_hidden1: int = 512
    head_hidden2: int = 256
    dropout: float = 0.5
    # optimizer and schedule
    batch_size: int = 256
    lr_init: float = 0.1
    lr_final: float = 0.01
    decay_power: float = 0.5
    epochs: int = 70
    weight_decay: float = 1e-4
    momentum: float = 0.9
    seed: int = 0
    # backbone
    backbone_mode: str | None = None  # derived: features -> precomputed, images -> tiny-cnn
    input_h: int = 224
    input_w: int = 224
    stage_widths: tuple[int, ...] | None = None
    norm_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    norm_std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    # data sources and outputs
    features: str | None = None
    manifest: str | None = None
    dataset_root: str | None = None
    out_dir: str | None = None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, lr_init=self.lr_init, lr_final=self.lr_final,
            decay_power=self.decay_power, epochs=self.epochs,
            weight_decay=self.weight_decay, momentum=self.momentum, seed=self.seed,
        )

    def validate(self) -> None:
        sources = [s for s in (self.features, self.dataset_root) if s is not None]
        if len(sources) != 1:
            raise ConfigError(
                "exactly one data source must be set: either features= or dataset_root="
            )
        if self.features is not None and self.manifest is None:
            raise ConfigError("features= requires a matching manifest=")
        if self.backbone_mode is not None and self.backbone_mode not in ("precomputed", "tiny-cnn"):
            raise ConfigError(
                f"backbone_mode must be precomputed or tiny-cnn, got {self.backbone_mode!r}"
            )
        if self.features is not None and self.backbone_mode == "tiny-cnn":
            raise ConfigError("precomputed features cannot be combined with a tiny-cnn backbone")
        if self.dataset_root is not None and self.backbone_mode == "precomputed":
            raise ConfigError("an image dataset_root needs backbone_mode=tiny-cnn")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        self.train_config().validate()


_PARSERS = {
    "channels": _parse_int,
    "feature_h": _parse_int,
    "feature_w": _parse_int,
    "classes": _parse_int,
    "epa_reduction": _parse_int,
    "csw_reduction": _parse_int,
    "head_hidden1": _parse_int,
    "head_hidden2": _parse_int,
    "dropout": _parse_float,
    "batch_size": _parse_int,
    "lr_init": _parse_float,
    "lr_final": _parse_float,
    "decay_power": _parse_float,
    "epochs": _parse_int,
    "weight_decay": _parse_float,
    "momentum": _parse_float,
    "seed": _parse_int,
    "backbone_mode": _parse_str,
    "input_h": _parse_int,
    "input_w": _parse_int,
    "stage_widths": _parse_ints,
    "norm_mean": _parse_floats3,
    "norm_std": _parse_floats3,
    "features": _parse_str,
    "manifest": _parse_str,
    "dataset_root": _parse_str,
    "out_dir": _parse_str,
}

_PATH_KEYS = ("features", "manifest", "dataset_root", "out_dir")

assert set(_PARSERS) == {f.name for f in fields(RunConfig)}


def parse_run_config(path) -> RunConfig:
    """Parse and validate a key=value config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cfg = RunConfig()
    seen: set[str] = set()
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _PARSERS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            if key in seen:
                raise ConfigError(f"{path}:{lineno}: duplicate config key {key!r}")
            seen.add(key)
            try:
                parsed = _PARSERS[key](value)
            except ValueError as e:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from e
            setattr(cfg, key, parsed)

    base = path.parent
    for key in _PATH_KEYS:
        value = getattr(cfg, key)
        if value is not None:
            setattr(cfg, key, str((base / value).resolve()))
    cfg.validate()
    return cfg
