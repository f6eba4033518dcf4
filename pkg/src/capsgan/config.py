"""Run configuration: one flat dataclass, readable from and writable to a
plain `key = value` text file, with every field overridable by CLI flags."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass


@dataclass
class TrainConfig:
    # data
    dataset: str = "mnist"
    data_dir: str = ""
    fraction: float = 1.0
    # schedule
    epochs: int = 1
    batch_size: int = 64
    seed: int = 0
    # objectives
    lambda_gp: float = 10.0
    n_critic: int = 5
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_down: float = 0.5
    # architecture
    critic: str = "capsule"
    routing_iters: int = 3
    latent_dim: int = 64
    image_size: int = 28
    image_channels: int = 1
    classes: int = 10
    front_channels: int = 256
    primary_channels: int = 256
    capsule_dim: int = 8
    secondary_dim: int = 16
    generator_base: int = 128
    cnn_hidden: int = 16
    front_kernel: int = 9
    primary_kernel: int = 9
    # optimizer
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    adam_eps: float = 1e-8
    # run plumbing
    eval_every: int = 100
    out_dir: str = "runs"
    f64: bool = False

    def validate(self):
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError(f"fraction must be in (0, 1], got {self.fraction}")
        for field in ("epochs", "batch_size", "n_critic", "routing_iters",
                      "latent_dim", "eval_every", "classes"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1")
        if self.lambda_gp < 0:
            raise ValueError("lambda_gp must be >= 0")
        if self.critic not in ("capsule", "cnn"):
            raise ValueError(f"critic must be 'capsule' or 'cnn', got {self.critic!r}")
        if self.dataset not in ("mnist", "fashion", "rotated-mnist", "celeba-dir"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        return self

    def resolved_data_dir(self):
        return self.data_dir or os.environ.get("CAPSGAN_DATA_DIR", "")


_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(name, raw):
    kind = _FIELDS[name]
    if kind == "bool" or kind is bool:
        if isinstance(raw, bool):
            return raw
        return str(raw).strip().lower() in ("1", "true", "yes", "on")
    if kind == "int" or kind is int:
        return int(str(raw).strip())
    if kind == "float" or kind is float:
        return float(str(raw).strip())
    return str(raw).strip()


def parse_config_text(text):
    """Flat `key = value` lines; blank lines and #-comments ignored."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, _, raw = stripped.partition("=")
        key = key.strip().replace("-", "_")
        if key not in _FIELDS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides=None, base=None):
    """Build a TrainConfig from an optional file plus explicit overrides
    (CLI flags win over the file, which wins over `base`, which wins over
    the dataclass defaults)."""
    values = dict(base or {})
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return TrainConfig(**values).validate()


def config_to_text(cfg):
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)
