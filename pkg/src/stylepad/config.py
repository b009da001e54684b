"""Experiment configuration: a flat ``key = value`` text file with typed keys.

Lines starting with ``#`` are comments. Lists are comma separated. Unknown keys
and unparsable values raise ``ConfigError``. ``STYLEPAD_SEED`` in the
environment overrides ``seed`` (and ``seeds`` when only one seed is listed).
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

SEED_ENV = "STYLEPAD_SEED"
METHODS = ("di2s", "erm")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = ""
    targets: list[str] = field(default_factory=lambda: ["T0"])
    seeds: list[int] = field(default_factory=lambda: [0])
    fraction: float = 1.0
    out_dir: str = "runs/default"
    method: str = "di2s"

    style_dim: int = 64
    style_epochs: int = 40
    style_lr: float = 3e-4

    T: int = 100
    beta_1: float = 1e-3
    beta_T: float = 0.2
    diff_lr: float = 2e-4
    diff_batch: int = 64
    diff_steps: int = 1500
    p_drop: float = 0.5
    omega: float = 1.2
    unet_dim: int = 16
    unet_mults: list[int] = field(default_factory=lambda: [1, 2])
    unet_time_channels: int = 256
    unet_attention: bool = False
    clip: bool = True
    fuse_normalize: bool = False

    kappa: float = 1.0
    o: int = 5
    fuse_dist: list[float] = field(default_factory=list)

    tsc_epochs: int = 30
    tsc_lr: float = 1e-3
    tsc_blocks: int = 2
    tsc_batch: int = 64

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def validate(self, check_paths: bool = True) -> "ExperimentConfig":
        if check_paths and not Path(self.dataset).is_file():
            raise ConfigError(f"dataset manifest not found: {self.dataset!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.targets:
            raise ConfigError("targets must list at least one group")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be a non-empty list without repeats, got {self.seeds}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction must lie in (0, 1], got {self.fraction}")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ConfigError(f"p_drop must lie in [0, 1], got {self.p_drop}")
        if not 0.0 < self.beta_1 <= self.beta_T < 1.0:
            raise ConfigError(f"need 0 < beta_1 <= beta_T < 1, got {self.beta_1}, {self.beta_T}")
        if self.kappa < 0:
            raise ConfigError(f"kappa must be >= 0, got {self.kappa}")
        if self.o < 1:
            raise ConfigError(f"o must be >= 1, got {self.o}")
        if self.fuse_dist and len(self.fuse_dist) != self.o:
            raise ConfigError(f"fuse_dist has {len(self.fuse_dist)} entries for o={self.o}")
        if not self.unet_mults or min(self.unet_mults) < 1:
            raise ConfigError(f"unet_mults must be positive integers, got {self.unet_mults}")
        if self.tsc_blocks not in (2, 3):
            raise ConfigError(f"tsc_blocks must be 2 or 3, got {self.tsc_blocks}")
        for name in ("style_dim", "style_epochs", "T", "diff_batch", "diff_steps", "unet_dim", "tsc_epochs", "tsc_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Hash of every field except the output location."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def for_run(self, target: str, seed: int) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(targets=[target], seeds=[seed])
        return ExperimentConfig(**d)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_value(key: str, raw: str):
    kind = ExperimentConfig.__annotations__[key]
    items = [s.strip() for s in raw.split(",") if s.strip()]
    if kind == "list[str]":
        return items
    if kind == "list[int]":
        return [int(s) for s in items]
    if kind == "list[float]":
        return [float(s) for s in items]
    if kind == "bool":
        return _parse_bool(raw)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw.strip()


def parse_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        try:
            out[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"line {n}: bad value for {key}: {exc}") from None
    return out


def apply_overrides(cfg: ExperimentConfig, overrides: dict, env: dict | None = None) -> ExperimentConfig:
    d = cfg.to_dict()
    d.update(overrides)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            d["seeds"] = [int(env[SEED_ENV])]
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return ExperimentConfig(**d)


def load_config(path: str | os.PathLike | None, overrides: dict | None = None, env: dict | None = None) -> ExperimentConfig:
    """Read a config file (relative ``dataset``/``out_dir`` resolve against its directory)."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values = parse_config_text(p.read_text())
        for key in ("dataset", "out_dir"):
            if key in values and not Path(values[key]).is_absolute():
                values[key] = str(p.parent / values[key])
    values.update(overrides or {})
    return apply_overrides(ExperimentConfig(), values, env)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
