"""Sectioned ``key = value`` configuration files and the resolved run config."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .arch import ArchConfig, ConfigError
from .textconfig import canonical_text, parse_text
from .training import TrainConfig

RESOLVED_NAME = "resolved.cfg"


def _coerce(cls, raw: dict[str, str], section: str) -> dict:
    types = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, text in raw.items():
        if key not in types:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        default = types[key].default
        if default is dataclasses.MISSING and types[key].default_factory is not dataclasses.MISSING:
            default = types[key].default_factory()
        text = text.strip()
        try:
            if text.lower() == "none":
                out[key] = None
            elif key == "channels":
                out[key] = tuple(int(v) for v in text.split(",") if v.strip())
            elif isinstance(default, bool):
                out[key] = text.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int) or key in ("reference_param_target", "size"):
                out[key] = int(text)
            elif isinstance(default, float):
                out[key] = float(text)
            else:
                out[key] = text
        except ValueError:
            raise ConfigError(f"[{section}] {key}: cannot parse {text!r}") from None
    return out


def arch_from_section(raw: dict[str, str]) -> ArchConfig:
    return ArchConfig(**_coerce(ArchConfig, raw, "arch"))


@dataclass
class DataConfig:
    size: Optional[int] = None  # resolves to the architecture input size
    n_train: int = 200
    n_val: int = 35
    n_test: int = 50
    data_dir: str = "data"
    noise_sigma: float = 0.03


@dataclass
class RunConfig:
    model: str = "mrrn"
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out: str = "out"
    seed: int = 0
    threads: int = 1

    def sections(self) -> dict[str, dict]:
        return {
            "run": {"model": self.model, "out": self.out, "seed": self.seed, "threads": self.threads},
            "arch": self.arch.to_dict(),
            "train": {k: v for k, v in dataclasses.asdict(self.train).items()},
            "data": dataclasses.asdict(self.data),
        }

    def to_text(self) -> str:
        return canonical_text(self.sections())

    def validate(self) -> "RunConfig":
        problems = self.arch.violations() + self.train.violations()
        if self.model not in ("mrrn", "unet"):
            problems.append(f"model must be 'mrrn' or 'unet' (got {self.model!r})")
        if self.data.size != self.arch.input_size:
            problems.append(f"data size {self.data.size} != arch input_size {self.arch.input_size}")
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))
        return self

    def write(self, directory) -> Path:
        path = Path(directory) / RESOLVED_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


def default_seed() -> int:
    env = os.environ.get("MRRN_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"MRRN_SEED must be an integer, got {env!r}") from None


def load_run_config(path: Optional[str] = None, overrides: Optional[dict[str, dict[str, str]]] = None) -> RunConfig:
    """Merge defaults, an optional config file, then ``overrides`` (section -> key -> text)."""
    raw: dict[str, dict[str, str]] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        raw = parse_text(text)
    for sec, kv in (overrides or {}).items():
        raw.setdefault(sec, {}).update({k: str(v) for k, v in kv.items()})
    unknown = set(raw) - {"run", "arch", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    run = _coerce(RunConfig, {k: v for k, v in raw.get("run", {}).items()}, "run")
    cfg = RunConfig(seed=default_seed())
    for k, v in run.items():
        setattr(cfg, k, v)
    cfg.arch = ArchConfig(**_coerce(ArchConfig, raw.get("arch", {}), "arch"))
    train_kw = _coerce(TrainConfig, raw.get("train", {}), "train")
    train_kw.setdefault("seed", cfg.seed)
    cfg.train = dataclasses.replace(TrainConfig(), **train_kw)
    cfg.data = dataclasses.replace(DataConfig(), **_coerce(DataConfig, raw.get("data", {}), "data"))
    if cfg.data.size is None:
        cfg.data.size = cfg.arch.input_size
    return cfg
