"""Run configuration: one INI-style file drives every pipeline stage.

Sections and keys are fixed; unknown ones are rejected. Every artifact
records the config hash so reruns and comparisons can verify lineage.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields

from .errors import ConfigError


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class WorldSection:
    k: int = 12
    train_per_task: int = 1200
    bench_per_task: int = 60


@dataclass
class NetSection:
    hidden: tuple[int, ...] = (256, 256)


@dataclass
class ScheduleSection:
    name: str = "rectified"
    weight: str = "uniform"  # "uniform" or "time" (w = t)
    train_t_eps: float = 0.03


@dataclass
class SdeSection:
    noise_scale: float = 0.7
    steps: int = 30
    t_eps: float = 1e-3


@dataclass
class SamplerSection:
    ode_steps: int = 50


@dataclass
class PretrainSection:
    steps: int = 2500
    lr: float = 2e-3
    lr_min: float = 2e-4
    batch: int = 96


@dataclass
class ExpertSection:
    rank: int = 8
    steps: int = 5000
    lr: float = 2e-3
    lr_min: float = 1e-4
    batch: int = 96
    aux_ratio: float = 0.1


@dataclass
class DistillSection:
    rank: int = 4
    steps: int = 5000
    lr: float = 2e-3
    lr_min: float = 1e-4
    batch: int = 96
    aux_ratio: float = 0.1
    lambda_e: float = 1.0


@dataclass
class RewardSection:
    hidden: tuple[int, ...] = (64, 64)
    steps: int = 1500
    lr: float = 1e-3
    batch: int = 64
    neg_ratio: float = 1.0 / 3.0
    holdout: float = 0.2
    eval_every: int = 100
    prefs_per_task: int = 150


@dataclass
class RlSection:
    algo: str = "nft"
    rank: int = 2
    beta: float = 0.25
    group_size: int = 8
    steps: int = 500
    refresh_interval: int = 50
    conditions_per_step: int = 2
    lr: float = 1e-3
    ode_steps: int = 25


@dataclass
class BenchSection:
    n_per_cond: int = 2
    ode_steps: int = 25


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    world: WorldSection = field(default_factory=WorldSection)
    net: NetSection = field(default_factory=NetSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sde: SdeSection = field(default_factory=SdeSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    expert: ExpertSection = field(default_factory=ExpertSection)
    distill: DistillSection = field(default_factory=DistillSection)
    reward: RewardSection = field(default_factory=RewardSection)
    rl: RlSection = field(default_factory=RlSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def validate(self) -> None:
        w, s = self.world, self.sde
        if w.k < 8:
            raise ConfigError("world.k must be >= 8")
        if w.train_per_task < 1 or w.bench_per_task < 1:
            raise ConfigError("per-task sample counts must be >= 1")
        if self.schedule.name not in ("rectified", "trig"):
            raise ConfigError(f"unknown schedule {self.schedule.name!r}")
        if self.schedule.weight not in ("uniform", "time"):
            raise ConfigError(f"unknown loss weight {self.schedule.weight!r}")
        if not 0.0 < self.schedule.train_t_eps < 0.5:
            raise ConfigError("schedule.train_t_eps must lie in (0, 0.5)")
        if s.noise_scale < 0:
            raise ConfigError("sde.noise_scale must be >= 0")
        if s.steps < 1 or not 0.0 < s.t_eps < 0.5:
            raise ConfigError("bad sde section")
        for name, steps in (("sampler", self.sampler.ode_steps),
                            ("rl", self.rl.ode_steps),
                            ("bench", self.bench.ode_steps)):
            if steps < 1:
                raise ConfigError(f"{name} ode_steps must be >= 1")
        for name, sec in (("expert", self.expert), ("distill", self.distill),
                          ("rl", self.rl)):
            if sec.rank < 1:
                raise ConfigError(f"{name}.rank must be >= 1")
        if not 0.0 < self.rl.beta <= 1.0:
            raise ConfigError("rl.beta must lie in (0, 1]")
        if self.rl.group_size < 2:
            raise ConfigError("rl.group_size must be >= 2")
        if self.rl.algo not in ("nft", "flowgrpo"):
            raise ConfigError(f"unknown rl.algo {self.rl.algo!r}")
        if not 0.0 < self.reward.neg_ratio <= 1.0:
            raise ConfigError("reward.neg_ratio must lie in (0, 1]")
        if not 0.0 <= self.reward.holdout < 1.0:
            raise ConfigError("reward.holdout must lie in [0, 1)")
        if not 0.0 <= self.expert.aux_ratio < 1.0:
            raise ConfigError("expert.aux_ratio must lie in [0, 1)")
        if not 0.0 <= self.distill.aux_ratio < 1.0:
            raise ConfigError("distill.aux_ratio must lie in [0, 1)")
        if self.distill.lambda_e < 0:
            raise ConfigError("distill.lambda_e must be >= 0")


def _coerce(name: str, raw: str, example):
    raw = raw.strip()
    try:
        if isinstance(example, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(example, int):
            return int(raw)
        if isinstance(example, float):
            return float(raw)
        if isinstance(example, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {name} = {raw!r}") from None


def _apply(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    sec_names = {f.name for f in fields(cfg)}
    if section not in sec_names:
        raise ConfigError(f"unknown config section [{section}]")
    sec = getattr(cfg, section)
    keys = {f.name for f in fields(sec)}
    if key not in keys:
        raise ConfigError(f"unknown key {section}.{key}")
    setattr(sec, key, _coerce(f"{section}.{key}", raw, getattr(sec, key)))


def load_config(path=None, overrides: list[str] | None = None,
                seed: int | None = None) -> RunConfig:
    """Parse the INI file (all keys optional), apply key=value overrides,
    validate, and return the config."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw)
    for item in overrides or []:
        target, _, raw = item.partition("=")
        if not _ or "." not in target:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        section, _, key = target.strip().partition(".")
        _apply(cfg, section, key.strip(), raw)
    if seed is not None:
        cfg.run.seed = seed
    cfg.validate()
    return cfg


def config_lines(cfg: RunConfig) -> list[str]:
    lines = []
    for sec_field in fields(cfg):
        sec = getattr(cfg, sec_field.name)
        for f in fields(sec):
            val = getattr(sec, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{sec_field.name}.{f.name} = {val}")
    return sorted(lines)


def config_hash(cfg: RunConfig) -> str:
    digest = hashlib.sha256("\n".join(config_lines(cfg)).encode("utf-8"))
    return digest.hexdigest()[:16]


def write_config(cfg: RunConfig, path) -> None:
    by_section: dict[str, list[str]] = {}
    for line in config_lines(cfg):
        target, _, val = line.partition(" = ")
        section, _, key = target.partition(".")
        by_section.setdefault(section, []).append(f"{key} = {val}")
    with open(path, "w") as f:
        for section in by_section:
            f.write(f"[{section}]\n")
            for entry in by_section[section]:
                f.write(entry + "\n")
            f.write("\n")
