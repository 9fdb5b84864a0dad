"""Run configuration: a flat ``key = value`` text file with a version key."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .diagnostics import StressConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    # task
    task: str = "copy"
    prompt_len: int = 4
    response_len: int = 4
    # model
    vocab_size: int = 9
    embed_dim: int = 16
    block_size: int = 4
    init_scale: float = 1.0
    arch: str = "full"
    # rollouts
    group_size: int = 8
    prompts_per_step: int = 1
    steps_per_block: int = 4
    temperature: float = 1.0
    advantage_mode: str = "standardized"
    # estimator
    estimator: str = "stabledrl"
    epsilon: float = 5.0
    clip_space: str = "log_symmetric"
    num_inner: int = 2
    mc_samples: int = 2
    mask_policy: str = "uniform"
    grad_mc_samples: int = 2
    grad_mask_policy: str = "blockwise"
    t_floor: float = 0.15
    coupling: str = "independent"
    # optimizer
    optimizer: str = "adamw"
    lr: float = 0.01
    lr_schedule: str = "constant"
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    total_steps: int = 50
    # stress protocol
    condition: str = "normal"
    stress_gamma: float = 0.7
    stress_beta: float = 6.0
    stress_t_min: int = 1
    stress_t_max: int = 0  # 0: whole response
    stress_policy: str = "random"
    # diagnostics
    a0: float = 0.5
    drift_m: int = 0
    spike_window: int = 50
    spike_delta: float = 0.3
    collapse_rejections: int = 50
    collapse_patience: int = 25  # frozen-policy steps before collapse; 0 disables
    # bookkeeping
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self):
        choices = {
            "task": ("copy", "parity", "sorted"),
            "arch": ("full", "block"),
            "advantage_mode": ("standardized", "raw_centered"),
            "estimator": ("pg", "grpo", "uc_grpo", "stabledrl"),
            "clip_space": ("linear", "log_symmetric", "log_upper"),
            "mask_policy": ("uniform", "blockwise"),
            "grad_mask_policy": ("uniform", "blockwise"),
            "coupling": ("independent", "shared_masks"),
            "optimizer": ("sgd", "adamw"),
            "lr_schedule": ("constant", "linear"),
            "condition": ("normal", "exploding"),
            "stress_policy": ("random", "block"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if self.num_inner < 1 or self.mc_samples < 1 or self.grad_mc_samples < 1:
            raise ConfigError("num_inner, mc_samples and grad_mc_samples must be >= 1")
        if self.collapse_patience < 0:
            raise ConfigError("collapse_patience must be >= 0")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.response_len % self.block_size:
            raise ConfigError("block_size must divide response_len")
        if self.arch == "block" and self.prompt_len % self.block_size:
            raise ConfigError("block arch needs block_size | prompt_len")
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must be >= 3")
        if self.clip_space == "linear" and self.epsilon >= 1:
            raise ConfigError("linear clipping needs epsilon < 1; use clip_space = log_symmetric")
        self.stress_config()

    @property
    def num_symbols(self) -> int:
        return self.vocab_size - 1

    @property
    def seq_len(self) -> int:
        return self.prompt_len + self.response_len

    def stress_config(self) -> StressConfig:
        try:
            return StressConfig(self.stress_gamma if self.condition == "exploding" else 0.0, self.stress_beta,
                                self.stress_t_min, self.stress_t_max or None, self.stress_policy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------ text format

    def dumps(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def dump(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _convert(key, value, types[key])
        if "version" not in values:
            raise ConfigError("config is missing the version key")
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())


def _convert(key, value, typ):
    try:
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from exc
    return value
