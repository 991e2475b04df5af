"""Flat key-value run configuration (TOML subset)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .importance import VARIANTS
from .sparse_layer import CRITERIA

TASKS = ("planted", "lowrank_shift", "sequence")
MODELS = ("linear", "mlp", "transformer")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class RunConfig:
    # task
    task: str = "planted"
    task_seed: int = 0
    n: int = 64
    k: int = 64
    samples: int = 2000
    task_sparsity: float = 0.9
    noise_sigma: float = 0.1
    shift_rank: int = 2
    shift_scale: float = 0.3
    pretrain_noise: float = 0.01
    d: int = 16
    seq_len: int = 8
    n_classes: int = 4
    # model
    model: str = "linear"
    hidden_dims: str = ""
    n_blocks: int = 1
    # sparsification
    criterion: str = "pst"
    variant: str = "full"
    freeze_weight: bool = False
    target_p: float = 0.9
    warmup_frac: float = 0.1
    cooldown_frac: float = 0.3
    r1: int = 8
    r2: int = 8
    alpha1: float = 1.0
    alpha2: float = 1.0
    beta: float = 1.0
    legacy_alpha: float = 1.0
    # optimization
    total_steps: int = 500
    batch_size: int = 32
    lr: float = 0.01
    seed: int = 0
    weight_decay: float = 0.01
    score_weight_decay: float = 0.0
    score_lr_scale: float = 1.0
    grad_clip: float = 1.0
    # output
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(field, msg):
            raise ConfigError(f"{field}: {msg}")

        if self.task not in TASKS:
            bad("task", f"must be one of {TASKS}, got {self.task!r}")
        if self.model not in MODELS:
            bad("model", f"must be one of {MODELS}, got {self.model!r}")
        if self.task == "sequence" and self.model != "transformer":
            bad("model", "the sequence task needs model = 'transformer'")
        if self.task != "sequence" and self.model == "transformer":
            bad("model", "the transformer only runs the sequence task")
        if self.criterion not in CRITERIA:
            bad("criterion", f"must be one of {CRITERIA}, got {self.criterion!r}")
        if self.variant not in VARIANTS and self.variant != "legacy":
            bad("variant", f"must be one of {sorted(VARIANTS) + ['legacy']}, got {self.variant!r}")
        for name in ("target_p", "task_sparsity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                bad(name, f"must lie in [0, 1], got {getattr(self, name)}")
        if self.warmup_frac < 0 or self.cooldown_frac < 0 or \
                self.warmup_frac + self.cooldown_frac >= 1:
            bad("warmup_frac", "warmup_frac and cooldown_frac must be >= 0 with sum < 1")
        for name in ("n", "k", "samples", "d", "seq_len", "n_classes", "n_blocks",
                     "r1", "r2", "total_steps", "batch_size"):
            if getattr(self, name) < 1:
                bad(name, f"must be a positive integer, got {getattr(self, name)}")
        if self.lr <= 0:
            bad("lr", f"must be positive, got {self.lr}")
        try:
            self.hidden()
        except ValueError:
            bad("hidden_dims", f"must be a comma-separated list of positive ints, got "
                               f"{self.hidden_dims!r}")

    def hidden(self) -> list[int]:
        if not self.hidden_dims.strip():
            return []
        dims = [int(v) for v in self.hidden_dims.split(",")]
        if any(v < 1 for v in dims):
            raise ValueError(self.hidden_dims)
        return dims

    # -- (de)serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown key (allowed: {', '.join(known)})")
        kwargs = {}
        for key, value in data.items():
            want = type(known[key].default)
            kwargs[key] = _coerce(key, value, want)
        return cls(**kwargs)

    def replace(self, **changes) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **changes})

    def to_toml(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _coerce(key: str, value, want: type):
    if want is bool:
        if isinstance(value, bool):
            return value
    elif want is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif want is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif want is str:
        if isinstance(value, str):
            return value
    raise ConfigError(f"{key}: expected {want.__name__}, got {type(value).__name__} {value!r}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid TOML: {exc}") from exc
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{nested[0]}: tables are not allowed, use flat keys")
    return RunConfig.from_dict(data)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(config.to_toml())
