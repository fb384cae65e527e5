"""Run configuration: one JSON file, strict keys, stable hash."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .agent import ModelConfig
from .bc import BCConfig
from .grpo import RLConfig

DEFAULT_TASKS = (
    "put the butter in the basket",
    "place the book on the plate",
    "open the microwave and put the alphabet soup in the microwave",
    "turn on the stove and place the white mug on the left plate",
    "place the cream cheese left of the plate and put the tomato sauce in the basket",
    "close the drawer and place the chocolate pudding behind the plate",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 20
    distractors: int = 2


@dataclass(frozen=True)
class Config:
    tasks: tuple[str, ...] = DEFAULT_TASKS
    seeds: tuple[int, ...] = (0, 1, 2)
    n_demos: int = 1
    out_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    bc: BCConfig = field(default_factory=BCConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        """First 12 hex digits of the SHA-256 of the canonical JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def for_seed(self, seed: int) -> tuple[BCConfig, RLConfig]:
        return replace(self.bc, seed=seed), replace(self.rl, seed=seed)


# Per-seed values come from ``seeds``; the nested seed fields are not settable.
_SEEDED = {"bc": "seed", "rl": "seed"}


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _coerce(name: str, value: Any, default: Any):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or default is None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{name}: expected a nonempty list, got {value!r}")
        return tuple(_coerce(f"{name}[{i}]", v, default[0]) for i, v in enumerate(value))
    raise ConfigError(f"{name}: unsupported value {value!r}")


def _build(cls, data: dict, prefix: str, skip: str | None = None):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    base = cls()
    known = {f.name: f for f in fields(cls) if f.name != skip}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        default = getattr(base, key)
        name = prefix + key
        if value is None and "None" in str(known[key].type):
            kwargs[key] = None
        elif dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, name + ".", _SEEDED.get(key))
        else:
            kwargs[key] = _coerce(name, value, default)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def from_dict(data: dict) -> Config:
    return _build(Config, data, "")


def load(path: str | Path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


def dump(cfg: Config, path: str | Path) -> None:
    data = cfg.to_dict()
    for section, key in _SEEDED.items():
        data[section].pop(key)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


ABLATIONS = ("no_plan_constraint", "no_sparsifier", "no_seg_reward", "no_prog_reward", "no_kl")


def with_ablations(cfg: Config, flags) -> Config:
    """Apply ablation switches (names from ``ABLATIONS``) to a config."""
    flags = set(flags)
    bad = flags - set(ABLATIONS)
    if bad:
        raise ConfigError(f"unknown ablation(s) {sorted(bad)}")
    rl, model = cfg.rl, cfg.model
    if "no_plan_constraint" in flags:
        rl = replace(rl, plan_constraint=False)
    if "no_seg_reward" in flags:
        rl = replace(rl, lam_seg=0.0)
    if "no_prog_reward" in flags:
        rl = replace(rl, lam_prog=0.0)
    if "no_kl" in flags:
        rl = replace(rl, beta=0.0)
    if "no_sparsifier" in flags:
        model = replace(model, sparsify=False)
    return replace(cfg, rl=rl, model=model)


def ablation_tag(flags) -> str:
    flags = sorted(set(flags), key=ABLATIONS.index)
    return "+".join(f.replace("_", "-") for f in flags) if flags else "full"
