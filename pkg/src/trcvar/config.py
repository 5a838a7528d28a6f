"""Flat key=value run configuration with file and CLI override parsing."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


@dataclass
class TrainConfig:
    env: str = "pointnav"
    epochs: int = 300
    collect_steps: int = 1000
    batch_size: int = 5000
    replay_length: int = 50000
    delta: float = 0.001
    alpha: float = 0.125
    cost_limit: float = 0.025
    gamma: float = 0.99
    trace_decay: float = 0.97
    lr: float = 2e-4
    hidden: int = 64
    seed: int = 0
    out_dir: str = "runs/default"
    critic_iters: int = 40
    damping: float = 0.01
    cg_iters: int = 10
    line_search_max: int = 10
    checkpoint_every: int = 10
    max_episode_steps: int = 0  # 0 keeps the environment default
    assume_onpolicy: bool = False
    unconstrained: bool = False
    eval_episodes: int = 10

    def validate(self):
        if not (0 < self.collect_steps <= self.batch_size <= self.replay_length):
            raise ValueError("need 0 < collect_steps <= batch_size <= replay_length")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.epochs < 0 or self.delta <= 0 or self.lr <= 0 or self.hidden <= 0:
            raise ValueError("epochs must be >= 0; delta, lr, hidden must be positive")
        return self


def _coerce(field: dataclasses.Field, raw: str):
    if field.type in ("bool", bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"bad boolean for {field.name}: {raw!r}")
    if field.type in ("int", int):
        return int(float(raw))  # accept 5e3 style
    if field.type in ("float", float):
        return float(raw)
    return raw


def _fields() -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(TrainConfig)}


def parse_config_file(path: str | Path) -> dict:
    """Read `key = value` lines; '#' starts a comment; unknown keys reject."""
    fields = _fields()
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(fields[key], raw)
    return out


def build_config(file_path: str | None = None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then config file, then explicit overrides."""
    values: dict = {}
    if file_path:
        values.update(parse_config_file(file_path))
    fields = _fields()
    for key, val in (overrides or {}).items():
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _coerce(fields[key], val) if isinstance(val, str) else val
    return TrainConfig(**values).validate()


def config_snapshot(cfg: TrainConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(TrainConfig)]
    return "\n".join(lines) + "\n"
