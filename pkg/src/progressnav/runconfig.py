"""Flat key=value run configuration with typed defaults and a stable hash."""

from __future__ import annotations

from .serial import obj_hash


class ConfigError(Exception):
    pass


# every tunable in one registry; the default's type fixes the parse
DEFAULTS: dict[str, object] = {
    # world generation
    "world.extent": 8.0,
    "world.n_rooms": 2,
    "world.n_landmarks": 6,
    "world.success_radius": 1.0,
    # data
    "data.n_train_worlds": 30,
    "data.episodes_per_world": 20,
    "data.n_eval_episodes": 20,
    "data.eval_world_seed_offset": 1000,
    "data.waypoints_min": 2,
    "data.waypoints_max": 3,
    "data.k_actions": 3,
    "data.history_len": 8,
    # model
    "model.d": 32,
    "model.n_heads": 4,
    "model.n_blocks": 2,
    "model.d_ff": 64,
    "model.max_pos": 96,
    # stage 1
    "sapp.tau": 1.0,
    "sapp.mode": "sum",
    "sapp.pair_cap": 10,
    "sapp.lr": 1e-3,
    "sapp.epochs": 1,
    "sapp.batch_size": 8,
    "sapp.use_prefix": True,
    "sapp.use_mono": True,
    "sapp.ema_decay": 0.0,
    # stage 2
    "stage2.lr": 1e-3,
    "stage2.epochs": 3,
    "stage2.batch_size": 16,
    "stage2.use_dagger": False,
    "stage2.dagger_epsilon": 0.1,
    # stage 3
    "ppcf.n_rollouts": 4,
    "ppcf.clip_eps": 0.28,
    "ppcf.beta": 0.1,
    "ppcf.temperature": 1.0,
    "ppcf.eps_std": 1e-6,
    "ppcf.steps": 30,
    "ppcf.states_per_step": 2,
    "ppcf.lr": 1e-4,
    "ppcf.coarse_match": False,
    "ppcf.use_len_reward": True,
    # evaluation
    "eval.execute_steps": 1,
    "eval.max_steps": 120,
    # progress module variant: prefix | numeric | reconstruction
    "variant.progress": "prefix",
}


def _parse_value(key: str, raw: str, default) -> object:
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from e
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from e
    return raw


class RunConfig:
    def __init__(self, values: dict[str, object] | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            self.values[k] = v

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def set(self, key: str, raw: str) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse_value(key, raw, DEFAULTS[key])

    @property
    def hash(self) -> str:
        # sorted-key canonical form: reordering the file cannot change the hash
        return obj_hash(self.values)

    def to_text(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {ln}: expected key = value, got {stripped!r}")
        key, raw = stripped.split("=", 1)
        cfg.set(key.strip(), raw)
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    """Each entry is key=value, as passed on the command line."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must be key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        cfg.set(key.strip(), raw)
    return cfg
