"""Run configuration: system parameters, learner hyperparameters and seeding."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import yaml

from .simcore import MBIT, bits_per_slot, cycles_per_slot

POLICY_KINDS = ("drl", "no_offload", "random", "myopic")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` maps field name to a message."""

    def __init__(self, errors: Dict[str, str]):
        self.errors = errors
        super().__init__("; ".join(f"{k}: {v}" for k, v in errors.items()))


def _default_sizes() -> List[float]:
    return [round(x / 10, 1) for x in range(20, 51)]


@dataclass
class RunConfig:
    # system (defaults are the evaluation settings of the original study)
    M: int = 50
    N: int = 5
    T: int = 100
    episodes: int = 500
    delta_s: float = 0.1
    f_device_ghz: float = 2.5
    f_edge_ghz: float = 41.8
    f_tran_mbps: float = 14.0
    sizes_mbits: List[float] = field(default_factory=_default_sizes)
    density_gcycles_per_mbit: float = 0.297
    deadline_slots: int = 10
    arrival_probability: float = 0.3
    drop_penalty: Optional[float] = None  # None -> 2 * deadline_slots
    t_step: int = 10
    # learner
    lstm_hidden: int = 32
    fc1: int = 128
    fc2: int = 64
    head: int = 32
    learning_rate: float = 1e-3
    max_grad_norm: Optional[float] = None  # None -> no clipping
    optimizer: str = "sgd"
    batch_size: int = 32
    memory_capacity: int = 10_000
    replace_threshold: int = 100
    gamma: float = 0.9
    epsilon_start: float = 1.0
    epsilon_end: float = 0.01
    eval_episodes: int = 20
    eval_epsilon: float = 0.01
    # experiment
    policy: str = "drl"
    device_policies: Optional[List[str]] = None
    seed: int = 0

    # derived per-slot quantities -------------------------------------------------
    @property
    def penalty(self) -> float:
        return float(2 * self.deadline_slots if self.drop_penalty is None else self.drop_penalty)

    @property
    def device_cycles_per_slot(self) -> float:
        return cycles_per_slot(self.f_device_ghz, self.delta_s)

    @property
    def edge_cycles_per_slot(self) -> float:
        return cycles_per_slot(self.f_edge_ghz, self.delta_s)

    @property
    def tran_bits_per_slot(self) -> float:
        return bits_per_slot(self.f_tran_mbps, self.delta_s)

    @property
    def density_cycles_per_bit(self) -> float:
        # Gcycles per Mbit == 1e3 cycles per bit
        return self.density_gcycles_per_mbit * 1e9 / MBIT

    @property
    def sizes_bits(self) -> np.ndarray:
        return np.asarray(self.sizes_mbits, dtype=float) * MBIT

    def policy_for(self, m: int) -> str:
        if self.device_policies is not None:
            return self.device_policies[m]
        return self.policy

    # validation / io -------------------------------------------------------------
    def validate(self) -> "RunConfig":
        errors: Dict[str, str] = {}
        for name in ("M", "T", "episodes", "deadline_slots", "t_step", "lstm_hidden", "fc1", "fc2", "head",
                     "batch_size", "memory_capacity", "replace_threshold"):
            if int(getattr(self, name)) < 1:
                errors[name] = "must be a positive integer"
        if self.N < 0:
            errors["N"] = "must be non-negative"
        if self.eval_episodes < 0:
            errors["eval_episodes"] = "must be non-negative"
        for name in ("delta_s", "f_device_ghz", "f_edge_ghz", "f_tran_mbps", "density_gcycles_per_mbit",
                     "learning_rate"):
            if not float(getattr(self, name)) > 0:
                errors[name] = "must be positive"
        if not 0.0 <= self.arrival_probability <= 1.0:
            errors["arrival_probability"] = "must lie in [0, 1]"
        if not self.sizes_mbits or any(s <= 0 for s in self.sizes_mbits):
            errors["sizes_mbits"] = "must be a non-empty list of positive sizes"
        if self.drop_penalty is not None and not self.drop_penalty > 0:
            errors["drop_penalty"] = "must be positive"
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            errors["max_grad_norm"] = "must be positive"
        if not 0.0 < self.gamma <= 1.0:
            errors["gamma"] = "must lie in (0, 1]"
        for name in ("epsilon_start", "epsilon_end", "eval_epsilon"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errors[name] = "must lie in [0, 1]"
        if self.optimizer not in ("sgd", "adam"):
            errors["optimizer"] = "must be 'sgd' or 'adam'"
        if self.policy not in POLICY_KINDS:
            errors["policy"] = f"must be one of {', '.join(POLICY_KINDS)}"
        if self.device_policies is not None:
            if len(self.device_policies) != self.M:
                errors["device_policies"] = f"needs exactly M={self.M} entries"
            elif any(p not in POLICY_KINDS for p in self.device_policies):
                errors["device_policies"] = f"entries must be one of {', '.join(POLICY_KINDS)}"
        if errors:
            raise ConfigError(errors)
        return self

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


FIELD_TYPES = {f.name: f for f in dataclasses.fields(RunConfig)}


def coerce(name: str, value: Any) -> Any:
    """Convert a raw (string or YAML) value into the type of config field ``name``."""
    if name not in FIELD_TYPES:
        raise ConfigError({name: "unknown configuration key"})
    default = FIELD_TYPES[name].default
    if default is dataclasses.MISSING:
        default = FIELD_TYPES[name].default_factory()
    try:
        if isinstance(value, str):
            value = yaml.safe_load(value)
        if value is None:
            return None
        if name == "sizes_mbits":
            return [float(v) for v in (value if isinstance(value, list) else [value])]
        if name == "device_policies":
            return [str(v) for v in value]
        if name in ("drop_penalty", "max_grad_norm"):
            return float(value)
        if isinstance(default, bool):
            return bool(value)
        if isinstance(default, int):
            if float(value) != int(value):
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError({name: f"cannot interpret {value!r}"}) from None


def load_config(path: Union[str, Path, None] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read a flat ``key: value`` YAML document, then apply ``overrides`` on top."""
    values: Dict[str, Any] = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError({"<file>": f"{path} must contain a flat key/value mapping"})
        values.update({k: coerce(k, v) for k, v in raw.items()})
    for k, v in (overrides or {}).items():
        values[k] = coerce(k, v)
    return RunConfig(**values).validate()


def dump_config(cfg: RunConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


# seeding ---------------------------------------------------------------------------
ARRIVALS, POLICY, TRAINING, INIT = range(4)
EVAL_EPISODE_OFFSET = 1_000_000


def substream(master_seed: int, purpose: int, episode: int = 0, device: int = 0) -> np.random.Generator:
    """Independent generator for one (purpose, episode, device) cell of the master seed."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(purpose, episode, device))
    return np.random.default_rng(ss)
