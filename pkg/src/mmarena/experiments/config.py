"""Experiment configuration (JSON, schema version 1)."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional

from ..dqn_mm import DQLConfig
from ..market_core import MarketParams

SCHEMA_VERSION = 1
KINDS = ("single", "multi", "transfer")
DEFAULT_SCHEDULE = [0, 10, 20, 30, 40, 50, 100, 150, 200, 250]


class ConfigError(ValueError):
    pass


def roster_for(kind: str) -> List[tuple]:
    """(mm_id, role) pairs in registration order."""
    if kind == "single":
        return [("dql", "dql"), ("random", "random"), ("persistent", "persistent")]
    if kind == "multi":
        return [("dql1", "dql"), ("dql2", "dql"), ("dql3", "dql"), ("random", "random"), ("persistent", "persistent")]
    if kind == "transfer":
        return [("dql_single", "frozen"), ("dql_multi", "frozen"), ("dql_learning", "dql"),
                ("random", "random"), ("persistent", "persistent")]
    raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")


@dataclass
class ExperimentConfig:
    kind: str = "single"
    simulations: int = 100
    rounds: int = 5
    steps: int = 2000
    seed: int = 0
    market: MarketParams = field(default_factory=MarketParams)
    agent: DQLConfig = field(default_factory=DQLConfig)
    n_investors: int = 50
    investor_size: int = 100
    checkpoint_schedule: List[int] = field(default_factory=lambda: list(DEFAULT_SCHEDULE))
    # transfer only: [single-agent winner, multi-agent winner]
    transfer_checkpoints: List[str] = field(default_factory=list)
    output_dir: Optional[str] = None
    record_actions: bool = True
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {self.schema_version}")
        roster_for(self.kind)
        if self.simulations < 1 or self.rounds < 1 or self.steps < 1:
            raise ConfigError("simulations, rounds and steps must all be >= 1")
        if self.n_investors < 1 or self.investor_size < 1:
            raise ConfigError("need at least one investor with a positive order size")
        if any(k < 0 for k in self.checkpoint_schedule):
            raise ConfigError("checkpoint schedule entries must be >= 0")
        if self.kind == "transfer" and len(self.transfer_checkpoints) != 2:
            raise ConfigError("transfer experiments need exactly two checkpoint paths")

    @property
    def roster(self) -> List[tuple]:
        return roster_for(self.kind)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("output_dir")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "market" in data:
                data["market"] = MarketParams.from_dict(data["market"])
            if "agent" in data:
                data["agent"] = DQLConfig.from_dict(data["agent"])
            cfg = cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return ExperimentConfig.from_dict(data)
