"""Experiment configuration: one nested dataclass tree, loadable from TOML.

Each pipeline stage draws its own seed from the master seed via
`derive_seed`, so stages are decoupled: changing, say, the number of
trigger-optimization epochs never shifts the randomness seen by training.
"""

from __future__ import annotations

import hashlib

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import CorpusSpec
from .defenses import AblConfig, DecreeConfig, FinetuneConfig
from .evaluation import ProbeConfig
from .model import ModelConfig, TrainConfig
from .triggers import TriggerOptConfig


def derive_seed(master_seed: int, stage: str) -> int:
    """Stable 32-bit stage seed from the master seed."""
    digest = hashlib.sha256(f"{master_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


@dataclass(frozen=True)
class SplitConfig:
    pretrain: float = 0.30
    attacker_pool: float = 0.50
    defender_clean: float = 0.10
    eval_clean: float = 0.10

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.pretrain, self.attacker_pool, self.defender_clean, self.eval_clean)


@dataclass(frozen=True)
class AttackConfig:
    target_label: int = 0
    poison_rate: float = 0.003  # fraction of the attacker pool
    trigger: TriggerOptConfig = field(default_factory=TriggerOptConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=10, batch_size=128, lr=1e-4))
    blend_alpha: float = 0.2  # for the blended baseline trigger

    def __post_init__(self):
        if not (0.0 < self.poison_rate < 1.0):
            raise ValueError("poison_rate must be in (0, 1)")


@dataclass(frozen=True)
class DefenseSuiteConfig:
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    cleanclip: FinetuneConfig = field(default_factory=lambda: FinetuneConfig(ssl_weight=1.0))
    decree: DecreeConfig = field(default_factory=DecreeConfig)
    abl: AblConfig = field(default_factory=AblConfig)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a full pipeline run needs; (config, seed) -> results."""

    run_id: str = "run"
    master_seed: int = 0
    out_dir: str = "runs"
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=40, batch_size=128, lr=3e-4))
    attack: AttackConfig = field(default_factory=AttackConfig)
    defenses: DefenseSuiteConfig = field(default_factory=DefenseSuiteConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.master_seed, stage)

    def with_seed(self, master_seed: int) -> "ExperimentConfig":
        return replace(self, master_seed=master_seed,
                       corpus=replace(self.corpus, seed=derive_seed(master_seed, "corpus")))

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: dict):
    """Recursively construct a dataclass from a plain dict, rejecting unknown keys."""
    valid = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(valid)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        target = _FIELD_TYPES.get((cls.__name__, name))
        if target is not None and isinstance(value, dict):
            kwargs[name] = _build(target, value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_FIELD_TYPES = {
    ("ExperimentConfig", "corpus"): CorpusSpec,
    ("ExperimentConfig", "split"): SplitConfig,
    ("ExperimentConfig", "model"): ModelConfig,
    ("ExperimentConfig", "pretrain"): TrainConfig,
    ("ExperimentConfig", "attack"): AttackConfig,
    ("ExperimentConfig", "defenses"): DefenseSuiteConfig,
    ("ExperimentConfig", "probe"): ProbeConfig,
    ("AttackConfig", "trigger"): TriggerOptConfig,
    ("AttackConfig", "train"): TrainConfig,
    ("DefenseSuiteConfig", "finetune"): FinetuneConfig,
    ("DefenseSuiteConfig", "cleanclip"): FinetuneConfig,
    ("DefenseSuiteConfig", "decree"): DecreeConfig,
    ("DefenseSuiteConfig", "abl"): AblConfig,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


def load_config(path: str | Path) -> ExperimentConfig:
    with Path(path).open("rb") as fh:
        return config_from_dict(tomllib.load(fh))


def desk_default_config(run_id: str = "run", master_seed: int = 0,
                        out_dir: str = "runs") -> ExperimentConfig:
    """Defaults sized so the full pipeline finishes in minutes on one CPU core."""
    cfg = ExperimentConfig(run_id=run_id, master_seed=master_seed, out_dir=out_dir)
    return cfg.with_seed(master_seed)
