"""Run configuration: world spec, model sizes, and per-stage schedules.

Configs load from JSON; every stage validates before anything runs. The
model vocabulary is derived from the world's vocabulary when unset.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .encoder import HyperParams
from .errors import ConfigError
from .generator import GenSettings
from .synthworld import WorldSpec, build_vocab


@dataclass
class StageSchedule:
    lr: float = 3e-3
    warmup_steps: int = 100
    batch_size: int = 16
    epochs: int = 4
    weight_decay: float = 0.01

    def validate(self, name: str) -> "StageSchedule":
        if self.lr <= 0:
            raise ConfigError(f"{name}.lr must be > 0")
        if self.epochs < 1:
            raise ConfigError(f"{name}.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError(f"{name}.batch_size must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigError(f"{name}.warmup_steps must be >= 0")
        return self


@dataclass
class RetrieverSchedule(StageSchedule):
    temperature: float = 0.05

    def validate(self, name: str) -> "RetrieverSchedule":
        super().validate(name)
        if self.temperature <= 0:
            raise ConfigError(f"{name}.temperature must be > 0")
        return self


@dataclass
class RankerSchedule(StageSchedule):
    top_k: int = 10
    keep_cap: int = 2

    def validate(self, name: str) -> "RankerSchedule":
        super().validate(name)
        if self.top_k < 1 or self.keep_cap < 1:
            raise ConfigError(f"{name}.top_k and keep_cap must be >= 1")
        return self


@dataclass
class GeneratorSchedule(StageSchedule):
    alpha: float = 1.0
    negatives_per_prompt: int = 1
    askg_enabled: bool = True
    context_source: str = "ranked"   # ranked | topk | gold

    def settings(self) -> GenSettings:
        return GenSettings(alpha=self.alpha,
                           negatives_per_prompt=self.negatives_per_prompt,
                           askg_enabled=self.askg_enabled).validate()

    def validate(self, name: str) -> "GeneratorSchedule":
        super().validate(name)
        self.settings()
        if self.context_source not in ("ranked", "topk", "gold"):
            raise ConfigError(f"{name}.context_source invalid")
        return self


@dataclass
class Flags:
    skip_rank: bool = False               # inject gold evidence, skip ranking
    skip_fusion_pretrain: bool = False
    multiset_queries_baseline: bool = False


@dataclass
class Config:
    world: WorldSpec = field(default_factory=WorldSpec)
    hyper: HyperParams = field(default_factory=HyperParams)
    fusion: StageSchedule = field(default_factory=lambda: StageSchedule(
        lr=3e-3, warmup_steps=20, batch_size=16, epochs=6))
    retriever: RetrieverSchedule = field(default_factory=RetrieverSchedule)
    ranker: RankerSchedule = field(default_factory=lambda: RankerSchedule(
        lr=0.05, warmup_steps=20, batch_size=64, epochs=20))
    generator: GeneratorSchedule = field(default_factory=GeneratorSchedule)
    flags: Flags = field(default_factory=Flags)
    seed: int = 0

    def validate(self) -> "Config":
        self.world.validate()
        vocab_size = len(build_vocab(self.world))
        if self.hyper.vocab < vocab_size:
            self.hyper = replace(self.hyper, vocab=vocab_size)
        self.hyper.validate()
        if self.hyper.d_img != self.world.d_img \
                or self.hyper.patches != self.world.patches:
            raise ConfigError("hyper image dims must match the world spec")
        self.fusion.validate("fusion")
        self.retriever.validate("retriever")
        self.ranker.validate("ranker")
        self.generator.validate("generator")
        return self

    def to_dict(self) -> dict:
        return {
            "world": asdict(self.world),
            "hyper": asdict(self.hyper),
            "fusion": asdict(self.fusion),
            "retriever": asdict(self.retriever),
            "ranker": asdict(self.ranker),
            "generator": asdict(self.generator),
            "flags": asdict(self.flags),
            "seed": self.seed,
        }


def _build(cls, payload: dict, name: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    return cls(**payload)


def config_from_dict(payload: dict) -> Config:
    payload = dict(payload)
    cfg = Config(
        world=_build(WorldSpec, payload.pop("world", {}), "world"),
        hyper=_build(HyperParams, payload.pop("hyper", {}), "hyper"),
        fusion=_build(StageSchedule, payload.pop("fusion", {}), "fusion"),
        retriever=_build(RetrieverSchedule, payload.pop("retriever", {}),
                         "retriever"),
        ranker=_build(RankerSchedule, payload.pop("ranker", {}), "ranker"),
        generator=_build(GeneratorSchedule, payload.pop("generator", {}),
                         "generator"),
        flags=_build(Flags, payload.pop("flags", {}), "flags"),
        seed=int(payload.pop("seed", 0)),
    )
    if payload:
        raise ConfigError(f"unknown top-level keys: {sorted(payload)}")
    return cfg.validate()


def load_config(path) -> Config:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return config_from_dict(payload)


def config_hash(cfg: Config) -> str:
    canon = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
