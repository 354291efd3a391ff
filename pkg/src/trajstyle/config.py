"""Run configuration, built-in profiles and config hashing."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .adapt import BcConfig, DistillConfig, PolicyArch
from .cutsim import ExpertParams, Perturbation, SimConfig, TARGET_PERTURBATION
from .styletx import DEFAULT_RATIOS, TransferConfig
from .vae import VaeArch, VaeTrainConfig


@dataclass
class DataConfig:
    n_source: int = 680
    n_target: int = 148
    expert_fraction: float = 0.5
    window: int = 100
    vae_stride: int = 8
    target_stride: int = 1


@dataclass
class ContentConfig:
    episodes: int = 50
    stride: int = 1


@dataclass
class EvalConfig:
    strategies: tuple = ("expert", "baseline", "bc-identity", "style-transfer")
    geometries: tuple = ("flat", "offset", "curved")
    materials: tuple = ("foam", "cardboard", "plastic", "mica", "aluminium")
    episodes_per_material: int = 1
    seed: int = 1000
    dtw_reduce: str = "mean"


@dataclass
class SweepConfig:
    ratios: tuple = DEFAULT_RATIOS
    pairs: int = 16
    iterations: int = 1000


@dataclass
class RunConfig:
    seed: int = 0
    profile: str = "paper"
    sim: SimConfig = field(default_factory=SimConfig)
    target: Perturbation = field(default_factory=lambda: Perturbation(**asdict(TARGET_PERTURBATION)))
    data: DataConfig = field(default_factory=DataConfig)
    vae_arch: VaeArch = field(default_factory=VaeArch)
    vae: VaeTrainConfig = field(default_factory=VaeTrainConfig)
    policy_arch: PolicyArch = field(default_factory=PolicyArch)
    distill: DistillConfig = field(default_factory=DistillConfig)
    content: ContentConfig = field(default_factory=ContentConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    bc: BcConfig = field(default_factory=BcConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        if not self.eval.geometries:
            raise ValueError("evaluation geometry set must be nonempty")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


_TYPES = {c.__name__: c for c in (SimConfig, Perturbation, DataConfig, VaeArch, VaeTrainConfig, PolicyArch,
                                   DistillConfig, ContentConfig, TransferConfig, BcConfig, EvalConfig,
                                   SweepConfig, ExpertParams)}


def _build(cls, d: dict):
    if cls is SimConfig:
        return SimConfig.from_dict(d)
    kwargs = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        v = d[f.name]
        t = f.type if not isinstance(f.type, str) else _TYPES.get(f.type.split("|")[0].strip())
        if t is not None and is_dataclass(t) and isinstance(v, dict):
            v = _build(t, v)
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[f.name] = v
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**kwargs)


def profile(name: str) -> RunConfig:
    """'paper': full dataset counts and default hyperparameters; 'smoke': a minutes-scale variant."""
    if name == "paper":
        return RunConfig(profile="paper")
    if name == "smoke":
        return RunConfig(
            profile="smoke",
            data=DataConfig(n_source=8, n_target=8, vae_stride=20, target_stride=5),
            vae=VaeTrainConfig(epochs=50),
            distill=DistillConfig(episodes=4, dagger_rounds=0, epochs=5),
            content=ContentConfig(episodes=2, stride=20),
            transfer=TransferConfig(iterations=100),
            bc=BcConfig(epochs=3),
            eval=EvalConfig(materials=("plastic",), episodes_per_material=1),
            sweep=SweepConfig(pairs=16, iterations=100),
        )
    raise ValueError(f"unknown profile {name!r} (expected 'paper' or 'smoke')")
