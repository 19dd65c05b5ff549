"""Declarative experiment configuration with strict parsing.

Config files are TOML with one table per section. Unknown keys anywhere are
rejected before any computation starts, so a misspelled hyperparameter can
never silently fall back to a default. Defaults follow the reference regime:
one local epoch, 300 rounds, loss weights (1, 1, 0.1), SGD momentum 0.9,
weight decay 1e-4.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .federation import AggregationStrategy, LocalHyper, STRATEGY_KINDS
from .model import ModelConfig
from .topology import SKELETON_PRESETS, SkeletonGraph


@dataclass(frozen=True)
class SkeletonSection:
    preset: str | None = "ntu25"
    edges: tuple[tuple[int, int], ...] | None = None
    root: int = 0
    joints: int | None = None

    def graph(self) -> SkeletonGraph:
        if self.edges is not None:
            if self.joints is None:
                raise ConfigError("data.skeleton: explicit edges require 'joints'")
            return SkeletonGraph(
                joint_count=self.joints,
                edges=tuple((int(a), int(b)) for a, b in self.edges),
                root_joint=self.root,
            )
        if self.preset is None or self.preset not in SKELETON_PRESETS:
            raise ConfigError(
                f"data.skeleton: unknown preset '{self.preset}' "
                f"(available: {sorted(SKELETON_PRESETS)})"
            )
        return SKELETON_PRESETS[self.preset]


@dataclass(frozen=True)
class ModelSection:
    channels: tuple[int, ...] = (16, 32, 64)
    temporal_kernel: int = 9
    strides: tuple[int, ...] = (1, 2, 2)
    feature_dim: int = 128
    conv_mode: str = "auto"  # auto | vanilla | ats
    coeff_mode: str = "learnable"
    coeff_init: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class FederationSection:
    n_clients: int = 3
    rounds: int = 300
    local_epochs: int = 1
    strategy: str = "fsar"
    server_momentum: float | str = "auto"  # "auto": 0.9 for fsar, 0 otherwise
    mu: float = 0.0
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    jobs: int = 1


@dataclass(frozen=True)
class LossSection:
    lambda_ce: float = 1.0
    lambda_kd: float = 1.0
    lambda_reg: float = 0.1
    grain_count: int = 2
    kd_temperature: float = 1.0


@dataclass(frozen=True)
class DataSection:
    profile: str = "skewed"
    base_samples: int = 400
    classes_per_client: int = 10
    sigma: float = 0.05
    rewire_edges: int = 4
    frames: int = 50
    skeleton: SkeletonSection = field(default_factory=SkeletonSection)


@dataclass(frozen=True)
class EvalSection:
    eval_interval: int = 10
    knn_k: int = 1
    unseen: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs"
    model: ModelSection = field(default_factory=ModelSection)
    federation: FederationSection = field(default_factory=FederationSection)
    loss: LossSection = field(default_factory=LossSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- resolution helpers -------------------------------------------------

    def skeleton_graph(self) -> SkeletonGraph:
        return self.data.skeleton.graph()

    def resolved_conv_mode(self) -> str:
        if self.model.conv_mode == "auto":
            return "ats" if self.federation.strategy == "fsar" else "vanilla"
        return self.model.conv_mode

    def resolve_strategy(self) -> AggregationStrategy:
        beta = self.federation.server_momentum
        if beta == "auto":
            beta = 0.9 if self.federation.strategy == "fsar" else 0.0
        return AggregationStrategy(
            kind=self.federation.strategy,
            mu=self.federation.mu,
            server_momentum=float(beta),
        )

    def model_config(self) -> ModelConfig:
        graph = self.skeleton_graph()
        return ModelConfig(
            num_joints=graph.joint_count,
            num_classes=self.data.classes_per_client,
            num_frames=self.data.frames,
            channels=self.model.channels,
            temporal_kernel=self.model.temporal_kernel,
            strides=self.model.strides,
            feature_dim=self.model.feature_dim,
            conv_mode=self.resolved_conv_mode(),
            coeff_mode=self.model.coeff_mode,
            coeff_init=self.model.coeff_init,
        )

    def local_hyper(self) -> LocalHyper:
        return LocalHyper(
            lr=self.federation.lr,
            momentum=self.federation.momentum,
            weight_decay=self.federation.weight_decay,
            local_epochs=self.federation.local_epochs,
            batch_size=self.federation.batch_size,
            lambda_ce=self.loss.lambda_ce,
            lambda_kd=self.loss.lambda_kd,
            lambda_reg=self.loss.lambda_reg,
            grain_count=self.loss.grain_count,
            kd_temperature=self.loss.kd_temperature,
        )

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        """A copy with top-level or federation-level fields replaced."""
        cfg = self
        fed_fields = {f.name for f in dataclasses.fields(FederationSection)}
        for key, value in kwargs.items():
            if value is None:
                continue
            if key in fed_fields:
                cfg = dataclasses.replace(
                    cfg, federation=dataclasses.replace(cfg.federation, **{key: value})
                )
            elif key in {f.name for f in dataclasses.fields(ExperimentConfig)}:
                cfg = dataclasses.replace(cfg, **{key: value})
            else:
                raise ConfigError(f"unknown override '{key}'")
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# Strict parsing
# ---------------------------------------------------------------------------

_SECTION_TYPES = {
    "model": ModelSection,
    "federation": FederationSection,
    "loss": LossSection,
    "data": DataSection,
    "eval": EvalSection,
}

_VALID_PROFILES = ("balanced", "skewed")


def _build_section(cls, payload: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in payload.items():
        if key not in fields:
            raise ConfigError(f"unknown key '{path}.{key}'")
        if key == "skeleton":
            if not isinstance(value, dict):
                raise ConfigError(f"'{path}.skeleton' must be a table")
            value = _build_section(SkeletonSection, value, f"{path}.skeleton")
        elif isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid section '{path}': {exc}") from exc


def config_from_dict(payload: dict) -> ExperimentConfig:
    kwargs = {}
    for key, value in payload.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"section '{key}' must be a table")
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        elif key == "seed":
            kwargs["seed"] = int(value)
        elif key == "out_dir":
            kwargs["out_dir"] = str(value)
        else:
            raise ConfigError(f"unknown key '{key}'")
    cfg = ExperimentConfig(**kwargs)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.federation.strategy not in STRATEGY_KINDS:
        raise ConfigError(f"unknown strategy '{cfg.federation.strategy}'")
    if cfg.data.profile not in _VALID_PROFILES:
        raise ConfigError(f"unknown data profile '{cfg.data.profile}'")
    if cfg.federation.rounds < 1:
        raise ConfigError("federation.rounds must be >= 1")
    if cfg.federation.n_clients < 2:
        raise ConfigError("federation.n_clients must be >= 2")
    if cfg.eval.eval_interval < 1:
        raise ConfigError("eval.eval_interval must be >= 1")
    if cfg.loss.grain_count >= len(cfg.model.channels):
        raise ConfigError(
            f"loss.grain_count {cfg.loss.grain_count} must be < "
            f"{len(cfg.model.channels)} blocks"
        )
    if cfg.model.conv_mode not in ("auto", "vanilla", "ats"):
        raise ConfigError(f"unknown conv_mode '{cfg.model.conv_mode}'")
    beta = cfg.federation.server_momentum
    if isinstance(beta, str) and beta != "auto":
        raise ConfigError(f"server_momentum must be a number or 'auto', got '{beta}'")
    # Resolution exercises the remaining invariants (skeleton, model shape).
    cfg.skeleton_graph()
    cfg.model_config()
    cfg.resolve_strategy()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            payload = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error in {path}: {exc}") from exc
    return config_from_dict(payload)


def dump_resolved(cfg: ExperimentConfig, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
