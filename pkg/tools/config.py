# tools/config.py
# Experiment configuration: frozen dataclass sections, YAML load/dump and
# validation.

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

import yaml
from dotenv import load_dotenv

from tools.aggregators import KRUM_NEIGHBOR_COUNTS, AggregatorKind
from tools.attacks import AttackKind, AttackPlan, MaskMode
from tools.errors import ConfigError, InvalidArgumentError
from tools.reporting import atomic_write_text
from tools.tasks import PartitionMode, TaskKind

load_dotenv()

DEFAULT_OUT_DIR = os.getenv("SAFESPARSE_OUT_DIR", "results")

SWEEP_AXES = ("beta", "gamma", "attacker_ratio", "topk_ratio", "attack", "aggregator", "partition")


# -------- Sections --------
@dataclass(frozen=True)
class TaskConfig:
    kind: TaskKind = TaskKind.TINYMLP
    # quadratic
    d: int = 64
    mu: float = 1.0
    L: float = 10.0
    heterogeneity: float = 1.0
    # classification
    num_classes: int = 10
    features: int = 20
    hidden: int = 32
    train_samples: int = 2000
    test_samples: int = 400
    # std of the blob centers; smaller values push classes together
    center_scale: float = 3.0


@dataclass(frozen=True)
class PartitionConfig:
    mode: PartitionMode = PartitionMode.DIRICHLET
    alpha: float = 1.0


@dataclass(frozen=True)
class AggregatorConfig:
    kind: AggregatorKind = AggregatorKind.SAFESPARSE
    beta: float = 0.6
    gamma: float = 0.2
    trim_pct: float = 10.0
    krum_neighbor_count: str = "classic"
    # None: number of configured attackers
    krum_byzantine: Optional[int] = None
    # None: m minus the Byzantine bound
    krum_select: Optional[int] = None
    weight_denominator: str = "all"
    rfa_tol: float = 1e-6
    rfa_max_iters: int = 100


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    schedule: str = "constant"
    schedule_offset: float = 1.0


@dataclass(frozen=True)
class SweepConfig:
    axes: dict[str, list] = field(default_factory=dict)
    seed_mode: str = "per_cell"


@dataclass(frozen=True)
class ConvergenceConfig:
    rounds: int = 200
    d: int = 64
    mu: float = 1.0
    L: float = 10.0
    heterogeneity: float = 2.0
    topk_ratio: float = 0.5
    attacker_ratio: float = 0.4
    start_round: int = 10
    ipm_epsilon: float = 2.0
    # None: 8 * L / mu
    schedule_offset: Optional[float] = None


@dataclass(frozen=True)
class ExperimentConfig:
    n_clients: int = 20
    rounds: int = 60
    seed: int = 0
    pack_size: int = 8
    topk_ratio: float = 0.5
    local_epochs: int = 1
    task: TaskConfig = field(default_factory=TaskConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    attack: AttackPlan = field(default_factory=AttackPlan)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)

    def byzantine_bound(self) -> int:
        """Attacker count assumed by Multi-Krum."""
        if self.aggregator.krum_byzantine is not None:
            return self.aggregator.krum_byzantine
        return len(self.attack.attackers(self.n_clients))


# -------- dict <-> dataclass --------
def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)

    if origin is Union:
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(value, inner, path)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if isinstance(hint, type) and issubclass(hint, Enum):
        try:
            return hint.parse(value)
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc), field=path) from None
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", field=path)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", field=path)
        return value
    if hint is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a dot (1e-6) as strings
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"expected a number, got {value!r}", field=path) from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", field=path)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", field=path)
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", field=path)
        return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping, got {value!r}", field=path)
        return dict(value)
    return value


def _build(cls, raw: Any, path: str = ""):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"expected a mapping, got {type(raw).__name__}", field=path or None)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else str(unknown[0])
        raise ConfigError(f"unknown key '{unknown[0]}'", field=where)
    kwargs = {
        name: _coerce(value, hints[name], f"{path}.{name}" if path else name)
        for name, value in raw.items()
    }
    return cls(**kwargs)


def config_from_dict(raw: Optional[dict]) -> ExperimentConfig:
    config = _build(ExperimentConfig, raw)
    validate_config(config)
    return config


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_dict(config: ExperimentConfig) -> dict:
    return _plain(config)


# -------- Files --------
def load_yaml(text: str, source: str = "<string>") -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"cannot parse {source}: {problem}", line=line) from None


def parse_config(path: str | Path) -> ExperimentConfig:
    """Read, default-fill and validate a YAML experiment config."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    raw = load_yaml(text, source=str(path))
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level", line=1)
    return config_from_dict(raw)


def dump_config(config: ExperimentConfig, path: str | Path) -> None:
    atomic_write_text(path, yaml.safe_dump(config_to_dict(config), sort_keys=False))


# -------- Validation --------
def validate_config(config: ExperimentConfig) -> None:
    """Raise ConfigError naming the first violated invariant."""

    def check(ok: bool, message: str, where: str) -> None:
        if not ok:
            raise ConfigError(message, field=where)

    check(config.n_clients >= 1, "need at least one client", "n_clients")
    check(config.rounds >= 0, "rounds must be non-negative", "rounds")
    check(config.seed >= 0, "seed must be non-negative", "seed")
    check(config.pack_size >= 1, "pack_size must be positive", "pack_size")
    check(0.0 < config.topk_ratio <= 1.0, "topk_ratio must be in (0, 1]", "topk_ratio")
    check(config.local_epochs >= 0, "local_epochs must be non-negative", "local_epochs")

    task = config.task
    if task.kind is TaskKind.QUADRATIC:
        check(task.d >= config.pack_size, "pack_size cannot exceed the model dimension", "pack_size")
        check(0 < task.mu <= task.L, "quadratic task needs 0 < mu <= L", "task.mu")
        check(config.attack.kind is not AttackKind.LFA, "label flipping needs a classification task", "attack.kind")
    else:
        check(task.num_classes >= 2, "need at least 2 classes", "task.num_classes")
        check(task.train_samples >= config.n_clients, "fewer training samples than clients", "task.train_samples")
        check(task.test_samples >= 1, "need at least one test sample", "task.test_samples")
        check(task.center_scale > 0, "center_scale must be positive", "task.center_scale")

    check(config.partition.alpha > 0, "Dirichlet alpha must be positive", "partition.alpha")

    try:
        config.attack.validate(config.n_clients)
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc), field="attack.attacker_ratio") from None
    check(config.attack.mask_mode in (MaskMode.HONEST, MaskMode.COORDINATED), "bad mask_mode", "attack.mask_mode")

    agg = config.aggregator
    check(agg.beta >= 0, "beta must be non-negative", "aggregator.beta")
    check(0 < agg.gamma < 1, "gamma must be in (0, 1)", "aggregator.gamma")
    check(0 <= agg.trim_pct < 50, "trim_pct must be in [0, 50)", "aggregator.trim_pct")
    check(agg.krum_neighbor_count in KRUM_NEIGHBOR_COUNTS, "krum_neighbor_count must be classic, paper or extended",
          "aggregator.krum_neighbor_count")
    check(agg.weight_denominator in ("all", "retained"), "weight_denominator must be all or retained",
          "aggregator.weight_denominator")
    check(agg.rfa_tol > 0 and agg.rfa_max_iters >= 1, "Weiszfeld needs tol > 0 and max_iters >= 1",
          "aggregator.rfa_tol")
    if agg.kind is AggregatorKind.MULTIKRUM:
        n = config.byzantine_bound()
        check(config.n_clients > n + 2, f"Multi-Krum needs more than {n + 2} clients", "aggregator.krum_byzantine")
        if agg.krum_select is not None:
            check(1 <= agg.krum_select <= config.n_clients, "krum_select out of range", "aggregator.krum_select")

    opt = config.optimizer
    check(opt.name in ("adam", "sgd"), "optimizer must be adam or sgd", "optimizer.name")
    check(opt.lr > 0, "lr must be positive", "optimizer.lr")
    check(opt.batch_size >= 1, "batch_size must be positive", "optimizer.batch_size")
    check(opt.schedule in ("constant", "inverse_time"), "schedule must be constant or inverse_time",
          "optimizer.schedule")

    for axis, values in config.sweep.axes.items():
        check(axis in SWEEP_AXES, f"unknown sweep axis, expected one of {list(SWEEP_AXES)}", f"sweep.axes.{axis}")
        check(isinstance(values, list) and len(values) > 0, "sweep axis needs a non-empty list", f"sweep.axes.{axis}")
    check(config.sweep.seed_mode in ("per_cell", "shared"), "seed_mode must be per_cell or shared", "sweep.seed_mode")

    conv = config.convergence
    check(conv.rounds >= 1, "convergence check needs at least one round", "convergence.rounds")
    check(0 < conv.mu <= conv.L, "convergence check needs 0 < mu <= L", "convergence.mu")
    check(0.0 < conv.topk_ratio <= 1.0, "topk_ratio must be in (0, 1]", "convergence.topk_ratio")
    check(0 <= conv.attacker_ratio < 0.5, "attacker_ratio must be below 0.5 (threat model)",
          "convergence.attacker_ratio")


# -------- Overrides --------
def with_override(config: ExperimentConfig, axis: str, value: Any) -> ExperimentConfig:
    """Copy of `config` with one sweep axis set."""
    replace = dataclasses.replace
    if axis == "beta":
        return replace(config, aggregator=replace(config.aggregator, beta=float(value)))
    if axis == "gamma":
        return replace(config, aggregator=replace(config.aggregator, gamma=float(value)))
    if axis == "attacker_ratio":
        return replace(config, attack=replace(config.attack, attacker_ratio=float(value)))
    if axis == "topk_ratio":
        return replace(config, topk_ratio=float(value))
    if axis == "attack":
        return replace(config, attack=replace(config.attack, kind=AttackKind.parse(value)))
    if axis == "aggregator":
        return replace(config, aggregator=replace(config.aggregator, kind=AggregatorKind.parse(value)))
    if axis == "partition":
        return replace(config, partition=replace(config.partition, mode=PartitionMode.parse(value)))
    raise ConfigError(f"unknown sweep axis, expected one of {list(SWEEP_AXES)}", field=f"sweep.axes.{axis}")
