"""Experiment configuration.

A config file is INI-style: one section per concern, ``key = value`` lines.
Every key must be known; unknown sections or keys raise ``ConfigError`` so
typos cannot silently fall back to defaults.

Lists are comma separated, mappings are ``name:value`` pairs separated by
commas (``click:0.5, order:0.5``).
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields

from .env import EnvConfig
from .moq import ObjectiveSpec, RewardEvent
from .pda import MixSchedule


class ConfigError(ValueError):
    pass


DATA_MODES = ("sim_only", "real_only", "progressive")


@dataclass
class ExperimentSection:
    seed: int = 0
    label: str = "full"


@dataclass
class ObjectivesSection:
    ids: tuple[str, ...] = ("click", "order")
    events: tuple[str, ...] = ("click", "order")


@dataclass
class NetworkSection:
    hidden: tuple[int, ...] = (64, 64)
    shared_depth: int = 1
    activation: str = "relu"


@dataclass
class TrainingSection:
    gamma: float = 0.999
    sync_period: int = 200
    optimizer: str = "sgd"
    lr: float = 1e-3
    batch_size: int = 64
    train_steps: int = 5000
    replay_capacity: int = 100_000
    warmup: int = 500
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 10_000


@dataclass
class CemSection:
    population: int = 100
    elite: int = 10
    generations: int = 50
    init_mu: float = 0.5
    init_sigma2: float = 0.1
    noise_z0: float = 0.1
    noise_decay: float = 0.9
    noise_floor: float = 1e-4
    fitness: str = "auc"  # auc | rollout
    target: str = "order"
    nonneg: bool = True
    eval_sessions: int = 500  # held-out random-action sessions for the AUC eval set
    rollout_episodes: int = 200


@dataclass
class PdaSection:
    alpha: float = 1.0
    log_sessions: int = 2000
    sim_episodes: int = 4000
    mix_stages: tuple[tuple[int, float], ...] = MixSchedule.default().stages


@dataclass
class EnvSection:
    n_positions: int = 10
    horizon: int = 5
    feature_dim: int = 32
    bias_power: float = 1.0
    pctr_lo: float = 0.05
    pctr_hi: float = 0.5
    pcvr_lo: float = 0.05
    pcvr_hi: float = 0.5
    rate_anticorrelation: float = 0.0
    fatigue: float = 1.0
    request_dimension: bool = True


@dataclass
class AblationSection:
    use_cem: bool = True
    data_mode: str = "progressive"
    baseline: bool = False  # single-head fused-reward training
    fixed_weights: dict[str, float] = field(default_factory=lambda: {"click": 0.5, "order": 0.5})
    baseline_weights: dict[str, float] = field(default_factory=lambda: {"click": 0.5, "order": 0.5})
    metric_weights: dict[str, float] = field(default_factory=lambda: {"click": 1.0, "order": 1.0})
    eval_episodes: int = 1000


SECTIONS = {
    "experiment": ExperimentSection,
    "objectives": ObjectivesSection,
    "network": NetworkSection,
    "training": TrainingSection,
    "cem": CemSection,
    "pda": PdaSection,
    "env": EnvSection,
    "ablation": AblationSection,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    objectives: ObjectivesSection = field(default_factory=ObjectivesSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    cem: CemSection = field(default_factory=CemSection)
    pda: PdaSection = field(default_factory=PdaSection)
    env: EnvSection = field(default_factory=EnvSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def __post_init__(self):
        validate(self)

    # -- derived objects -------------------------------------------------
    @property
    def objective_specs(self) -> tuple[ObjectiveSpec, ...]:
        return tuple(ObjectiveSpec(i, RewardEvent(e)) for i, e in zip(self.objectives.ids, self.objectives.events))

    @property
    def env_config(self) -> EnvConfig:
        e = self.env
        return EnvConfig(
            n_positions=e.n_positions,
            horizon=e.horizon,
            feature_dim=e.feature_dim,
            bias_power=e.bias_power,
            pctr_range=(e.pctr_lo, e.pctr_hi),
            pcvr_range=(e.pcvr_lo, e.pcvr_hi),
            rate_anticorrelation=e.rate_anticorrelation,
            fatigue=e.fatigue,
            gamma=self.training.gamma,
            request_dimension=e.request_dimension,
            objectives=self.objective_specs,
        )

    @property
    def mix_schedule(self) -> MixSchedule:
        return MixSchedule(self.pda.mix_stages)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some section fields overridden: ``replace(ablation={"use_cem": False})``."""
        kw = {}
        for f in fields(self):
            sec = getattr(self, f.name)
            over = sections.pop(f.name, None)
            kw[f.name] = dataclasses.replace(sec, **over) if over else dataclasses.replace(sec)
        if sections:
            raise ConfigError(f"unknown sections {sorted(sections)}")
        return ExperimentConfig(**kw)


def _check(cond, msg):
    if not cond:
        raise ConfigError(msg)


def validate(cfg: ExperimentConfig) -> None:
    t, c, a, o = cfg.training, cfg.cem, cfg.ablation, cfg.objectives
    _check(len(o.ids) == len(o.events) and len(o.ids) >= 1, "objectives: ids and events must pair up")
    _check(len(set(o.ids)) == len(o.ids), "objectives: ids must be unique")
    for ev in o.events:
        _check(ev in ("click", "order"), f"objectives: unknown event {ev!r}")
    _check(0.0 <= t.gamma <= 1.0, "training.gamma must lie in [0, 1]")
    _check(t.sync_period >= 1, "training.sync_period must be >= 1")
    _check(t.optimizer in ("sgd", "adam"), "training.optimizer must be sgd or adam")
    _check(t.lr > 0, "training.lr must be positive")
    _check(t.batch_size >= 1 and t.train_steps >= 0, "training: batch_size >= 1 and train_steps >= 0")
    _check(t.replay_capacity >= 1 and 1 <= t.warmup <= t.replay_capacity, "training: need 1 <= warmup <= replay_capacity")
    _check(0 <= t.epsilon_end <= t.epsilon_start <= 1, "training: need 0 <= epsilon_end <= epsilon_start <= 1")
    _check(cfg.network.activation in ("relu", "tanh"), "network.activation must be relu or tanh")
    _check(0 <= cfg.network.shared_depth <= len(cfg.network.hidden), "network.shared_depth out of range")
    _check(all(h >= 1 for h in cfg.network.hidden), "network.hidden sizes must be positive")
    _check(1 <= c.elite <= c.population, "cem: need 1 <= elite <= population")
    _check(c.generations >= 1, "cem.generations must be >= 1")
    _check(c.init_sigma2 > 0 and c.noise_floor > 0 and c.noise_z0 >= 0, "cem: variances and noise must be positive")
    _check(0 < c.noise_decay <= 1, "cem.noise_decay must lie in (0, 1]")
    _check(c.fitness in ("auc", "rollout"), "cem.fitness must be auc or rollout")
    _check(c.target in o.ids, f"cem.target {c.target!r} is not an objective")
    _check(c.eval_sessions >= 1 and c.rollout_episodes >= 1, "cem: eval_sessions and rollout_episodes must be >= 1")
    _check(cfg.pda.alpha >= 0, "pda.alpha must be non-negative")
    _check(cfg.pda.log_sessions >= 1 and cfg.pda.sim_episodes >= 0, "pda: log_sessions >= 1, sim_episodes >= 0")
    try:
        MixSchedule(cfg.pda.mix_stages)
        cfg.env_config.layout
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _check(a.data_mode in DATA_MODES, f"ablation.data_mode must be one of {DATA_MODES}")
    _check(a.eval_episodes >= 1, "ablation.eval_episodes must be >= 1")
    for name in ("fixed_weights", "metric_weights"):
        _check(set(getattr(a, name)) == set(o.ids), f"ablation.{name} must name every objective")
    _check(set(a.baseline_weights) <= set(o.ids), "ablation.baseline_weights names an unknown objective")
    _check(all(v >= 0 for v in a.baseline_weights.values()), "ablation.baseline_weights must be non-negative")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _parse(text: str, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    text = text.strip()
    if tp is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tp in (int, float, str):
        return tp(text)
    if origin is tuple:
        parts = [p for p in (x.strip() for x in text.split(",")) if p]
        inner = args[0]
        if typing.get_origin(inner) is tuple:  # (threshold, fraction) pairs
            out = []
            for p in parts:
                n, f = p.split(":")
                out.append((int(n), float(f)))
            return tuple(out)
        return tuple(_parse(p, inner) for p in parts)
    if origin is dict:
        out = {}
        for p in (x.strip() for x in text.split(",")):
            if p:
                k, v = p.split(":")
                out[k.strip()] = float(v)
        return out
    raise TypeError(f"unsupported config type {tp}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, dict):
        return ", ".join(f"{k}:{v!r}" for k, v in value.items())
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{n}:{f!r}" for n, f in value)
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def from_mapping(data: dict[str, dict[str, str]]) -> ExperimentConfig:
    sections = {}
    for name, raw in data.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        cls = SECTIONS[name]
        hints = typing.get_type_hints(cls)
        kw = {}
        for key, text in raw.items():
            if key not in hints:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            try:
                kw[key] = _parse(str(text), hints[key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[{name}] {key}: {exc}") from exc
        sections[name] = cls(**kw)
    return ExperimentConfig(**sections)


def loads(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    return from_mapping({s: dict(cp[s]) for s in cp.sections()})


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return loads(fh.read())


def dumps(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        sec = getattr(cfg, f.name)
        lines.append(f"[{f.name}]")
        for sf in fields(sec):
            lines.append(f"{sf.name} = {_format(getattr(sec, sf.name))}")
        lines.append("")
    return "\n".join(lines)
