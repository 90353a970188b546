"""Multi-objective traffic allocation with per-objective Q-learning and CEM fusion."""

from .core import ReplayBuffer, SeededRng, SliceLayout, Source, StateVector, Transition
from .dfm import cal_auc, fused_action, gain, optimize
from .env import EnvConfig, optimal_policy_value, policy_value
from .moq import DEFAULT_OBJECTIVES, FeedbackEvent, ObjectiveSpec, QEnsemble, create_ensemble, reward, train_step
from .pda import MixSchedule, PositionCTRTable, adjust_pctr, build_table, mix_batch, resolve_conflicts

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_OBJECTIVES",
    "EnvConfig",
    "FeedbackEvent",
    "MixSchedule",
    "ObjectiveSpec",
    "PositionCTRTable",
    "QEnsemble",
    "ReplayBuffer",
    "SeededRng",
    "SliceLayout",
    "Source",
    "StateVector",
    "Transition",
    "adjust_pctr",
    "build_table",
    "cal_auc",
    "create_ensemble",
    "fused_action",
    "gain",
    "mix_batch",
    "optimal_policy_value",
    "optimize",
    "policy_value",
    "resolve_conflicts",
    "reward",
    "train_step",
]
