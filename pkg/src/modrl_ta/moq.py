"""Per-objective Q-learning ensemble over a shared input trunk.

Each objective (click, order, ...) owns a Q-head with its own evaluation and
target parameters. All heads read the same trunk features; the trunk is
trained on the sum of the heads' losses while head parameters only see their
own loss.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import qnet
from .core import ActionIndex, SeededRng, StateVector, Transition, TransitionBatch
from .qnet import MLPParams, NonFiniteLoss, QNetwork

FUSED_ID = "fused"


class RewardEvent(enum.Enum):
    CLICK = "click"
    ORDER = "order"


@dataclass(frozen=True)
class ObjectiveSpec:
    id: str
    reward_event: RewardEvent


DEFAULT_OBJECTIVES = (
    ObjectiveSpec("click", RewardEvent.CLICK),
    ObjectiveSpec("order", RewardEvent.ORDER),
)


@dataclass(frozen=True)
class FeedbackEvent:
    clicked: bool
    ordered: bool
    page_view: bool = True

    def __post_init__(self):
        if self.ordered and not self.clicked:
            raise ValueError("an order implies a click")
        if (self.clicked or self.ordered) and not self.page_view:
            raise ValueError("feedback on an item that was not shown")


def reward(spec: ObjectiveSpec, ev: FeedbackEvent) -> float:
    """+1 when the objective's event happened, -1 for a bare page view."""
    hit = ev.clicked if spec.reward_event is RewardEvent.CLICK else ev.ordered
    return 1.0 if hit else -1.0


def rewards_for(objectives: Sequence[ObjectiveSpec], ev: FeedbackEvent) -> dict[str, float]:
    return {o.id: reward(o, ev) for o in objectives}


class LinearEpsilon:
    """Linear decay from ``start`` to ``end`` over ``decay_steps`` calls."""

    def __init__(self, start=1.0, end=0.05, decay_steps=10_000):
        self.start, self.end, self.decay_steps = start, end, max(1, int(decay_steps))

    def __call__(self, step: int) -> float:
        frac = min(1.0, step / self.decay_steps)
        return self.start + frac * (self.end - self.start)


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------


class QEnsemble:
    """Shared trunk plus one ``QNetwork`` head per objective.

    ``trunk`` is ``None`` when nothing is shared (heads read raw states).
    ``target_trunk`` is the frozen trunk copy used for TD targets; it is
    refreshed whenever the heads sync.
    """

    def __init__(
        self,
        objectives: Sequence[ObjectiveSpec],
        trunk: MLPParams | None,
        heads: Mapping[str, QNetwork],
        target_trunk: MLPParams | None = None,
    ):
        ids = [o.id for o in objectives]
        if len(set(ids)) != len(ids):
            raise ValueError(f"objective ids must be unique: {ids}")
        if set(ids) != set(heads):
            raise ValueError("one head per objective required")
        self.objectives = list(objectives)
        self.trunk = trunk
        self.target_trunk = target_trunk if target_trunk is not None else (trunk.copy() if trunk else None)
        self.heads = dict(heads)
        feat = trunk.out_dim if trunk is not None else None
        for oid, h in self.heads.items():
            if feat is not None and h.eval.in_dim != feat:
                raise ValueError(f"head {oid!r} expects {h.eval.in_dim} inputs, trunk gives {feat}")
        outs = {h.eval.out_dim for h in self.heads.values()}
        if len(outs) != 1:
            raise ValueError("all heads must share the action-space size")

    @property
    def ids(self) -> list[str]:
        return [o.id for o in self.objectives]

    @property
    def n_actions(self) -> int:
        return next(iter(self.heads.values())).eval.out_dim

    @property
    def state_dim(self) -> int:
        if self.trunk is not None:
            return self.trunk.in_dim
        return next(iter(self.heads.values())).eval.in_dim

    def features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return qnet.forward(self.trunk, X) if self.trunk is not None else X

    def target_features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return qnet.forward(self.target_trunk, X) if self.target_trunk is not None else X

    def parameters(self, heads: Sequence[str] | None = None, trunk: bool = True) -> list[np.ndarray]:
        out = list(self.trunk.arrays()) if (trunk and self.trunk is not None) else []
        for oid in heads if heads is not None else self.ids:
            out += self.heads[oid].eval.arrays()
        return out

    def snapshot(self) -> "QEnsemble":
        """Deep copy; safe to share with concurrent readers."""
        return QEnsemble(
            self.objectives,
            self.trunk.copy() if self.trunk is not None else None,
            {
                k: QNetwork(h.eval.copy(), h.target.copy(), h.sync_period, h.steps_since_sync)
                for k, h in self.heads.items()
            },
            self.target_trunk.copy() if self.target_trunk is not None else None,
        )

    def add_objective(self, spec: ObjectiveSpec, rng: SeededRng, hidden: Sequence[int] = (), activation="relu"):
        """Attach a freshly initialised head; existing heads are not touched."""
        if spec.id in self.heads:
            raise ValueError(f"objective {spec.id!r} already present")
        in_dim = self.trunk.out_dim if self.trunk is not None else self.state_dim
        sync = next(iter(self.heads.values())).sync_period
        self.heads[spec.id] = QNetwork.create([in_dim, *hidden, self.n_actions], rng, activation, sync)
        self.objectives.append(spec)


def create_ensemble(
    objectives: Sequence[ObjectiveSpec],
    state_dim: int,
    n_actions: int,
    rng: SeededRng,
    hidden: Sequence[int] = (64, 64),
    shared_depth: int = 1,
    activation: str = "relu",
    sync_period: int = 200,
) -> QEnsemble:
    hidden = list(hidden)
    if not 0 <= shared_depth <= len(hidden):
        raise ValueError(f"shared_depth {shared_depth} outside [0, {len(hidden)}]")
    trunk = None
    head_in = state_dim
    if shared_depth:
        trunk = qnet.init_mlp([state_dim, *hidden[:shared_depth]], rng.spawn(1000), activation, out_activation=activation)
        head_in = hidden[shared_depth - 1]
    heads = {}
    for i, o in enumerate(objectives):
        heads[o.id] = QNetwork.create(
            [head_in, *hidden[shared_depth:], n_actions], rng.spawn(1001 + i), activation, sync_period
        )
    return QEnsemble(objectives, trunk, heads)


def q_values(ens: QEnsemble, s) -> dict[str, np.ndarray]:
    """Per-objective Q rows from the evaluation parameters."""
    x = s.values if isinstance(s, StateVector) else np.asarray(s, dtype=np.float64)
    if x.shape[-1] != ens.state_dim:
        raise ValueError(f"state dimension {x.shape[-1]} != ensemble input {ens.state_dim}")
    f = ens.features(x)
    return {oid: qnet.forward(h.eval, f) for oid, h in ens.heads.items()}


def compute_targets(ens: QEnsemble, batch, gamma: float, heads: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    b = TransitionBatch.stack(batch)
    ft = ens.target_features(b.next_states)
    return {
        oid: qnet.td_target(b, oid, ens.heads[oid].target, gamma, features=ft)
        for oid in (heads if heads is not None else ens.ids)
    }


def loss_and_grads(ens: QEnsemble, batch, targets: Mapping[str, np.ndarray], heads: Sequence[str] | None = None):
    """Per-head losses, per-head gradients and the trunk gradient of ``sum_i L_i``."""
    b = TransitionBatch.stack(batch)
    heads = list(heads if heads is not None else ens.ids)
    if ens.trunk is not None:
        f, cache = qnet.forward_cache(ens.trunk, b.states)
    else:
        f = b.states
    losses, head_grads = {}, {}
    d_feat = np.zeros_like(f)
    for oid in heads:
        try:
            loss, g, dX = qnet.td_loss_grad(ens.heads[oid].eval, f, b.actions, targets[oid])
        except NonFiniteLoss as exc:
            exc.objective = oid
            raise NonFiniteLoss(f"objective {oid!r}: {exc}", exc.index, oid) from exc
        losses[oid] = loss
        head_grads[oid] = g
        d_feat += dX
    trunk_grad = None
    if ens.trunk is not None:
        trunk_grad, _ = qnet.backward(ens.trunk, cache, d_feat)
    return losses, head_grads, trunk_grad


def total_loss(ens: QEnsemble, batch, targets: Mapping[str, np.ndarray], heads=None) -> float:
    b = TransitionBatch.stack(batch)
    f = ens.features(b.states)
    rows = np.arange(len(b))
    total = 0.0
    for oid in heads if heads is not None else ens.ids:
        q = qnet.forward(ens.heads[oid].eval, f)[rows, b.actions]
        total += float(np.mean((q - targets[oid]) ** 2))
    return total


@dataclass
class TrainStepResult:
    losses: dict[str, float]
    total: float
    synced: bool


def train_step(
    ens: QEnsemble,
    batch,
    gamma: float,
    lr: float = 1e-3,
    optimizer=None,
    heads: Sequence[str] | None = None,
    freeze_trunk: bool = False,
) -> TrainStepResult:
    """One joint update of the selected heads (all by default) and the trunk.

    With ``freeze_trunk`` only head parameters move, which is how a new
    objective is added without disturbing existing heads.
    """
    b = TransitionBatch.stack(batch)
    heads = list(heads if heads is not None else ens.ids)
    targets = compute_targets(ens, b, gamma, heads)
    losses, head_grads, trunk_grad = loss_and_grads(ens, b, targets, heads)
    params, grads = [], []
    if trunk_grad is not None and not freeze_trunk:
        params += ens.trunk.arrays()
        grads += trunk_grad.arrays()
    for oid in heads:
        params += ens.heads[oid].eval.arrays()
        grads += head_grads[oid].arrays()
    (optimizer or qnet.SGD(lr)).step(params, grads)
    synced = False
    for oid in heads:
        synced |= qnet.maybe_sync_target(ens.heads[oid])
    if synced and ens.trunk is not None and not freeze_trunk:
        ens.target_trunk = ens.trunk.copy()
    return TrainStepResult(losses, float(sum(losses.values())), synced)


def act_epsilon_greedy(ens: QEnsemble, objective: str, s, epsilon: float, rng: SeededRng) -> ActionIndex:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    A = ens.n_actions
    if epsilon > 0.0 and rng.random() < epsilon:
        return ActionIndex(int(rng.integers(0, A)), A)
    return ActionIndex(qnet.greedy_action(q_values(ens, s)[objective]), A)


def fused_reward_baseline(batch: Sequence[Transition], weights: Mapping[str, float]) -> list[Transition]:
    """Collapse per-objective rewards into a single weighted reward."""
    if not weights:
        raise ValueError("fusion weights must not be empty")
    if any(w < 0 for w in weights.values()):
        raise ValueError("fusion weights must be non-negative")
    out = []
    for t in batch:
        r = sum(w * t.rewards[k] for k, w in weights.items())
        out.append(
            Transition(t.state, t.action, {FUSED_ID: float(r)}, t.next_state, t.terminal, t.source)
        )
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

ENSEMBLE_FORMAT = 1


def save_ensemble(path, ens: QEnsemble) -> None:
    arrays = {}
    if ens.trunk is not None:
        arrays.update(qnet.params_to_arrays(ens.trunk, "trunk/"))
        arrays.update(qnet.params_to_arrays(ens.target_trunk, "target_trunk/"))
    for oid, h in ens.heads.items():
        arrays.update(qnet.params_to_arrays(h.eval, f"head/{oid}/eval/"))
        arrays.update(qnet.params_to_arrays(h.target, f"head/{oid}/target/"))
    manifest = {
        "format_version": ENSEMBLE_FORMAT,
        "objectives": [{"id": o.id, "reward_event": o.reward_event.value} for o in ens.objectives],
        "shared_trunk": ens.trunk is not None,
        "sync": {oid: [h.sync_period, h.steps_since_sync] for oid, h in ens.heads.items()},
    }
    np.savez(path, manifest=np.array(json.dumps(manifest)), **arrays)


def load_ensemble(path) -> QEnsemble:
    with np.load(path, allow_pickle=False) as data:
        manifest = json.loads(str(data["manifest"]))
        if manifest.get("format_version") != ENSEMBLE_FORMAT:
            raise ValueError(f"unsupported ensemble checkpoint version {manifest.get('format_version')}")
        objectives = [ObjectiveSpec(o["id"], RewardEvent(o["reward_event"])) for o in manifest["objectives"]]
        trunk = target_trunk = None
        if manifest["shared_trunk"]:
            trunk = qnet.params_from_arrays(data, "trunk/")
            target_trunk = qnet.params_from_arrays(data, "target_trunk/", trunk.shapes)
        heads = {}
        for o in objectives:
            ev = qnet.params_from_arrays(data, f"head/{o.id}/eval/")
            tg = qnet.params_from_arrays(data, f"head/{o.id}/target/", ev.shapes)
            period, steps = manifest["sync"][o.id]
            heads[o.id] = QNetwork(ev, tg, period, steps)
    return QEnsemble(objectives, trunk, heads, target_trunk)
