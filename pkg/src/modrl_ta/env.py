"""Synthetic position-biased search sessions.

A session shows ``L`` items. At step ``t`` one designated item (the
``t``-th new item of the session) is re-allocated to the chosen position;
the rest of the list is filled in original-rank order. Every shown item is
clicked with probability ``base_pctr * bias[position] * fatigue**c`` where
``c`` counts clicks on allocated items so far in the session, and a click
converts with probability ``base_pcvr``. Rewards come from the allocated
item's feedback.

With ``fatigue == 1`` this is the plain multiplicative position-bias model.
``fatigue < 1`` makes user attention a session resource, which is what
gives clicks and orders different long-horizon optima.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .core import ActionIndex, SeededRng, SliceLayout, StateVector, default_layout, write_feedback
from .moq import DEFAULT_OBJECTIVES, FeedbackEvent, ObjectiveSpec, rewards_for
from .pda import AllocationRequest, AllocItem, LogRecord, LoggedItem, LoggedSession, resolve_conflicts

RESET_STREAM = 0
STEP_STREAM = 1
MAX_EXACT_POSITIONS = 6
MAX_EXACT_HORIZON = 4


@dataclass(frozen=True)
class SimItem:
    item_id: str
    base_pctr: float
    base_pcvr: float
    original_rank: int
    is_new: bool = False

    def __post_init__(self):
        for name in ("base_pctr", "base_pcvr"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name}={v} outside (0, 1]")


@dataclass(frozen=True)
class PositionBias:
    bias: tuple[float, ...]

    def __post_init__(self):
        if any(not 0.0 < b <= 1.0 for b in self.bias):
            raise ValueError("position bias entries must lie in (0, 1]")

    @classmethod
    def power_law(cls, n: int, power: float = 1.0) -> "PositionBias":
        return cls(tuple(float((1.0 / (p + 1)) ** power) for p in range(n)))

    def __getitem__(self, p):
        return self.bias[p]

    def __len__(self):
        return len(self.bias)


@dataclass(frozen=True)
class EnvConfig:
    n_positions: int = 10
    horizon: int = 5
    feature_dim: int = 32
    bias: tuple[float, ...] | None = None  # default: 1/(p+1)**bias_power
    bias_power: float = 1.0
    pctr_range: tuple[float, float] = (0.05, 0.5)
    pcvr_range: tuple[float, float] = (0.05, 0.5)
    rate_anticorrelation: float = 0.0  # 0: independent pCTR/pCVR, 1: pCVR quantile = 1 - pCTR quantile
    fatigue: float = 1.0
    gamma: float = 0.999
    items: tuple[SimItem, ...] | None = None  # fixed catalogue instead of random draws
    request_dimension: bool = True  # expose per-position context features
    objectives: tuple[ObjectiveSpec, ...] = DEFAULT_OBJECTIVES

    def __post_init__(self):
        if self.n_positions < 1 or self.horizon < 1:
            raise ValueError("need at least one position and one step")
        if not 0.0 <= self.rate_anticorrelation <= 1.0:
            raise ValueError("rate_anticorrelation must lie in [0, 1]")
        if not 0.0 < self.fatigue <= 1.0:
            raise ValueError("fatigue must lie in (0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.bias is not None and len(self.bias) != self.n_positions:
            raise ValueError("bias needs one entry per position")
        if self.items is not None:
            if len(self.items) != self.n_positions:
                raise ValueError("a fixed catalogue needs exactly one item per position")
            if not any(it.is_new for it in self.items):
                raise ValueError("a fixed catalogue needs at least one new item to allocate")
        for lo, hi in (self.pctr_range, self.pcvr_range):
            if not 0.0 < lo <= hi <= 1.0:
                raise ValueError("rate ranges must satisfy 0 < lo <= hi <= 1")

    @property
    def position_bias(self) -> PositionBias:
        if self.bias is not None:
            return PositionBias(tuple(self.bias))
        return PositionBias.power_law(self.n_positions, self.bias_power)

    @property
    def layout(self) -> SliceLayout:
        return default_layout(self.feature_dim, self.n_positions, self.horizon, len(self.objectives))

    @property
    def objective_ids(self) -> list[str]:
        return [o.id for o in self.objectives]


@dataclass
class SessionState:
    config: EnvConfig
    items: tuple[SimItem, ...]
    candidates: tuple[int, ...]  # item index allocated at each step
    base: StateVector  # state at step 0
    step: int = 0
    totals: np.ndarray = field(default_factory=lambda: np.zeros(2))
    shown: tuple[int, ...] = ()  # item index per position on the last page

    @property
    def done(self) -> bool:
        return self.step >= self.config.horizon

    @property
    def clicks(self) -> int:
        ids = self.config.objective_ids
        return int(self.totals[ids.index("click")]) if "click" in ids else 0

    def observation(self) -> StateVector:
        return write_feedback(self.base, self.totals, self.step, self.config.horizon)

    def clone(self) -> "SessionState":
        return replace(self, totals=self.totals.copy())


@dataclass
class StepResult:
    state: StateVector
    events: list[tuple[str, int, FeedbackEvent]]  # (item_id, position, feedback) for every shown item
    allocated: FeedbackEvent
    rewards: dict[str, float]
    terminal: bool
    position: int  # final position of the allocated item


def _draw_items(config: EnvConfig, rng: SeededRng) -> tuple[SimItem, ...]:
    L, T = config.n_positions, config.horizon
    uc = rng.uniform(size=L)
    rho = config.rate_anticorrelation
    uv = (1.0 - rho) * rng.uniform(size=L) + rho * (1.0 - uc)
    (clo, chi), (vlo, vhi) = config.pctr_range, config.pcvr_range
    pctr = clo + (chi - clo) * uc
    pcvr = vlo + (vhi - vlo) * uv
    new = set(rng.gen.permutation(L)[: min(T, L)].tolist())
    return tuple(SimItem(f"i{k}", float(pctr[k]), float(pcvr[k]), k, k in new) for k in range(L))


def reset(config: EnvConfig, seed: int) -> tuple[SessionState, StateVector]:
    """Draw a session deterministically from ``seed``."""
    layout = config.layout  # raises when the feature budget cannot hold L positions
    rng = SeededRng(seed, RESET_STREAM)
    items = config.items if config.items is not None else _draw_items(config, rng)
    by_rank = sorted(range(len(items)), key=lambda k: items[k].original_rank)
    if [items[k].original_rank for k in by_rank] != list(range(len(items))):
        raise ValueError("original ranks must form a permutation of positions")
    new = [k for k in by_rank if items[k].is_new]
    candidates = tuple(new[t % len(new)] for t in range(config.horizon))

    v = np.zeros(layout.dim)
    for g in ("user", "query", "history"):
        v[layout.span(g)] = rng.normal(size=layout.length(g))
    if config.request_dimension:
        v[layout.span("context")] = [items[k].base_pctr for k in by_rank]
    new_feats = []
    for k in candidates:
        new_feats += [items[k].base_pctr, items[k].base_pcvr]
    v[layout.span("new_item")] = new_feats
    base = StateVector(v, layout)
    sess = SessionState(
        config,
        tuple(items),
        candidates,
        base,
        0,
        np.zeros(len(config.objectives)),
        tuple(by_rank),
    )
    return sess, sess.observation()


def page_for(sess: SessionState, action: int) -> tuple[int, ...]:
    """Item index per position after allocating this step's candidate to ``action``."""
    cand = sess.candidates[sess.step]
    req = AllocationRequest(
        tuple(
            AllocItem(str(k), it.original_rank, it.base_pctr, action if k == cand else None)
            for k, it in enumerate(sess.items)
        )
    )
    return tuple(int(x) for x in resolve_conflicts(req))


def click_probability(sess: SessionState, item: int, position: int) -> float:
    cfg = sess.config
    return sess.items[item].base_pctr * cfg.position_bias[position] * cfg.fatigue ** sess.clicks


def allocated_outcomes(sess: SessionState, action: int) -> list[tuple[float, FeedbackEvent]]:
    """Exact outcome distribution of the allocated item's feedback."""
    cand = sess.candidates[sess.step]
    pos = page_for(sess, action).index(cand)
    pc = click_probability(sess, cand, pos)
    pv = sess.items[cand].base_pcvr
    return [
        (1.0 - pc, FeedbackEvent(False, False)),
        (pc * (1.0 - pv), FeedbackEvent(True, False)),
        (pc * pv, FeedbackEvent(True, True)),
    ]


def _advance(sess: SessionState, page, ev: FeedbackEvent) -> dict[str, float]:
    rewards = rewards_for(sess.config.objectives, ev)
    sess.totals = sess.totals + np.array([r > 0 for r in rewards.values()], dtype=np.float64)
    sess.shown = tuple(page)
    sess.step += 1
    return rewards


def step(sess: SessionState, action, rng: SeededRng) -> StepResult:
    """Allocate, draw feedback for every shown item, advance. Mutates ``sess``.

    Each step consumes exactly ``2 * L`` uniforms: the allocated item's
    click/order draws first, then the other items in page order.
    """
    if sess.done:
        raise RuntimeError("step called on a finished session")
    a = int(ActionIndex(int(action), sess.config.n_positions))
    cand = sess.candidates[sess.step]
    page = page_for(sess, a)
    u = rng.random(2 * len(page))
    final = page.index(cand)
    order = [final] + [p for p in range(len(page)) if p != final]
    events: list = [None] * len(page)
    for j, pos in enumerate(order):
        k = page[pos]
        clicked = bool(u[2 * j] < click_probability(sess, k, pos))
        ordered = clicked and bool(u[2 * j + 1] < sess.items[k].base_pcvr)
        events[pos] = (sess.items[k].item_id, pos, FeedbackEvent(clicked, ordered))
    allocated = events[final][2]
    rewards = _advance(sess, page, allocated)
    return StepResult(sess.observation(), events, allocated, rewards, sess.done, final)


# ---------------------------------------------------------------------------
# Vectorised rollouts
# ---------------------------------------------------------------------------


@dataclass
class SessionBatch:
    """Many sessions laid out as arrays for lockstep rollouts.

    Uses the same seeds and the same uniform draws as ``reset``/``step`` so a
    batched rollout reproduces per-session stepping exactly.
    """

    config: EnvConfig
    seeds: np.ndarray
    base: np.ndarray  # (E, D) step-0 states
    cand_pctr: np.ndarray  # (E, T)
    cand_pcvr: np.ndarray  # (E, T)
    uniforms: np.ndarray  # (E, T, 2) allocated-item click/order draws

    @classmethod
    def prepare(cls, config: EnvConfig, seeds) -> "SessionBatch":
        seeds = np.asarray(seeds, dtype=np.uint64)
        T, L = config.horizon, config.n_positions
        base, cp, cv, uni = [], [], [], []
        for seed in seeds:
            sess, s0 = reset(config, int(seed))
            base.append(s0.values)
            cp.append([sess.items[k].base_pctr for k in sess.candidates])
            cv.append([sess.items[k].base_pcvr for k in sess.candidates])
            u = SeededRng(int(seed), STEP_STREAM).random((T, 2 * L))
            uni.append(u[:, :2])
        E, D = len(seeds), config.layout.dim
        return cls(
            config,
            seeds,
            np.array(base).reshape(E, D),
            np.array(cp).reshape(E, T),
            np.array(cv).reshape(E, T),
            np.array(uni).reshape(E, T, 2),
        )

    def __len__(self):
        return self.seeds.shape[0]


@dataclass
class BatchRollout:
    rewards: dict[str, np.ndarray]  # objective -> (E, T)
    actions: np.ndarray  # (E, T)

    def returns(self) -> dict[str, np.ndarray]:
        return {k: v.sum(axis=1) for k, v in self.rewards.items()}


def rollout_batch(batch: SessionBatch, policy: Callable[[np.ndarray, int], np.ndarray]) -> BatchRollout:
    """Run every session to the horizon; ``policy(states, t)`` returns one action per row."""
    cfg = batch.config
    E, T = len(batch), cfg.horizon
    layout = cfg.layout
    fb = layout.span("feedback")
    ids = cfg.objective_ids
    k = len(ids)
    bias = np.array(cfg.position_bias.bias)
    totals = np.zeros((E, k))
    rewards = {o: np.zeros((E, T)) for o in ids}
    actions = np.zeros((E, T), dtype=np.int64)
    click_col = ids.index("click") if "click" in ids else None
    rows = np.arange(E)
    for t in range(T):
        X = batch.base.copy()
        feed = np.zeros((E, fb.stop - fb.start))
        feed[:, :k] = totals
        feed[:, k + t] = 1.0
        X[:, fb] = feed
        a = np.asarray(policy(X, t), dtype=np.int64)
        if a.shape != (E,) or a.min() < 0 or a.max() >= cfg.n_positions:
            raise ValueError("policy returned invalid actions")
        actions[:, t] = a
        clicks = totals[:, click_col] if click_col is not None else 0.0
        p = batch.cand_pctr[:, t] * bias[a] * cfg.fatigue**clicks
        clicked = batch.uniforms[:, t, 0] < p
        ordered = clicked & (batch.uniforms[:, t, 1] < batch.cand_pcvr[:, t])
        for j, o in enumerate(cfg.objectives):
            hit = clicked if o.reward_event.value == "click" else ordered
            rewards[o.id][rows, t] = np.where(hit, 1.0, -1.0)
            totals[:, j] += hit
    return BatchRollout(rewards, actions)


# ---------------------------------------------------------------------------
# Exact values for small configurations
# ---------------------------------------------------------------------------


def _check_small(config: EnvConfig):
    if config.n_positions > MAX_EXACT_POSITIONS or config.horizon > MAX_EXACT_HORIZON:
        raise ValueError(
            f"exact enumeration limited to L <= {MAX_EXACT_POSITIONS}, T <= {MAX_EXACT_HORIZON}"
        )


def _scalar(rewards: Mapping[str, float], weights: Mapping[str, float]) -> float:
    return sum(w * rewards[k] for k, w in weights.items())


def _apply(sess: SessionState, action: int, ev: FeedbackEvent) -> tuple[SessionState, float]:
    nxt = sess.clone()
    rewards = _advance(nxt, page_for(sess, action), ev)
    return nxt, rewards


def optimal_policy_value(config: EnvConfig, weights: Mapping[str, float] | str = "click", seed: int = 0) -> float:
    """Expected discounted return of the best allocation policy, by enumeration.

    Every action at every step and every feedback outcome is expanded; the
    value is the max over actions of the outcome-weighted returns.
    """
    _check_small(config)
    w = {weights: 1.0} if isinstance(weights, str) else dict(weights)
    sess, _ = reset(config, seed)
    gamma = config.gamma

    def value(s: SessionState) -> float:
        if s.done:
            return 0.0
        best = -np.inf
        for a in range(config.n_positions):
            v = 0.0
            for p, ev in allocated_outcomes(s, a):
                if p == 0.0:
                    continue
                nxt, r = _apply(s, a, ev)
                v += p * (_scalar(r, w) + gamma * value(nxt))
            best = max(best, v)
        return best

    return float(value(sess))


def policy_value(
    config: EnvConfig,
    policy: Callable[[SessionState, StateVector], int] | None = None,
    weights: Mapping[str, float] | str = "click",
    seed: int = 0,
    discount: bool = True,
) -> float:
    """Exact expected return of a deterministic policy (uniform random if ``None``)."""
    _check_small(config)
    w = {weights: 1.0} if isinstance(weights, str) else dict(weights)
    sess, _ = reset(config, seed)
    gamma = config.gamma if discount else 1.0

    def value(s: SessionState) -> float:
        if s.done:
            return 0.0
        if policy is None:
            actions = [(1.0 / config.n_positions, a) for a in range(config.n_positions)]
        else:
            actions = [(1.0, int(policy(s, s.observation())))]
        v = 0.0
        for pa, a in actions:
            for p, ev in allocated_outcomes(s, a):
                if p == 0.0:
                    continue
                nxt, r = _apply(s, a, ev)
                v += pa * p * (_scalar(r, w) + gamma * value(nxt))
        return v

    return float(value(sess))


# ---------------------------------------------------------------------------
# Offline logs
# ---------------------------------------------------------------------------


def run_episode(config: EnvConfig, seed: int, policy: Callable[[SessionState, StateVector], int]):
    """Roll out one session; yields ``(state, action, StepResult)`` per step."""
    sess, s = reset(config, seed)
    rng = SeededRng(seed, STEP_STREAM)
    out = []
    while not sess.done:
        a = int(policy(sess, s))
        res = step(sess, a, rng)
        out.append((s, a, res))
        s = res.state
    return out


def log_sessions(config: EnvConfig, n_sessions: int, rng: SeededRng):
    """Offline logs under the incumbent ranking (no re-allocation).

    Returns ``(records, sessions)``: one ``LogRecord`` per impression and one
    ``LoggedSession`` template per session. The logged pCTR of an item is
    its click probability at the logged position without fatigue, i.e. what
    an upstream CTR model would predict.
    """
    bias = config.position_bias
    records, sessions = [], []
    for _ in range(n_sessions):
        seed = int(rng.integers(0, 2**63))
        sess, s0 = reset(config, seed)

        def identity(se: SessionState, _s):
            return se.items[se.candidates[se.step]].original_rank

        index = {it.item_id: k for k, it in enumerate(sess.items)}
        for _s, _a, res in run_episode(config, seed, identity):
            for item_id, pos, ev in res.events:
                it = sess.items[index[item_id]]
                records.append(LogRecord(pos, ev.clicked, ev.ordered, item_id, it.base_pctr * bias[pos], it.base_pcvr))
        sessions.append(
            LoggedSession(
                s0,
                tuple(LoggedItem(it.item_id, it.original_rank, it.base_pctr * bias[it.original_rank], it.base_pcvr) for it in sess.items),
                tuple(sess.items[k].item_id for k in sess.candidates),
                config.horizon,
            )
        )
    return records, sessions

