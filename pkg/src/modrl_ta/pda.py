"""Progressive data augmentation for cold start.

Offline click logs give a click-through rate per display position. Moving an
item from position ``j`` to ``i`` rescales its predicted CTR by
``ctr[i] / ctr[j]``; with that rule, random re-allocations of logged sessions
yield simulated transitions. Once live data accumulates, training batches
shift from simulated to real transitions according to a ``MixSchedule``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .core import ReplayBuffer, SeededRng, Source, StateVector, Transition, write_feedback
from .moq import DEFAULT_OBJECTIVES, FeedbackEvent, ObjectiveSpec, rewards_for

# ---------------------------------------------------------------------------
# Position CTR table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogRecord:
    position: int
    clicked: bool
    ordered: bool = False
    item_id: str = ""
    pctr: float = math.nan
    pcvr: float = math.nan


@dataclass
class PositionCTRTable:
    ctr: np.ndarray
    impressions: np.ndarray | None = None
    clicks: np.ndarray | None = None

    def __post_init__(self):
        self.ctr = np.asarray(self.ctr, dtype=np.float64)
        if self.ctr.ndim != 1 or self.ctr.size == 0:
            raise ValueError("ctr table must be a non-empty vector")
        if np.any(~np.isfinite(self.ctr)) or np.any(self.ctr <= 0) or np.any(self.ctr > 1):
            raise ValueError("every position CTR must lie in (0, 1]")

    def __len__(self):
        return self.ctr.shape[0]

    def __getitem__(self, p: int) -> float:
        return float(self.ctr[p])

    @property
    def low_confidence(self) -> np.ndarray:
        """Positions whose entry is the smoothing prior (no impressions)."""
        if self.impressions is None:
            return np.zeros(len(self), dtype=bool)
        return self.impressions == 0


def build_table(click_logs: Iterable, n_positions: int | None = None, alpha: float = 1.0) -> PositionCTRTable:
    """Smoothed CTR per position: ``(clicks + alpha) / (impressions + 2 alpha)``.

    ``click_logs`` holds ``LogRecord`` objects or ``(position, clicked)`` pairs.
    """
    pairs = []
    for rec in click_logs:
        if isinstance(rec, LogRecord):
            pairs.append((rec.position, rec.clicked))
        else:
            pairs.append((rec[0], rec[1]))
    if not pairs:
        raise ValueError("no click logs")
    pos = np.array([int(p) for p, _ in pairs])
    clk = np.array([bool(c) for _, c in pairs])
    L = int(pos.max()) + 1 if n_positions is None else int(n_positions)
    if pos.min() < 0 or pos.max() >= L:
        raise ValueError(f"log position outside [0, {L})")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    imps = np.bincount(pos, minlength=L).astype(np.float64)
    clicks = np.bincount(pos, weights=clk, minlength=L)
    with np.errstate(invalid="ignore", divide="ignore"):
        ctr = (clicks + alpha) / (imps + 2 * alpha)
    if np.any(~np.isfinite(ctr)) or np.any(ctr <= 0):
        bad = np.flatnonzero(~np.isfinite(ctr) | (ctr <= 0))
        raise ValueError(f"positions {bad.tolist()} have zero CTR; use alpha > 0")
    return PositionCTRTable(ctr, imps, clicks)


def write_table(path, table: PositionCTRTable) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["position", "ctr"])
        for p, c in enumerate(table.ctr):
            wr.writerow([p, repr(float(c))])


def read_table(path) -> PositionCTRTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    ctr = np.empty(len(rows))
    for p, c in rows:
        ctr[int(p)] = float(c)
    return PositionCTRTable(ctr)


def adjust_pctr(pctr: float, from_pos: int, to_pos: int, table: PositionCTRTable) -> float:
    """pCTR after moving from ``from_pos`` to ``to_pos``, capped at 1."""
    if not 0.0 < pctr <= 1.0:
        raise ValueError(f"pctr must lie in (0, 1], got {pctr}")
    L = len(table)
    if not (0 <= from_pos < L and 0 <= to_pos < L):
        raise ValueError(f"positions ({from_pos}, {to_pos}) outside [0, {L})")
    if from_pos == to_pos:
        return pctr
    return min(1.0, pctr * (table.ctr[to_pos] / table.ctr[from_pos]))


# ---------------------------------------------------------------------------
# Position conflicts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AllocItem:
    item_id: str
    original_rank: int
    pctr: float = 1.0
    requested: int | None = None


@dataclass(frozen=True)
class AllocationRequest:
    items: tuple[AllocItem, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        ranks = sorted(it.original_rank for it in self.items)
        if ranks != list(range(len(ranks))):
            raise ValueError("original ranks must be unique and contiguous from 0")


def resolve_conflicts(req: AllocationRequest, n_positions: int | None = None) -> list:
    """Final list ``position -> item_id``.

    Items with a requested position are placed in original-rank order; an
    item whose slot is taken slides to the next free later slot (or, when
    none is left behind it, to the nearest free earlier slot). Remaining
    items fill the gaps in original-rank order.
    """
    L = len(req.items) if n_positions is None else int(n_positions)
    if len(req.items) > L:
        raise ValueError(f"{len(req.items)} items for {L} positions")
    slots: list = [None] * L
    by_rank = sorted(req.items, key=lambda it: it.original_rank)
    for it in by_rank:
        if it.requested is None:
            continue
        if not 0 <= it.requested < L:
            raise ValueError(f"item {it.item_id!r} requests position {it.requested} outside [0, {L})")
        p = it.requested
        while p < L and slots[p] is not None:
            p += 1
        if p == L:
            p = it.requested - 1
            while slots[p] is not None:
                p -= 1
        slots[p] = it.item_id
    free = (p for p in range(L) if slots[p] is None)
    for it in by_rank:
        if it.requested is None:
            slots[next(free)] = it.item_id
    return slots


# ---------------------------------------------------------------------------
# Cold-start simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LoggedItem:
    item_id: str
    original_rank: int
    pctr: float  # logged pCTR at the original position
    pcvr: float


@dataclass(frozen=True)
class LoggedSession:
    """Initial state and item list of one logged search session.

    ``candidates[t]`` is the id of the item allocated at step ``t``.
    """

    initial_state: StateVector
    items: tuple[LoggedItem, ...]
    candidates: tuple[str, ...]
    horizon: int


def simulate_transitions(
    sessions: Sequence[LoggedSession],
    table: PositionCTRTable,
    rng: SeededRng,
    episodes: int,
    objectives: Sequence[ObjectiveSpec] = DEFAULT_OBJECTIVES,
) -> list[Transition]:
    """Random re-allocation rollouts over logged sessions.

    Each step moves the step's candidate to a uniformly random position,
    rescales its pCTR with the table, draws click/order and advances only the
    feedback slice of the state.
    """
    if episodes <= 0:
        return []
    if not sessions:
        raise ValueError("empty item pool: no logged sessions")
    out = []
    L = len(table)
    for _ in range(episodes):
        sess = sessions[int(rng.integers(0, len(sessions)))]
        by_id = {it.item_id: it for it in sess.items}
        if len(sess.items) != L:
            raise ValueError(f"session has {len(sess.items)} items, table covers {L} positions")
        state = sess.initial_state
        totals = np.zeros(len(objectives))
        for t in range(sess.horizon):
            cand = by_id[sess.candidates[t]]
            a = int(rng.integers(0, L))
            req = AllocationRequest(
                tuple(
                    AllocItem(it.item_id, it.original_rank, it.pctr, a if it.item_id == cand.item_id else None)
                    for it in sess.items
                )
            )
            final = resolve_conflicts(req).index(cand.item_id)
            p = adjust_pctr(cand.pctr, cand.original_rank, final, table)
            clicked = bool(rng.random() < p)
            ordered = clicked and bool(rng.random() < cand.pcvr)
            rewards = rewards_for(objectives, FeedbackEvent(clicked, ordered))
            totals += [r > 0 for r in rewards.values()]
            terminal = t + 1 >= sess.horizon
            nxt = write_feedback(state, totals, t + 1, sess.horizon)
            out.append(Transition(state, a, rewards, nxt, terminal, Source.SIMULATED))
            state = nxt
    return out


# ---------------------------------------------------------------------------
# Simulated -> real mixing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixSchedule:
    """``(min real transitions, real fraction)`` stages, fractions non-decreasing."""

    stages: tuple[tuple[int, float], ...]

    def __post_init__(self):
        st = tuple((int(n), float(f)) for n, f in self.stages)
        object.__setattr__(self, "stages", st)
        if not st:
            raise ValueError("schedule needs at least one stage")
        if st[0][1] != 0.0 or st[-1][1] != 1.0:
            raise ValueError("first stage must be 0% real and the last 100% real")
        for (n0, f0), (n1, f1) in zip(st, st[1:]):
            if n1 < n0 or f1 < f0:
                raise ValueError("thresholds and fractions must be non-decreasing")
        if any(not 0.0 <= f <= 1.0 for _, f in st):
            raise ValueError("fractions must lie in [0, 1]")

    @classmethod
    def default(cls, unit: int = 1000) -> "MixSchedule":
        return cls(((0, 0.0), (unit, 0.1), (3 * unit, 0.3), (6 * unit, 0.6), (10 * unit, 1.0)))

    def fraction(self, n_real: int) -> float:
        f = self.stages[0][1]
        for threshold, frac in self.stages:
            if n_real >= threshold:
                f = frac
        return f


def real_count(fraction: float, batch_size: int) -> int:
    """``floor(fraction * batch_size)`` on the decimal value of ``fraction``."""
    return math.floor(Fraction(repr(float(fraction))) * batch_size)


def mix_batch(
    sim_buffer: ReplayBuffer,
    real_buffer: ReplayBuffer,
    schedule: MixSchedule,
    batch_size: int,
    rng: SeededRng,
) -> list[Transition]:
    f = schedule.fraction(len(real_buffer))
    n_real = real_count(f, batch_size)
    n_sim = batch_size - n_real
    if n_real and len(real_buffer) == 0:
        raise ValueError(f"schedule asks for {n_real} real transitions but the real buffer is empty")
    if n_sim and len(sim_buffer) == 0:
        raise ValueError(f"schedule asks for {n_sim} simulated transitions but the simulated buffer is empty")
    out = []
    if n_real:
        out += [real_buffer[int(i)] for i in rng.integers(0, len(real_buffer), size=n_real)]
    if n_sim:
        out += [sim_buffer[int(i)] for i in rng.integers(0, len(sim_buffer), size=n_sim)]
    return [out[i] for i in rng.gen.permutation(len(out))]


# ---------------------------------------------------------------------------
# Offline log files
# ---------------------------------------------------------------------------

LOG_FIELDS = ["position", "clicked", "ordered", "item_id", "pctr", "pcvr"]


def write_logs(path, records: Iterable[LogRecord]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOG_FIELDS)
        for r in records:
            wr.writerow([r.position, int(r.clicked), int(r.ordered), r.item_id, repr(r.pctr), repr(r.pcvr)])


def read_logs(path) -> list[LogRecord]:
    out = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        missing = set(LOG_FIELDS[:5]) - set(rd.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in rd:
            out.append(
                LogRecord(
                    int(row["position"]),
                    row["clicked"] == "1",
                    row["ordered"] == "1",
                    row["item_id"],
                    float(row["pctr"]),
                    float(row.get("pcvr") or "nan"),
                )
            )
    return out
