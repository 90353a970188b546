"""MDP domain types, experience replay and the seeded randomness contract.

Everything else in the package builds on the types defined here:

* ``SliceLayout`` / ``StateVector`` -- fixed-dimension feature vectors split
  into the six named feature groups (user, query, history, context, new-item
  history, feedback totals).
* ``Transition`` -- one (s, a, r, s', done) record with one reward per
  objective, tagged with its data source.
* ``ReplayBuffer`` -- bounded FIFO memory with uniform sampling.
* ``SeededRng`` -- a numpy ``Generator`` keyed by ``(seed, stream)``.
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

FEATURE_GROUPS = ("user", "query", "history", "context", "new_item", "feedback")

REWARD_DOMAIN = (-1.0, 1.0)


class ObjectiveMismatch(ValueError):
    """Transition rewards do not cover exactly the configured objectives."""


class ReplayNotReady(RuntimeError):
    """Sampling was requested before the buffer reached its warmup size."""


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


class SeededRng:
    """Deterministic random stream identified by ``(seed, stream)``.

    Draws come from numpy's PCG64 seeded through ``SeedSequence`` with the
    stream id as spawn key, so distinct streams of one seed are independent
    and every stream is reproducible across runs and platforms.
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def clone(self) -> "SeededRng":
        """Independent copy continuing from the current position."""
        return copy.deepcopy(self)

    def spawn(self, stream: int) -> "SeededRng":
        """Fresh stream of the same seed (position independent)."""
        return SeededRng(self.seed, stream)

    def child(self) -> "SeededRng":
        """New rng seeded from this stream's next draw."""
        return SeededRng(int(self.gen.integers(0, 2**63)), 0)

    # thin delegation, keeps call sites short
    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def random(self, size=None):
        return self.gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def bernoulli(self, p: float) -> bool:
        return bool(self.gen.random() < p)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream})"


# ---------------------------------------------------------------------------
# States and actions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SliceLayout:
    """Ordered ``(name, offset, length)`` triples covering ``[0, dim)``."""

    slices: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        names = [s[0] for s in self.slices]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate slice names in {names}")
        expected = 0
        for name, offset, length in self.slices:
            if length < 0:
                raise ValueError(f"slice {name!r} has negative length")
            if offset != expected:
                raise ValueError(
                    f"slice {name!r} starts at {offset}, expected {expected} (slices must be contiguous)"
                )
            expected += length

    @classmethod
    def from_lengths(cls, lengths: Mapping[str, int]) -> "SliceLayout":
        out, offset = [], 0
        for name, length in lengths.items():
            out.append((name, offset, int(length)))
            offset += int(length)
        return cls(tuple(out))

    @property
    def dim(self) -> int:
        return sum(s[2] for s in self.slices)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s[0] for s in self.slices)

    def span(self, name: str) -> slice:
        for n, offset, length in self.slices:
            if n == name:
                return slice(offset, offset + length)
        raise KeyError(name)

    def length(self, name: str) -> int:
        s = self.span(name)
        return s.stop - s.start

    def to_text(self) -> str:
        return " ".join(f"{n}:{o}:{l}" for n, o, l in self.slices)

    @classmethod
    def from_text(cls, text: str) -> "SliceLayout":
        parts = []
        for tok in text.split():
            n, o, l = tok.rsplit(":", 2)
            parts.append((n, int(o), int(l)))
        return cls(tuple(parts))


def default_layout(dim: int, n_positions: int, horizon: int, n_objectives: int = 2) -> SliceLayout:
    """Layout used by the simulated environment.

    ``context`` holds one pCTR per list position, ``new_item`` two rates per
    allocated item in the session, ``feedback`` one running total per
    objective plus a one-hot step counter. Whatever is left is split over the
    user/query/history groups.
    """
    context = n_positions
    new_item = 2 * horizon
    feedback = n_objectives + horizon
    rest = dim - context - new_item - feedback
    if rest < 0:
        raise ValueError(
            f"feature_dim={dim} too small: need {context + new_item + feedback} "
            f"for {n_positions} positions and horizon {horizon}"
        )
    user = rest - 2 * (rest // 3)
    query = rest // 3
    history = rest // 3
    return SliceLayout.from_lengths(
        {
            "user": user,
            "query": query,
            "history": history,
            "context": context,
            "new_item": new_item,
            "feedback": feedback,
        }
    )


@dataclass(frozen=True, eq=False)
class StateVector:
    values: np.ndarray
    layout: SliceLayout

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.layout.dim:
            raise ValueError(f"state has {v.shape[0]} values, layout expects {self.layout.dim}")
        if not np.all(np.isfinite(v)):
            raise ValueError("state contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def group(self, name: str) -> np.ndarray:
        return self.values[self.layout.span(name)]

    def with_group(self, name: str, values) -> "StateVector":
        v = self.values.copy()
        v[self.layout.span(name)] = values
        return StateVector(v, self.layout)

    def __eq__(self, other):
        if not isinstance(other, StateVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.layout, self.values.tobytes()))


def write_feedback(state: StateVector, totals: Sequence[float], step: int, horizon: int) -> StateVector:
    """Return ``state`` with its feedback slice set to totals + one-hot(step)."""
    fb = np.zeros(state.layout.length("feedback"))
    k = len(totals)
    if k + horizon != fb.shape[0]:
        raise ValueError("feedback slice does not match objectives + horizon")
    fb[:k] = totals
    if 0 <= step < horizon:
        fb[k + step] = 1.0
    return state.with_group("feedback", fb)


@dataclass(frozen=True)
class ActionIndex:
    position: int
    size: int

    def __post_init__(self):
        if not 0 <= self.position < self.size:
            raise ValueError(f"position {self.position} outside [0, {self.size})")

    def __index__(self):
        return self.position

    __int__ = __index__


# ---------------------------------------------------------------------------
# Transitions
# ---------------------------------------------------------------------------


class Source(enum.Enum):
    SIMULATED = "Simulated"
    REAL = "Real"


@dataclass(frozen=True)
class Transition:
    state: StateVector
    action: int
    rewards: Mapping[str, float]
    next_state: StateVector
    terminal: bool
    source: Source = Source.REAL

    def check(self, objectives: Sequence[str], strict_rewards: bool = True) -> None:
        if set(self.rewards) != set(objectives) or len(self.rewards) != len(objectives):
            raise ObjectiveMismatch(
                f"rewards keys {sorted(self.rewards)} != objectives {sorted(objectives)}"
            )
        for k, r in self.rewards.items():
            if not math.isfinite(r):
                raise ValueError(f"non-finite reward for {k!r}")
            if strict_rewards and r not in REWARD_DOMAIN:
                raise ValueError(f"reward for {k!r} is {r}, must be +1 or -1")
        if self.action < 0:
            raise ValueError("negative action")
        if self.state.layout != self.next_state.layout:
            raise ValueError("state and next_state layouts differ")


# ---------------------------------------------------------------------------
# Replay memory
# ---------------------------------------------------------------------------


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform sampling with replacement.

    Single writer. Readers must not run concurrently with ``push``.
    """

    def __init__(
        self,
        objectives: Sequence[str],
        capacity: int = 100_000,
        warmup_size: int = 1,
        strict_rewards: bool = True,
    ):
        if capacity <= 0 or warmup_size <= 0:
            raise ValueError("capacity and warmup_size must be positive")
        self.objectives = tuple(objectives)
        self.capacity = int(capacity)
        self.warmup_size = int(warmup_size)
        self.strict_rewards = strict_rewards
        self._data: list[Transition] = []
        self._head = 0  # index of the oldest entry once full

    def __len__(self):
        return len(self._data)

    def push(self, t: Transition) -> None:
        t.check(self.objectives, self.strict_rewards)
        if len(self._data) < self.capacity:
            self._data.append(t)
        else:
            self._data[self._head] = t
            self._head = (self._head + 1) % self.capacity

    def extend(self, ts: Iterable[Transition]) -> None:
        for t in ts:
            self.push(t)

    def __iter__(self) -> Iterator[Transition]:
        n = len(self._data)
        for i in range(n):
            yield self._data[(self._head + i) % n]

    def __getitem__(self, i: int) -> Transition:
        """``i``-th oldest entry."""
        n = len(self._data)
        if not -n <= i < n:
            raise IndexError(i)
        return self._data[(self._head + i) % n]

    @property
    def ready(self) -> bool:
        return len(self._data) >= self.warmup_size

    def sample_indices(self, n: int, rng: SeededRng) -> np.ndarray:
        if n <= 0:
            raise ValueError("batch size must be positive")
        if not self.ready:
            raise ReplayNotReady(f"buffer holds {len(self)} < warmup {self.warmup_size}")
        return rng.integers(0, len(self._data), size=n)

    def sample(self, n: int, rng: SeededRng) -> list[Transition]:
        idx = self.sample_indices(n, rng)
        return [self[int(i)] for i in idx]


def discounted_return(rewards: Iterable[float], gamma: float) -> float:
    """Sum of ``gamma**t * r_t``."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    total, disc = 0.0, 1.0
    for r in rewards:
        if not math.isfinite(r):
            raise ValueError(f"non-finite reward {r}")
        total += disc * r
        disc *= gamma
    return total


# ---------------------------------------------------------------------------
# Transition log files
# ---------------------------------------------------------------------------

LOG_MAGIC = "# modrl-ta transitions v1"


def _fmt(values) -> str:
    return ",".join(repr(float(x)) for x in values)


def write_transition_log(path, transitions: Iterable[Transition], objectives: Sequence[str], layout: SliceLayout):
    """Write transitions as tab-separated lines.

    Field order: source, state values, action, rewards (objective order from
    the header), next-state values, terminal flag (0/1).
    """
    with open(path, "w") as fh:
        fh.write(LOG_MAGIC + "\n")
        fh.write("# layout " + layout.to_text() + "\n")
        fh.write("# objectives " + " ".join(objectives) + "\n")
        for t in transitions:
            fh.write(
                "\t".join(
                    [
                        t.source.value,
                        _fmt(t.state.values),
                        str(int(t.action)),
                        _fmt(t.rewards[o] for o in objectives),
                        _fmt(t.next_state.values),
                        "1" if t.terminal else "0",
                    ]
                )
                + "\n"
            )


def read_transition_log(path) -> tuple[list[Transition], tuple[str, ...], SliceLayout]:
    transitions = []
    layout = objectives = None
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        if first != LOG_MAGIC:
            raise ValueError(f"{path}: not a transition log (header {first!r})")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("# layout "):
                layout = SliceLayout.from_text(line[len("# layout "):])
                continue
            if line.startswith("# objectives "):
                objectives = tuple(line[len("# objectives "):].split())
                continue
            if layout is None or objectives is None:
                raise ValueError(f"{path}:{lineno}: record before header")
            fields = line.split("\t")
            if len(fields) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(fields)}")
            src, s, a, r, s2, term = fields
            rewards = [float(x) for x in r.split(",")]
            if len(rewards) != len(objectives):
                raise ValueError(f"{path}:{lineno}: reward count mismatch")
            transitions.append(
                Transition(
                    state=StateVector(np.array([float(x) for x in s.split(",")]), layout),
                    action=int(a),
                    rewards=dict(zip(objectives, rewards)),
                    next_state=StateVector(np.array([float(x) for x in s2.split(",")]), layout),
                    terminal=term == "1",
                    source=Source(src),
                )
            )
    if layout is None or objectives is None:
        raise ValueError(f"{path}: missing header")
    return transitions, objectives, layout


@dataclass
class TransitionBatch:
    """Column-stacked view of a list of transitions."""

    states: np.ndarray
    actions: np.ndarray
    rewards: dict[str, np.ndarray]
    next_states: np.ndarray
    terminals: np.ndarray
    sources: list[Source] = field(default_factory=list)

    @classmethod
    def stack(cls, batch: Sequence[Transition]) -> "TransitionBatch":
        if isinstance(batch, TransitionBatch):
            return batch
        if len(batch) == 0:
            raise ValueError("empty batch")
        keys = list(batch[0].rewards)
        return cls(
            states=np.stack([t.state.values for t in batch]),
            actions=np.array([int(t.action) for t in batch], dtype=np.int64),
            rewards={k: np.array([t.rewards[k] for t in batch], dtype=np.float64) for k in keys},
            next_states=np.stack([t.next_state.values for t in batch]),
            terminals=np.array([bool(t.terminal) for t in batch]),
            sources=[t.source for t in batch],
        )

    def __len__(self):
        return self.actions.shape[0]
