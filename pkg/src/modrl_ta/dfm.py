"""Decision fusion: weighted Q-value gain and cross-entropy search over weights.

The fused policy scores action ``a`` in state ``s`` by
``gain(s, a) = sum_i w_i * q_i(s, a)``. ``optimize`` runs the cross-entropy
method over ``w`` with a diagonal Gaussian whose variance gets an additive
noise term each generation so it cannot collapse early.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .core import SeededRng
from .moq import QEnsemble, q_values


@dataclass(frozen=True)
class NoiseSchedule:
    """``Z_t = max(floor, z0 * decay**t)`` added to every variance component."""

    z0: float = 0.1
    decay: float = 0.9
    floor: float = 1e-4

    def __call__(self, generation: int) -> float:
        return max(self.floor, self.z0 * self.decay**generation)


@dataclass
class CEMDistribution:
    mu: np.ndarray
    sigma2: np.ndarray
    generation: int = 0
    noise: Callable[[int], float] = field(default_factory=NoiseSchedule)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).copy()
        self.sigma2 = np.broadcast_to(np.asarray(self.sigma2, dtype=np.float64), self.mu.shape).copy()
        if np.any(self.sigma2 < 0):
            raise ValueError("variances must be non-negative")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class FitnessSample:
    weights: np.ndarray
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite fitness {self.score} for weights {self.weights}")


def sample_population(dist: CEMDistribution, n: int, rng: SeededRng, nonneg: bool = False) -> np.ndarray:
    """``n`` diagonal-Gaussian draws, shape ``(n, k)``; negatives clipped if ``nonneg``."""
    if n <= 0:
        raise ValueError("population size must be positive")
    w = dist.mu + np.sqrt(dist.sigma2) * rng.normal(size=(n, dist.dim))
    if nonneg:
        w = np.maximum(w, 0.0)
    return w


def cal_auc(labels, scores) -> float:
    """Area under the ROC curve via the Mann-Whitney rank sum (ties count 1/2)."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise ValueError("labels and scores must be 1-d arrays of equal length")
    pos = y.astype(bool)
    n_pos = int(pos.sum())
    n_neg = y.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _weights_for(q: Mapping[str, np.ndarray], w) -> list[float]:
    if isinstance(w, Mapping):
        if set(w) != set(q):
            raise ValueError(f"weights {sorted(w)} do not match objectives {sorted(q)}")
        return [float(w[k]) for k in q]
    w = list(np.asarray(w, dtype=np.float64).reshape(-1))
    if len(w) != len(q):
        raise ValueError(f"{len(w)} weights for {len(q)} objectives")
    return w


def gain_row(q: Mapping[str, np.ndarray], w) -> np.ndarray:
    """Gain for every action (or every row of a batch)."""
    ws = _weights_for(q, w)
    out = None
    for wi, qi in zip(ws, q.values()):
        term = wi * np.asarray(qi, dtype=np.float64)
        out = term if out is None else out + term
    return out


def gain(q: Mapping[str, np.ndarray], a, w) -> float:
    return float(gain_row(q, w)[int(a)])


def fused_action(ens: QEnsemble, s, w) -> int:
    return int(np.argmax(gain_row(q_values(ens, s), w)))


def update(dist: CEMDistribution, samples: Sequence[FitnessSample], elite_count: int) -> CEMDistribution:
    """Refit the Gaussian to the ``elite_count`` best samples (ties: lower index first)."""
    if elite_count <= 0:
        raise ValueError("elite_count must be positive")
    if elite_count > len(samples):
        raise ValueError(f"elite_count {elite_count} exceeds population {len(samples)}")
    scores = np.array([s.score for s in samples])
    order = np.argsort(-scores, kind="stable")[:elite_count]
    elites = np.stack([np.asarray(samples[i].weights, dtype=np.float64) for i in order])
    mu = elites.mean(axis=0)
    z = dist.noise(dist.generation + 1)
    sigma2 = ((elites - mu) ** 2).mean(axis=0) + z
    return CEMDistribution(mu, sigma2, dist.generation + 1, dist.noise)


@dataclass
class GenerationRecord:
    generation: int
    mu: np.ndarray
    sigma2: np.ndarray
    best_score: float  # best seen so far, across generations
    mean_score: float


@dataclass
class CEMResult:
    best_weights: np.ndarray
    best_score: float
    history: list[GenerationRecord]
    final: CEMDistribution


def optimize(
    fitness: Callable[[np.ndarray], float],
    mu0,
    sigma2_0,
    rng: SeededRng,
    population: int = 100,
    elite: int = 10,
    generations: int = 50,
    noise: Callable[[int], float] | None = None,
    nonneg: bool = False,
) -> CEMResult:
    """Sample, evaluate, refit; ``generations`` times. Returns the best-ever sample."""
    if generations < 1:
        raise ValueError("need at least one generation")
    if elite > population:
        raise ValueError("elite count exceeds population")
    dist = CEMDistribution(mu0, sigma2_0, 0, noise or NoiseSchedule())
    best_w, best = None, -math.inf
    history = []
    for _ in range(generations):
        pop = sample_population(dist, population, rng, nonneg)
        samples = []
        for w in pop:
            score = float(fitness(w))
            if not math.isfinite(score):
                raise ValueError(f"fitness returned {score} for weights {w.tolist()}")
            samples.append(FitnessSample(w, score))
            if score > best:
                best, best_w = score, w.copy()
        dist = update(dist, samples, elite)
        history.append(
            GenerationRecord(
                dist.generation,
                dist.mu.copy(),
                dist.sigma2.copy(),
                best,
                float(np.mean([s.score for s in samples])),
            )
        )
    return CEMResult(best_w, best, history, dist)


# ---------------------------------------------------------------------------
# AUC fitness
# ---------------------------------------------------------------------------


@dataclass
class EvalSet:
    states: np.ndarray  # (N, D)
    actions: np.ndarray  # (N,)
    labels: dict[str, np.ndarray]  # objective -> 0/1 per row

    def __len__(self):
        return self.actions.shape[0]


class AucFitness:
    """AUC of the fused gain against one objective's labels.

    Q-values at the logged actions are computed once per ensemble snapshot,
    so each fitness call is a weighted sum plus a ranking. ``target`` is an
    objective id or a mapping ``id -> weight`` for a weighted sum of AUCs.
    """

    def __init__(self, ens: QEnsemble, eval_set: EvalSet, target: str | Mapping[str, float]):
        self.targets = {target: 1.0} if isinstance(target, str) else dict(target)
        for t in self.targets:
            y = np.asarray(eval_set.labels[t])
            if y.min() == y.max():
                raise ValueError(f"eval set has a single class for objective {t!r}")
        q = q_values(ens, eval_set.states)
        rows = np.arange(len(eval_set))
        self.qa = {k: v[rows, eval_set.actions] for k, v in q.items()}
        self.labels = eval_set.labels

    def __call__(self, w) -> float:
        g = gain_row(self.qa, w)
        return float(sum(c * cal_auc(self.labels[t], g) for t, c in self.targets.items()))


def auc_fitness(ens: QEnsemble, eval_set: EvalSet, target, w) -> float:
    return AucFitness(ens, eval_set, target)(w)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def write_history(path, history: Sequence[GenerationRecord], names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["generation", *(f"mu_{n}" for n in names), *(f"sigma2_{n}" for n in names), "best_score", "mean_score"])
        for h in history:
            wr.writerow([h.generation, *map(repr, map(float, h.mu)), *map(repr, map(float, h.sigma2)), repr(h.best_score), repr(h.mean_score)])


def read_history(path) -> list[GenerationRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    k = sum(1 for c in header if c.startswith("mu_"))
    return [
        GenerationRecord(
            int(r[0]),
            np.array([float(x) for x in r[1 : 1 + k]]),
            np.array([float(x) for x in r[1 + k : 1 + 2 * k]]),
            float(r[1 + 2 * k]),
            float(r[2 + 2 * k]),
        )
        for r in body
    ]


def write_weights(path, weights: Mapping[str, float], score: float | None = None, **extra) -> None:
    with open(path, "w") as fh:
        json.dump({"weights": {k: float(v) for k, v in weights.items()}, "score": score, **extra}, fh, indent=2)


def read_weights(path) -> dict[str, float]:
    with open(path) as fh:
        return {k: float(v) for k, v in json.load(fh)["weights"].items()}
