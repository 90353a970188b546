"""Experiment driver: cold start, ensemble training, weight search, evaluation.

``run_experiment`` chains the stages for one configuration and returns a
``MetricsRow``; ``run_ablation`` runs the five-row comparison (fused-reward
baseline, simulated-only, real-only, fixed weights, full pipeline). Every
random draw comes from a named stream of the experiment seed, so a
configuration reproduces its metrics exactly (wall-clock aside).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import dfm, env, pda
from .config import CemSection, ExperimentConfig, dumps
from .core import ReplayBuffer, SeededRng, Source, Transition, write_transition_log
from .moq import (
    FUSED_ID,
    LinearEpsilon,
    ObjectiveSpec,
    QEnsemble,
    RewardEvent,
    create_ensemble,
    fused_reward_baseline,
    q_values,
    save_ensemble,
    train_step,
)
from .qnet import NonFiniteLoss, make_optimizer

log = logging.getLogger(__name__)

# rng streams of the experiment seed
LOGS, SIM, INIT, TRAIN, TRAIN_ENV, EVAL_SET, CEM, CEM_ROLLOUT, EVALUATION = range(1, 10)

STAGE_EXIT = {"config": 2, "logs": 3, "simulate": 4, "train": 5, "cem": 6, "evaluate": 7, "io": 8}


class StageError(RuntimeError):
    """Failure inside one pipeline stage; ``exit_code`` is what the CLI returns."""

    def __init__(self, stage: str, msg: str):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage
        self.exit_code = STAGE_EXIT.get(stage, 1)


class _stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, tp, exc, tb):
        if exc is not None and not isinstance(exc, StageError) and isinstance(exc, Exception):
            raise StageError(self.name, f"{type(exc).__name__}: {exc}") from exc
        return False


@dataclass
class MetricsRow:
    run_id: str
    label: str
    ctr_reward: float  # mean cumulative click-objective return per episode
    cvr_reward: float  # mean cumulative order-objective return per episode
    combined: float  # metric-weighted sum of the two
    auc: dict[str, float]
    weights: dict[str, float]
    wall_clock: float = field(default=0.0, compare=False)

    def __post_init__(self):
        for name in ("ctr_reward", "cvr_reward", "combined"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def make_logs(cfg: ExperimentConfig):
    """Offline logs under the incumbent ranking: ``(records, sessions)``."""
    with _stage("logs"):
        return env.log_sessions(cfg.env_config, cfg.pda.log_sessions, SeededRng(cfg.experiment.seed, LOGS))


def build_table(cfg: ExperimentConfig, records) -> pda.PositionCTRTable:
    with _stage("logs"):
        return pda.build_table(records, cfg.env.n_positions, cfg.pda.alpha)


def simulate(cfg: ExperimentConfig, sessions, table) -> list[Transition]:
    with _stage("simulate"):
        return pda.simulate_transitions(
            sessions, table, SeededRng(cfg.experiment.seed, SIM), cfg.pda.sim_episodes, cfg.objective_specs
        )


def _head_specs(cfg: ExperimentConfig) -> tuple[ObjectiveSpec, ...]:
    if cfg.ablation.baseline:
        # the reward event of the fused head is never consulted
        return (ObjectiveSpec(FUSED_ID, RewardEvent.CLICK),)
    return cfg.objective_specs


def policy_weights(cfg: ExperimentConfig) -> dict[str, float]:
    """Fusion weights used to act before any search has run."""
    return {FUSED_ID: 1.0} if cfg.ablation.baseline else dict(cfg.ablation.fixed_weights)


def new_ensemble(cfg: ExperimentConfig) -> QEnsemble:
    n = cfg.network
    return create_ensemble(
        _head_specs(cfg),
        cfg.env_config.layout.dim,
        cfg.env.n_positions,
        SeededRng(cfg.experiment.seed, INIT),
        n.hidden,
        n.shared_depth,
        n.activation,
        cfg.training.sync_period,
    )


@dataclass
class TrainResult:
    ensemble: QEnsemble
    real: list[Transition]
    losses: list[float]
    grad_steps: int


def train(cfg: ExperimentConfig, sim: Sequence[Transition]) -> TrainResult:
    """Interleave environment steps and gradient steps for ``train_steps`` iterations.

    ``sim_only`` never touches the environment; ``real_only`` ignores the
    simulated data; ``progressive`` mixes both by the schedule. Gradient steps
    start once the source a batch would be drawn from has reached warmup.
    """
    t, a = cfg.training, cfg.ablation
    ec = cfg.env_config
    ens = new_ensemble(cfg)
    heads = ens.ids
    baseline = a.baseline
    fuse = (lambda ts: fused_reward_baseline(ts, a.baseline_weights)) if baseline else (lambda ts: list(ts))

    sim_buf = ReplayBuffer(heads, capacity=max(1, len(sim)), warmup_size=1, strict_rewards=not baseline)
    if a.data_mode != "real_only" and sim:
        sim_buf.extend(fuse(sim))
    real_buf = ReplayBuffer(heads, t.replay_capacity, t.warmup, strict_rewards=not baseline)
    schedule = cfg.mix_schedule
    eps = LinearEpsilon(t.epsilon_start, t.epsilon_end, t.epsilon_decay_steps)
    opt = make_optimizer(t.optimizer, t.lr)
    rng = SeededRng(cfg.experiment.seed, TRAIN)
    seeds = SeededRng(cfg.experiment.seed, TRAIN_ENV)
    w = policy_weights(cfg)

    real: list[Transition] = []
    losses: list[float] = []
    grad_steps = 0
    sess = state = step_rng = None
    with _stage("train"):
        if a.data_mode == "sim_only" and len(sim_buf) == 0:
            raise ValueError("sim_only training needs simulated transitions")
        for it in range(t.train_steps):
            if a.data_mode != "sim_only":
                if sess is None or sess.done:
                    seed = int(seeds.integers(0, 2**63))
                    sess, state = env.reset(ec, seed)
                    step_rng = SeededRng(seed, env.STEP_STREAM)
                if rng.random() < eps(it):
                    act = int(rng.integers(0, ec.n_positions))
                else:
                    act = int(np.argmax(dfm.gain_row(q_values(ens, state), w)))
                res = env.step(sess, act, step_rng)
                tr = Transition(state, act, res.rewards, res.state, res.terminal, Source.REAL)
                real.append(tr)
                real_buf.extend(fuse([tr]))
                state = res.state

            if a.data_mode == "sim_only":
                batch = sim_buf.sample(t.batch_size, rng)
            elif a.data_mode == "real_only" or len(sim_buf) == 0:
                if not real_buf.ready:
                    continue
                batch = real_buf.sample(t.batch_size, rng)
            else:
                f = schedule.fraction(len(real_buf))
                if f > 0 and not real_buf.ready:
                    f = 0.0
                if f == 0.0:
                    batch = sim_buf.sample(t.batch_size, rng)
                else:
                    batch = pda.mix_batch(sim_buf, real_buf, schedule, t.batch_size, rng)
            try:
                r = train_step(ens, batch, t.gamma, t.lr, optimizer=opt)
            except NonFiniteLoss as exc:
                raise StageError("train", f"iteration {it}: {exc}") from exc
            losses.append(r.total)
            grad_steps += 1
    return TrainResult(ens, real, losses, grad_steps)


def build_eval_set(cfg: ExperimentConfig) -> dfm.EvalSet:
    """Held-out sessions under uniformly random allocation, labelled per objective."""
    ec = cfg.env_config
    rng = SeededRng(cfg.experiment.seed, EVAL_SET)
    states, actions = [], []
    labels: dict[str, list[int]] = {o: [] for o in ec.objective_ids}
    with _stage("cem"):
        for _ in range(cfg.cem.eval_sessions):
            seed = int(rng.integers(0, 2**63))
            pick = SeededRng(seed, 2)
            for s, act, res in env.run_episode(ec, seed, lambda _se, _s: int(pick.integers(0, ec.n_positions))):
                states.append(s.values)
                actions.append(act)
                for o, r in res.rewards.items():
                    labels[o].append(int(r > 0))
    return dfm.EvalSet(np.array(states), np.array(actions, dtype=np.int64), {k: np.array(v) for k, v in labels.items()})


def _combined(returns: Mapping[str, float], metric: Mapping[str, float]) -> float:
    return float(sum(c * returns[k] for k, c in metric.items()))


def greedy_fused_policy(ens: QEnsemble, weights):
    def policy(X, _t):
        return np.argmax(dfm.gain_row(q_values(ens, X), weights), axis=1)

    return policy


class RolloutFitness:
    """Mean metric-weighted return of the greedy fused policy on fixed sessions."""

    def __init__(self, ens: QEnsemble, batch: env.SessionBatch, metric: Mapping[str, float]):
        self.ens, self.batch, self.metric = ens, batch, dict(metric)

    def __call__(self, w) -> float:
        ret = env.rollout_batch(self.batch, greedy_fused_policy(self.ens, w)).returns()
        return _combined({k: float(v.mean()) for k, v in ret.items()}, self.metric)


def _episode_seeds(rng: SeededRng, n: int) -> np.ndarray:
    return rng.integers(0, 2**63, size=n).astype(np.uint64)


def search_weights(cfg: ExperimentConfig, ens: QEnsemble, eval_set: dfm.EvalSet | None = None) -> dfm.CEMResult:
    c = cfg.cem
    ids = ens.ids
    with _stage("cem"):
        if c.fitness == "auc":
            fit = dfm.AucFitness(ens, eval_set if eval_set is not None else build_eval_set(cfg), c.target)
        else:
            seeds = _episode_seeds(SeededRng(cfg.experiment.seed, CEM_ROLLOUT), c.rollout_episodes)
            fit = RolloutFitness(ens, env.SessionBatch.prepare(cfg.env_config, seeds), cfg.ablation.metric_weights)
        return dfm.optimize(
            fit,
            np.full(len(ids), c.init_mu),
            np.full(len(ids), c.init_sigma2),
            SeededRng(cfg.experiment.seed, CEM),
            c.population,
            c.elite,
            c.generations,
            dfm.NoiseSchedule(c.noise_z0, c.noise_decay, c.noise_floor),
            c.nonneg,
        )


@dataclass
class PolicyEvaluation:
    ctr_reward: float
    cvr_reward: float
    returns: dict[str, float]
    seeds: np.ndarray | None = None
    actions: np.ndarray | None = None  # (episodes, T) when a trace was requested


def evaluate_policy(
    ens: QEnsemble,
    weights,
    env_config: env.EnvConfig,
    episodes: int,
    rng: SeededRng,
    return_trace: bool = False,
) -> PolicyEvaluation:
    """Mean undiscounted per-objective return of the greedy fused policy."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    seeds = _episode_seeds(rng, episodes)
    out = env.rollout_batch(env.SessionBatch.prepare(env_config, seeds), greedy_fused_policy(ens, weights))
    means = {k: float(v.mean()) for k, v in out.returns().items()}
    return PolicyEvaluation(
        means.get("click", math.nan),
        means.get("order", math.nan),
        means,
        seeds if return_trace else None,
        out.actions if return_trace else None,
    )


def replay_trace(env_config: env.EnvConfig, seeds, actions) -> dict[str, float]:
    """Re-simulate recorded action sequences one session at a time."""
    totals: dict[str, float] = {o: 0.0 for o in env_config.objective_ids}
    for seed, acts in zip(seeds, actions):
        it = iter(acts)
        for _s, _a, res in env.run_episode(env_config, int(seed), lambda _se, _st: int(next(it))):
            for k, r in res.rewards.items():
                totals[k] += r
    return {k: v / len(seeds) for k, v in totals.items()}


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------


def _training_key(cfg: ExperimentConfig) -> str:
    """Config text with every field that cannot influence training blanked out."""
    neutral = cfg.replace(
        experiment={"label": ""},
        cem=dataclasses.asdict(CemSection()),
        ablation={"use_cem": False, "metric_weights": dict(cfg.ablation.fixed_weights), "eval_episodes": 1},
    )
    return dumps(neutral)


def run_experiment(cfg: ExperimentConfig, out_dir=None, cache: dict | None = None) -> MetricsRow:
    """One full run. ``cache`` lets runs with identical training share it."""
    t0 = time.perf_counter()
    seed, label = cfg.experiment.seed, cfg.experiment.label
    key = _training_key(cfg) if cache is not None else None
    if key is not None and key in cache:
        records, table, sim, tr = cache[key]
    else:
        records, sessions = make_logs(cfg)
        table = build_table(cfg, records)
        sim = simulate(cfg, sessions, table) if cfg.ablation.data_mode != "real_only" else []
        tr = train(cfg, sim)
        if key is not None:
            cache[key] = (records, table, sim, tr)
    ens = tr.ensemble
    log.info("%s: %d gradient steps, %d real transitions", label, tr.grad_steps, len(tr.real))

    eval_set = build_eval_set(cfg)
    result = None
    if cfg.ablation.use_cem and not cfg.ablation.baseline:
        result = search_weights(cfg, ens, eval_set)
        weights = dict(zip(ens.ids, map(float, result.best_weights)))
    else:
        weights = policy_weights(cfg)

    with _stage("evaluate"):
        ev = evaluate_policy(ens, weights, cfg.env_config, cfg.ablation.eval_episodes, SeededRng(seed, EVALUATION))
        qa = q_values(ens, eval_set.states)
        rows = np.arange(len(eval_set))
        g = dfm.gain_row({k: v[rows, eval_set.actions] for k, v in qa.items()}, weights)
        auc = {}
        for o, y in eval_set.labels.items():
            auc[o] = dfm.cal_auc(y, g) if 0 < y.sum() < y.shape[0] else math.nan
        row = MetricsRow(
            f"{label}-s{seed}",
            label,
            ev.ctr_reward,
            ev.cvr_reward,
            _combined(ev.returns, cfg.ablation.metric_weights),
            auc,
            weights,
            time.perf_counter() - t0,
        )

    if out_dir is not None:
        with _stage("io"):
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            ids = cfg.env_config.objective_ids
            layout = cfg.env_config.layout
            (out / "config.ini").write_text(dumps(cfg))
            pda.write_logs(out / "logs.csv", records)
            pda.write_table(out / "table.csv", table)
            write_transition_log(out / "transitions_sim.log", sim, ids, layout)
            write_transition_log(out / "transitions_real.log", tr.real, ids, layout)
            save_ensemble(out / "ensemble.npz", ens)
            if result is not None:
                dfm.write_history(out / "cem_history.csv", result.history, ens.ids)
            dfm.write_weights(out / "weights.json", weights, result.best_score if result else None)
            write_metrics(out / "metrics.csv", [row])
    return row


ABLATION_ROWS = ("morl-fr", "sim-only", "real-only", "no-cem", "full")


def ablation_configs(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    over = {
        "morl-fr": {"baseline": True, "use_cem": False, "data_mode": "progressive"},
        "sim-only": {"baseline": False, "use_cem": True, "data_mode": "sim_only"},
        "real-only": {"baseline": False, "use_cem": True, "data_mode": "real_only"},
        "no-cem": {"baseline": False, "use_cem": False, "data_mode": "progressive"},
        "full": {"baseline": False, "use_cem": True, "data_mode": "progressive"},
    }
    return [cfg.replace(experiment={"label": name}, ablation=over[name]) for name in ABLATION_ROWS]


def run_ablation(cfg: ExperimentConfig, out_dir=None) -> list[MetricsRow]:
    rows, cache = [], {}
    for sub in ablation_configs(cfg):
        sub_dir = None if out_dir is None else Path(out_dir) / sub.experiment.label
        rows.append(run_experiment(sub, sub_dir, cache))
    if out_dir is not None:
        with _stage("io"):
            write_metrics(Path(out_dir) / "metrics.csv", rows)
    return rows


# ---------------------------------------------------------------------------
# Metrics files
# ---------------------------------------------------------------------------

METRIC_FIELDS = ["run_id", "label", "ctr_reward", "cvr_reward", "combined", "auc", "weights", "wall_clock"]


def write_metrics(path, rows: Sequence[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(METRIC_FIELDS)
        for r in rows:
            wr.writerow(
                [
                    r.run_id,
                    r.label,
                    repr(r.ctr_reward),
                    repr(r.cvr_reward),
                    repr(r.combined),
                    json.dumps(r.auc),
                    json.dumps(r.weights),
                    repr(r.wall_clock),
                ]
            )


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected header {rd.fieldnames}")
        return [
            MetricsRow(
                r["run_id"],
                r["label"],
                float(r["ctr_reward"]),
                float(r["cvr_reward"]),
                float(r["combined"]),
                json.loads(r["auc"]),
                json.loads(r["weights"]),
                float(r["wall_clock"]),
            )
            for r in rd
        ]


def summary(rows: Sequence[MetricsRow]) -> str:
    lines = [f"{'run':<18} {'CTR reward':>11} {'CVR reward':>11} {'combined':>10}  weights"]
    for r in rows:
        w = ", ".join(f"{k}={v:.3f}" for k, v in r.weights.items())
        lines.append(f"{r.run_id:<18} {r.ctr_reward:>11.4f} {r.cvr_reward:>11.4f} {r.combined:>10.4f}  {w}")
    return "\n".join(lines)
