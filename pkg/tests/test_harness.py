import math

import numpy as np
import pytest

from modrl_ta import dfm, env, harness, moq, pda
from modrl_ta.config import ExperimentConfig
from modrl_ta.core import SeededRng, read_transition_log
from modrl_ta.env import EnvConfig, SimItem


def tiny(**over) -> ExperimentConfig:
    base = dict(
        training={"train_steps": 150, "warmup": 20, "batch_size": 16, "epsilon_decay_steps": 150},
        network={"hidden": (16, 16)},
        pda={"log_sessions": 40, "sim_episodes": 60, "mix_stages": ((0, 0.0), (20, 0.1), (60, 0.5), (120, 1.0))},
        cem={"population": 10, "elite": 3, "generations": 3, "eval_sessions": 40, "rollout_episodes": 20},
        env={"n_positions": 5, "horizon": 3, "feature_dim": 24},
        ablation={"eval_episodes": 50},
    )
    for k, v in over.items():
        base.setdefault(k, {}).update(v)
    return ExperimentConfig().replace(**base)


class TestRunExperiment:
    def test_zero_training_steps(self):
        row = harness.run_experiment(tiny(training={"train_steps": 0}))
        assert math.isfinite(row.ctr_reward) and math.isfinite(row.cvr_reward)
        assert -3 <= row.ctr_reward <= 3

    def test_deterministic(self):
        a = harness.run_experiment(tiny())
        b = harness.run_experiment(tiny())
        assert a == b
        assert harness.run_experiment(tiny(experiment={"seed": 1})) != a

    @pytest.mark.parametrize("mode", ["sim_only", "real_only", "progressive"])
    def test_data_modes(self, mode):
        row = harness.run_experiment(tiny(ablation={"data_mode": mode}, cem={"fitness": "rollout"}))
        assert set(row.weights) == {"click", "order"}

    def test_ablation_rows(self):
        rows = harness.run_ablation(tiny())
        assert [r.label for r in rows] == ["morl-fr", "sim-only", "real-only", "no-cem", "full"]
        assert rows[0].weights == {moq.FUSED_ID: 1.0}
        assert rows[3].weights == {"click": 0.5, "order": 0.5}

    def test_cache_matches_fresh_run(self):
        cfg = tiny(cem={"fitness": "rollout"})
        fresh = harness.run_experiment(cfg)
        cache = {}
        harness.run_experiment(cfg.replace(ablation={"use_cem": False}), cache=cache)
        assert harness.run_experiment(cfg, cache=cache) == fresh

    def test_artifacts_roundtrip(self, tmp_path):
        cfg = tiny()
        row = harness.run_experiment(cfg, tmp_path)
        assert harness.read_metrics(tmp_path / "metrics.csv") == [row]
        ens = moq.load_ensemble(tmp_path / "ensemble.npz")
        assert dfm.read_weights(tmp_path / "weights.json") == row.weights
        assert len(dfm.read_history(tmp_path / "cem_history.csv")) == cfg.cem.generations
        sim, ids, _ = read_transition_log(tmp_path / "transitions_sim.log")
        assert len(sim) == cfg.pda.sim_episodes * cfg.env.horizon and ids == ("click", "order")
        real, _, _ = read_transition_log(tmp_path / "transitions_real.log")
        assert len(real) == cfg.training.train_steps
        assert len(pda.read_table(tmp_path / "table.csv")) == cfg.env.n_positions
        # reloaded ensemble scores the same
        ev = harness.evaluate_policy(ens, row.weights, cfg.env_config, cfg.ablation.eval_episodes, SeededRng(0, harness.EVALUATION))
        assert ev.ctr_reward == row.ctr_reward

    def test_stage_tagged_error(self):
        cfg = tiny(ablation={"data_mode": "sim_only"}, pda={"sim_episodes": 0})
        with pytest.raises(harness.StageError) as info:
            harness.run_experiment(cfg)
        assert info.value.stage == "train" and info.value.exit_code == harness.STAGE_EXIT["train"]


class TestEvaluatePolicy:
    def test_degenerate_env(self):
        items = tuple(SimItem(f"i{k}", 1.0, 0.5, k, k < 2) for k in range(3))
        ec = EnvConfig(n_positions=3, horizon=2, feature_dim=16, bias=(1.0, 1.0, 1.0), items=items)
        ens = moq.create_ensemble(ec.objectives, ec.layout.dim, 3, SeededRng(0), hidden=(4,))
        ev = harness.evaluate_policy(ens, [0.5, 0.5], ec, 30, SeededRng(1))
        assert ev.ctr_reward == 2.0

    def test_weights_only_change_actions(self):
        ec = EnvConfig(n_positions=5, horizon=3, feature_dim=24, fatigue=0.5)
        ens = moq.create_ensemble(ec.objectives, ec.layout.dim, 5, SeededRng(3), hidden=(8,))
        a = harness.evaluate_policy(ens, [1.0, 0.0], ec, 200, SeededRng(3), return_trace=True)
        b = harness.evaluate_policy(ens, [0.0, 1.0], ec, 200, SeededRng(3), return_trace=True)
        assert np.array_equal(a.seeds, b.seeds)
        scaled = harness.evaluate_policy(ens, [2.0, 0.0], ec, 200, SeededRng(3), return_trace=True)
        assert np.array_equal(scaled.actions, a.actions) and scaled.returns == a.returns
        same = np.all(a.actions == b.actions, axis=1)
        assert not same.all() and same.any()
        # episodes with identical action sequences book identical rewards
        ra = env.rollout_batch(env.SessionBatch.prepare(ec, a.seeds[same]), lambda X, t: a.actions[same, t])
        rb = env.rollout_batch(env.SessionBatch.prepare(ec, b.seeds[same]), lambda X, t: b.actions[same, t])
        assert all(np.array_equal(ra.rewards[k], rb.rewards[k]) for k in ra.rewards)

    def test_replay_oracle(self):
        ec = EnvConfig(n_positions=5, horizon=3, feature_dim=24, fatigue=0.3)
        ens = moq.create_ensemble(ec.objectives, ec.layout.dim, 5, SeededRng(4), hidden=(8,))
        ev = harness.evaluate_policy(ens, [0.4, 0.6], ec, 100, SeededRng(5), return_trace=True)
        replay = harness.replay_trace(ec, ev.seeds, ev.actions)
        assert replay["click"] == pytest.approx(ev.ctr_reward, abs=1e-12)
        assert replay["order"] == pytest.approx(ev.cvr_reward, abs=1e-12)

    def test_episodes_positive(self):
        ec = EnvConfig(n_positions=5, horizon=3, feature_dim=24)
        ens = moq.create_ensemble(ec.objectives, ec.layout.dim, 5, SeededRng(4), hidden=(8,))
        with pytest.raises(ValueError):
            harness.evaluate_policy(ens, [0.5, 0.5], ec, 0, SeededRng(0))


def test_metrics_row_rejects_nan():
    with pytest.raises(ValueError):
        harness.MetricsRow("r", "l", math.nan, 0.0, 0.0, {}, {})


def test_summary_lists_rows():
    rows = [harness.MetricsRow("a-s0", "a", -1.0, -2.0, -3.0, {}, {"click": 0.5})]
    assert "a-s0" in harness.summary(rows)
