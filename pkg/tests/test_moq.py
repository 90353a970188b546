import itertools

import numpy as np
import pytest

from modrl_ta import moq, qnet
from modrl_ta.core import SeededRng, SliceLayout, Source, StateVector, Transition
from modrl_ta.moq import DEFAULT_OBJECTIVES, FeedbackEvent, ObjectiveSpec, RewardEvent

from .test_qnet import fd_check

CLICK, ORDER = DEFAULT_OBJECTIVES


def _batch(n, dim, A, rng, ids=("click", "order")):
    layout = SliceLayout.from_lengths({"x": dim})
    return [
        Transition(
            StateVector(rng.normal(size=dim), layout),
            int(rng.integers(0, A)),
            {k: float(rng.gen.choice([-1.0, 1.0])) for k in ids},
            StateVector(rng.normal(size=dim), layout),
            bool(i % 4 == 0),
            Source.REAL,
        )
        for i in range(n)
    ]


class TestReward:
    def test_click_objective(self):
        assert moq.reward(CLICK, FeedbackEvent(True, False)) == 1.0
        assert moq.reward(CLICK, FeedbackEvent(False, False)) == -1.0

    def test_order_objective(self):
        assert moq.reward(ORDER, FeedbackEvent(True, False)) == -1.0
        assert moq.reward(ORDER, FeedbackEvent(True, True)) == 1.0

    def test_funnel(self):
        with pytest.raises(ValueError):
            FeedbackEvent(False, True)

    def test_click_without_view(self):
        with pytest.raises(ValueError):
            FeedbackEvent(True, False, page_view=False)

    def test_epsilon_schedule(self):
        eps = moq.LinearEpsilon(1.0, 0.05, 100)
        assert eps(0) == 1.0 and eps(100) == pytest.approx(0.05) and eps(10_000) == pytest.approx(0.05)
        assert eps(50) == pytest.approx(0.525)


class TestEnsemble:
    def test_zero_init_zero_q(self):
        ens = moq.create_ensemble(DEFAULT_OBJECTIVES, 4, 3, SeededRng(0), hidden=(5, 5))
        for p in ens.parameters():
            p[...] = 0.0
        q = moq.q_values(ens, np.ones(4))
        assert all(np.all(v == 0) for v in q.values())

    def test_composition(self):
        rng = SeededRng(1)
        ens = moq.create_ensemble(DEFAULT_OBJECTIVES, 4, 3, rng, hidden=(6, 5), shared_depth=1)
        x = rng.normal(size=4)
        f = qnet.forward(ens.trunk, x)
        for oid, q in moq.q_values(ens, x).items():
            assert np.allclose(q, qnet.forward(ens.heads[oid].eval, f))

    def test_loop_oracle_3dim(self):
        from .test_qnet import naive_forward

        rng = SeededRng(2)
        ens = moq.create_ensemble(DEFAULT_OBJECTIVES, 3, 2, rng, hidden=(4,), shared_depth=1)
        x = rng.normal(size=3)
        f = naive_forward(ens.trunk, x)
        for oid, q in moq.q_values(ens, x).items():
            assert np.allclose(q, naive_forward(ens.heads[oid].eval, f), atol=1e-12)

    def test_no_trunk(self):
        ens = moq.create_ensemble(DEFAULT_OBJECTIVES, 4, 3, SeededRng(0), hidden=(5,), shared_depth=0)
        assert ens.trunk is None and ens.state_dim == 4

    def test_duplicate_objectives(self):
        with pytest.raises(ValueError):
            moq.create_ensemble((CLICK, CLICK), 4, 3, SeededRng(0))


class TestTraining:
    def test_single_objective_total(self):
        rng = SeededRng(3)
        ens = moq.create_ensemble((CLICK,), 4, 3, rng, hidden=(5, 5))
        r = moq.train_step(ens, _batch(8, 4, 3, rng, ("click",)), 0.9, 1e-3)
        assert r.total == r.losses["click"]

    def test_symmetric_heads(self):
        rng = SeededRng(4)
        ens = moq.create_ensemble(DEFAULT_OBJECTIVES, 4, 3, rng, hidden=(5, 5))
        ens.heads["order"] = qnet.QNetwork(ens.heads["click"].eval.copy(), ens.heads["click"].target.copy())
        batch = _batch(8, 4, 3, rng)
        batch = [Transition(t.state, t.action, {"click": t.rewards["click"], "order": t.rewards["click"]}, t.next_state, t.terminal) for t in batch]
        r = moq.train_step(ens, batch, 0.9, 1e-3)
        assert r.losses["click"] == r.losses["order"]

    @pytest.mark.parametrize("seed,depth", list(itertools.product(range(3), (1, 2))))
    def test_trunk_gradient_fd(self, seed, depth):
        rng = SeededRng(seed)
        ens = moq.create_ensemble(DEFAULT_OBJECTIVES, 4, 3, rng, hidden=(5, 4, 3)[: depth + 1], shared_depth=depth, activation="tanh")
        batch = _batch(6, 4, 3, rng)
        targets = moq.compute_targets(ens, batch, 0.9)
        _, head_grads, trunk_grad = moq.loss_and_grads(ens, batch, targets)
        err = fd_check(lambda: moq.total_loss(ens, batch, targets), ens.trunk.arrays(), trunk_grad.arrays())
        assert err < 1e-4
        for oid in ens.ids:
            g = head_grads[oid]
            err = fd_check(lambda: moq.total_loss(ens, batch, targets), ens.heads[oid].eval.arrays(), g.arrays())
            assert err < 1e-4

    def test_sync_refreshes_target_trunk(self):
        rng = SeededRng(5)
        ens = moq.create_ensemble(DEFAULT_OBJECTIVES, 4, 3, rng, hidden=(5, 5), sync_period=2)
        batch = _batch(8, 4, 3, rng)
        r1 = moq.train_step(ens, batch, 0.9, 1e-2)
        assert not r1.synced
        assert not np.array_equal(ens.trunk.weights[0], ens.target_trunk.weights[0])
        r2 = moq.train_step(ens, batch, 0.9, 1e-2)
        assert r2.synced
        assert np.array_equal(ens.trunk.weights[0], ens.target_trunk.weights[0])

    def test_freeze_trunk_new_head(self):
        rng = SeededRng(6)
        ens = moq.create_ensemble((CLICK,), 4, 3, rng, hidden=(5, 5))
        trunk = ens.trunk.copy()
        click = ens.heads["click"].eval.copy()
        ens.add_objective(ORDER, rng.spawn(9), hidden=(5,))
        moq.train_step(ens, _batch(8, 4, 3, rng), 0.9, 1e-2, heads=["order"], freeze_trunk=True)
        assert all(np.array_equal(a, b) for a, b in zip(trunk.arrays(), ens.trunk.arrays()))
        assert all(np.array_equal(a, b) for a, b in zip(click.arrays(), ens.heads["click"].eval.arrays()))

    def test_learns_constant_reward(self):
        rng = SeededRng(7)
        ens = moq.create_ensemble((CLICK,), 3, 2, rng, hidden=(8,))
        layout = SliceLayout.from_lengths({"x": 3})
        s = StateVector(np.ones(3), layout)
        batch = [Transition(s, a, {"click": 1.0}, s, True) for a in (0, 1)]
        for _ in range(500):
            moq.train_step(ens, batch, 0.9, 0.05)
        assert np.allclose(moq.q_values(ens, s)["click"], 1.0, atol=1e-3)


class TestActing:
    def _ens(self, row):
        ens = moq.create_ensemble((CLICK,), 2, 3, SeededRng(0), hidden=(2,), shared_depth=0)
        ens.heads["click"].eval = qnet.MLPParams([np.zeros((2, 3))], [np.array(row, float)], ())
        return ens

    def test_greedy(self):
        assert int(moq.act_epsilon_greedy(self._ens([0, 3, 1]), "click", np.zeros(2), 0.0, SeededRng(0))) == 1

    def test_tie(self):
        assert int(moq.act_epsilon_greedy(self._ens([5, 5, 0]), "click", np.zeros(2), 0.0, SeededRng(0))) == 0

    def test_uniform_exploration(self):
        ens, rng = self._ens([0, 3, 1]), SeededRng(1)
        x = np.zeros(2)
        counts = np.bincount([int(moq.act_epsilon_greedy(ens, "click", x, 1.0, rng)) for _ in range(100_000)], minlength=3)
        assert np.all(np.abs(counts / 100_000 - 1 / 3) < 0.02)


class TestFusedBaseline:
    def _t(self, rc, ro):
        layout = SliceLayout.from_lengths({"x": 2})
        s = StateVector(np.zeros(2), layout)
        return Transition(s, 0, {"click": rc, "order": ro}, s, False)

    def test_projection(self):
        out = moq.fused_reward_baseline([self._t(1.0, -1.0), self._t(-1.0, -1.0)], {"click": 1.0, "order": 0.0})
        assert [t.rewards[moq.FUSED_ID] for t in out] == [1.0, -1.0]

    def test_equal_weights(self):
        out = moq.fused_reward_baseline([self._t(1.0, -1.0)], {"click": 0.5, "order": 0.5})
        assert out[0].rewards[moq.FUSED_ID] == 0.0

    def test_zero_weights(self):
        out = moq.fused_reward_baseline([self._t(1.0, 1.0)], {"click": 0.0, "order": 0.0})
        assert out[0].rewards[moq.FUSED_ID] == 0.0

    def test_empty_weights(self):
        with pytest.raises(ValueError):
            moq.fused_reward_baseline([self._t(1.0, 1.0)], {})


def test_checkpoint_roundtrip(tmp_path):
    rng = SeededRng(8)
    ens = moq.create_ensemble(DEFAULT_OBJECTIVES, 4, 3, rng, hidden=(5, 5), sync_period=7)
    moq.train_step(ens, _batch(8, 4, 3, rng), 0.9, 1e-2)
    moq.save_ensemble(tmp_path / "e.npz", ens)
    back = moq.load_ensemble(tmp_path / "e.npz")
    assert back.ids == ens.ids
    assert all(np.array_equal(a, b) for a, b in zip(back.parameters(), ens.parameters()))
    assert back.heads["click"].steps_since_sync == 1 and back.heads["click"].sync_period == 7
    assert np.array_equal(back.target_trunk.weights[0], ens.target_trunk.weights[0])


def test_objective_spec_is_data():
    assert ObjectiveSpec("gmv", RewardEvent.ORDER).reward_event is RewardEvent.ORDER
