import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modrl_ta import dfm, moq, qnet
from modrl_ta.core import SeededRng
from modrl_ta.dfm import CEMDistribution, FitnessSample, NoiseSchedule
from modrl_ta.moq import DEFAULT_OBJECTIVES

from .oracles import pairwise_auc

NO_NOISE = NoiseSchedule(0.0, 1.0, 0.0)


class TestAuc:
    def test_separating(self):
        assert dfm.cal_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0

    def test_all_ties(self):
        assert dfm.cal_auc([0, 1, 0, 1, 1], [3.0] * 5) == 0.5

    def test_hand_computed_four(self):
        # pairs (pos, neg): (0.8,0.3) win, (0.8,0.9) loss, (0.3,0.3) tie, (0.3,0.9) loss
        assert dfm.cal_auc([1, 0, 1, 0], [0.8, 0.3, 0.3, 0.9]) == 0.375

    def test_single_class(self):
        with pytest.raises(ValueError):
            dfm.cal_auc([1, 1, 1], [0.1, 0.2, 0.3])

    def test_random_matches_pairwise(self):
        rng = SeededRng(0)
        y = rng.integers(0, 2, size=1000)
        s = np.round(rng.normal(size=1000), 1)  # plenty of ties
        assert dfm.cal_auc(y, s) == pairwise_auc(y, s)

    @given(
        st.lists(st.tuples(st.booleans(), st.integers(-5, 5)), min_size=2, max_size=60).filter(
            lambda xs: 0 < sum(b for b, _ in xs) < len(xs)
        )
    )
    @settings(max_examples=200, deadline=None)
    def test_property_matches_pairwise(self, pairs):
        y = [int(b) for b, _ in pairs]
        s = [float(v) for _, v in pairs]
        assert dfm.cal_auc(y, s) == pairwise_auc(y, s)


class TestGain:
    q = {"click": np.array([2.0, 1.0, -1.0]), "order": np.array([3.0, 0.0, 5.0])}

    def test_projection(self):
        assert np.array_equal(dfm.gain_row(self.q, [1, 0]), self.q["click"])

    def test_arithmetic(self):
        assert dfm.gain(self.q, 0, [0.5, 0.5]) == 2.5

    def test_zero(self):
        assert np.all(dfm.gain_row(self.q, [0, 0]) == 0)

    def test_mapping_weights(self):
        assert dfm.gain(self.q, 2, {"order": 1.0, "click": 0.0}) == 5.0

    def test_weight_count(self):
        with pytest.raises(ValueError):
            dfm.gain_row(self.q, [1.0])

    def test_fused_action(self):
        ens = moq.create_ensemble(DEFAULT_OBJECTIVES, 2, 3, SeededRng(0), hidden=(2,), shared_depth=0)
        for oid in ens.ids:
            ens.heads[oid].eval = qnet.MLPParams([np.zeros((2, 3))], [self.q[oid].copy()], ())
        assert dfm.fused_action(ens, np.zeros(2), [1, 0]) == 0
        assert dfm.fused_action(ens, np.zeros(2), [0, 1]) == 2


class TestSampling:
    def test_degenerate(self):
        d = CEMDistribution([0.3, 0.7], [0.0, 0.0])
        w = dfm.sample_population(d, 10, SeededRng(0))
        assert np.all(w == [0.3, 0.7])

    def test_mean(self):
        d = CEMDistribution([0.3, -0.2], [0.5, 2.0])
        w = dfm.sample_population(d, 100_000, SeededRng(1))
        se = np.sqrt(d.sigma2 / 100_000)
        assert np.all(np.abs(w.mean(axis=0) - d.mu) < 3 * se)

    def test_deterministic(self):
        d = CEMDistribution([0.3, 0.7], [0.1, 0.1])
        assert np.array_equal(dfm.sample_population(d, 5, SeededRng(2)), dfm.sample_population(d, 5, SeededRng(2)))

    def test_nonneg(self):
        d = CEMDistribution([0.0, 0.0], [1.0, 1.0])
        assert np.all(dfm.sample_population(d, 100, SeededRng(3), nonneg=True) >= 0)

    def test_bad_n(self):
        with pytest.raises(ValueError):
            dfm.sample_population(CEMDistribution([0.0], [1.0]), 0, SeededRng(0))


class TestUpdate:
    def _samples(self, ws, scores):
        return [FitnessSample(np.array(w, float), s) for w, s in zip(ws, scores)]

    def test_identical_elites(self):
        d = CEMDistribution([0.0, 0.0], [1.0, 1.0])
        nd = dfm.update(d, self._samples([[0.3, 0.7]] * 3 + [[9, 9]], [1, 1, 1, 0]), 3)
        assert np.allclose(nd.mu, [0.3, 0.7])
        assert np.allclose(nd.sigma2, d.noise(1))

    def test_two_elites(self):
        d = CEMDistribution([0.0, 0.0], [1.0, 1.0])
        nd = dfm.update(d, self._samples([[0, 2], [2, 0], [5, 5]], [2, 1, 0]), 2)
        assert np.allclose(nd.mu, [1, 1])
        assert np.allclose(nd.sigma2, 1 + d.noise(1))

    def test_zero_noise_exact(self):
        d = CEMDistribution([0.0, 0.0], [1.0, 1.0], noise=NO_NOISE)
        nd = dfm.update(d, self._samples([[0.5, 0.5]] * 2, [0, 0]), 2)
        assert np.all(nd.sigma2 == 0.0)

    def test_elite_zero(self):
        with pytest.raises(ValueError):
            dfm.update(CEMDistribution([0.0], [1.0]), self._samples([[0]], [0]), 0)

    def test_noise_schedule(self):
        z = NoiseSchedule(0.1, 0.5, 0.01)
        assert z(0) == 0.1 and z(1) == 0.05 and z(10) == 0.01


class TestOptimize:
    def test_quadratic(self):
        target = np.array([0.3, 0.7])
        res = dfm.optimize(lambda w: -float(np.sum((w - target) ** 2)), [0.5, 0.5], [0.1, 0.1], SeededRng(0))
        assert np.max(np.abs(res.final.mu - target)) < 1e-2
        assert np.max(np.abs(res.best_weights - target)) < 2e-2

    def test_constant_fitness(self):
        res = dfm.optimize(lambda w: 1.0, [0.5, 0.5], [0.1, 0.1], SeededRng(1), generations=5)
        assert all(h.best_score == 1.0 for h in res.history)
        assert not np.allclose(res.final.mu, [0.5, 0.5])

    def test_single_generation_full_elite(self):
        rng = SeededRng(2)
        pop = dfm.sample_population(CEMDistribution([0.5, 0.5], [0.1, 0.1]), 20, rng.clone())
        res = dfm.optimize(lambda w: float(w.sum()), [0.5, 0.5], [0.1, 0.1], rng, population=20, elite=20, generations=1)
        assert np.allclose(res.final.mu, pop.mean(axis=0))

    def test_best_monotone(self):
        rng = SeededRng(3)
        res = dfm.optimize(lambda w: -abs(w[0] - 2.0) + 0.01 * rng.random(), [0.0], [1.0], SeededRng(4), generations=15)
        best = [h.best_score for h in res.history]
        assert all(b1 >= b0 for b0, b1 in zip(best, best[1:]))

    def test_non_finite(self):
        with pytest.raises(ValueError, match="weights"):
            dfm.optimize(lambda w: math.nan, [0.5], [0.1], SeededRng(0), generations=1)


class TestAucFitness:
    def _setup(self):
        rng = SeededRng(5)
        ens = moq.create_ensemble(DEFAULT_OBJECTIVES, 4, 3, rng, hidden=(6,), shared_depth=1)
        n = 200
        states = rng.normal(size=(n, 4))
        actions = rng.integers(0, 3, size=n)
        labels = {"click": rng.integers(0, 2, size=n), "order": rng.integers(0, 2, size=n)}
        return ens, dfm.EvalSet(states, actions, labels)

    def test_projection(self):
        ens, es = self._setup()
        q = moq.q_values(ens, es.states)["click"][np.arange(len(es)), es.actions]
        assert dfm.auc_fitness(ens, es, "click", [1.0, 0.0]) == dfm.cal_auc(es.labels["click"], q)

    def test_scale_invariant(self):
        ens, es = self._setup()
        f = dfm.AucFitness(ens, es, "order")
        assert f([0.2, 0.6]) == pytest.approx(f([1.0, 3.0]), abs=1e-15)

    def test_weighted_targets(self):
        ens, es = self._setup()
        f = dfm.AucFitness(ens, es, {"click": 0.5, "order": 0.5})
        w = [0.3, 0.4]
        assert f(w) == pytest.approx(0.5 * dfm.auc_fitness(ens, es, "click", w) + 0.5 * dfm.auc_fitness(ens, es, "order", w))

    def test_single_class(self):
        ens, es = self._setup()
        es.labels["click"] = np.ones(len(es), int)
        with pytest.raises(ValueError):
            dfm.AucFitness(ens, es, "click")


def test_artifacts_roundtrip(tmp_path):
    res = dfm.optimize(lambda w: -float(np.sum(w**2)), [0.5, 0.5], [0.1, 0.1], SeededRng(6), generations=4)
    dfm.write_history(tmp_path / "h.csv", res.history, ["click", "order"])
    back = dfm.read_history(tmp_path / "h.csv")
    for a, b in zip(back, res.history):
        assert a.generation == b.generation and np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma2, b.sigma2)
        assert a.best_score == b.best_score and a.mean_score == b.mean_score
    w = {"click": 0.1234567890123, "order": 1 / 3}
    dfm.write_weights(tmp_path / "w.json", w, 0.5)
    assert dfm.read_weights(tmp_path / "w.json") == w
