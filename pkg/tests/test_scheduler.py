import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from logoinsert.core import ObjectClass, seeded_rng
from logoinsert.errors import CriticError, DomainError, IncompleteScoreError
from logoinsert.scheduler import (
    simulate_learner,
    CriticScoreTable,
    SchedulerState,
    recalibrate,
    replay,
    sample_object,
    score_object,
)

from oracles import recalibrate_decimal

# high-precision values for lambda=2, s={A:.30, B:.20, C:.25}; see oracles.recalibrate_decimal
HAND_W = {"A": 0.965936328924845551, "B": 1.035264923841377504, "C": 1.0}
HAND_P = {"A": 0.321849901946607856, "B": 0.344950183826282344, "C": 0.333199914227109800}


def test_hand_example_oracle_agrees_with_frozen_values():
    w, p = recalibrate_decimal({"A": 0.30, "B": 0.20, "C": 0.25}, 2)
    for k in HAND_P:
        assert abs(float(w[k]) - HAND_W[k]) < 1e-17
        assert abs(float(p[k]) - HAND_P[k]) < 1e-17


def test_recalibrate_hand_example():
    state = recalibrate(CriticScoreTable({"A": 0.30, "B": 0.20, "C": 0.25}), 2.0)
    assert state.history[-1].mean_score == pytest.approx(0.25, abs=1e-15)
    for k in HAND_P:
        assert abs(state.weights[k] - HAND_W[k]) < 1e-12
        assert abs(state.probs[k] - HAND_P[k]) < 1e-12
    # the rounded values quoted for the example
    assert [round(state.probs[k], 5) for k in "ABC"] == [0.32185, 0.34495, 0.33320]


def test_equal_scores_uniform():
    state = recalibrate(CriticScoreTable({k: 0.4 for k in "abcde"}), 2.0)
    assert all(p == 0.2 for p in state.probs.values())


def test_lambda_one_uniform():
    rng = np.random.default_rng(0)
    state = recalibrate(CriticScoreTable({f"c{i}": float(s) for i, s in enumerate(rng.uniform(-1, 1, 7))}), 1.0)
    assert all(p == 1 / 7 for p in state.probs.values())


@pytest.mark.parametrize("lam", [0.0, -1.0, float("nan"), float("inf")])
def test_bad_lambda(lam):
    with pytest.raises(DomainError):
        recalibrate(CriticScoreTable({"a": 0.1}), lam)


def test_missing_and_extra_classes():
    with pytest.raises(IncompleteScoreError):
        recalibrate(CriticScoreTable({"a": 0.1}), 2.0, classes=["a", "b"])
    with pytest.raises(IncompleteScoreError):
        recalibrate(CriticScoreTable({"a": 0.1, "z": 0.2}), 2.0, classes=["a"])
    with pytest.raises(IncompleteScoreError):
        CriticScoreTable({})


def test_non_finite_score():
    with pytest.raises(DomainError):
        recalibrate(CriticScoreTable({"a": 0.1, "b": float("nan")}), 2.0)


_scores = st.dictionaries(st.sampled_from([f"c{i}" for i in range(20)]),
                          st.floats(-1, 1, allow_nan=False), min_size=1, max_size=20)
_lambda = st.floats(min_value=1e-3, max_value=1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=300, deadline=None)
@given(_scores, _lambda)
def test_state_invariants(scores, lam):
    state = recalibrate(CriticScoreTable(scores), lam)
    total = math.fsum(state.weights.values())
    assert abs(math.fsum(state.probs.values()) - 1) < 1e-12
    mean = math.fsum(scores.values()) / len(scores)
    for k, s in scores.items():
        assert state.weights[k] > 0
        assert 0 < state.probs[k] <= 1
        assert state.weights[k] == pytest.approx(lam ** (mean - s), rel=1e-12)
        assert state.probs[k] == pytest.approx(state.weights[k] / total, rel=1e-12)


def _random_tables(n_tables: int, seed: int):
    rng = np.random.default_rng(seed)
    for _ in range(n_tables):
        n = int(rng.integers(2, 21))
        yield {f"c{i}": float(s) for i, s in enumerate(rng.uniform(-1, 1, n))}, float(rng.uniform(1.01, 10))


def test_monotonicity_10k_tables():
    for scores, lam in _random_tables(10_000, 1):
        probs = recalibrate(CriticScoreTable(scores), lam).probs
        order = sorted(scores, key=scores.get)
        for lo, hi in zip(order, order[1:]):
            if scores[lo] < scores[hi]:
                assert probs[lo] > probs[hi]


def test_scale_shift_invariance_10k_tables():
    rng = np.random.default_rng(2)
    for scores, lam in _random_tables(10_000, 3):
        c = float(rng.uniform(-0.5, 0.5))
        a = recalibrate(CriticScoreTable(scores), lam)
        b = recalibrate(CriticScoreTable({k: v + c for k, v in scores.items()}), lam)
        for k in scores:
            assert b.weights[k] == pytest.approx(a.weights[k], rel=1e-12)
            assert b.probs[k] == pytest.approx(a.probs[k], rel=1e-12)


def test_sample_object_uniform_frequencies():
    names = [f"c{i}" for i in range(20)]
    state = SchedulerState.uniform(names)
    rng = seeded_rng(0, "sample")
    draws = [sample_object(state, rng) for _ in range(100_000)]
    counts = {k: 0 for k in names}
    for d in draws:
        counts[d] += 1
    # 6 sigma of a Binomial(1e5, 0.05) frequency is 0.0041 < 0.005
    for k in names:
        assert abs(counts[k] / 1e5 - 0.05) <= 0.005


def test_sample_object_degenerate_and_deterministic():
    state = SchedulerState({"A": 1.0}, {"A": 1.0}, 2.0)
    rng = seeded_rng(0, "x")
    assert all(sample_object(state, rng) == "A" for _ in range(100))
    state = recalibrate(CriticScoreTable({"A": 0.3, "B": 0.2, "C": 0.25}), 2.0)
    r1, r2 = seeded_rng(5, "s"), seeded_rng(5, "s")
    assert [sample_object(state, r1) for _ in range(500)] == [sample_object(state, r2) for _ in range(500)]


class _ConstantBackend:
    def generate(self, prompt, steps, rng):
        return np.zeros((8, 8, 3), np.uint8)


class _CosineCritic:
    """Image embedding fixed; text embedding rotated to give prescribed cosines in order."""

    def __init__(self, cosines):
        self.cosines = list(cosines)
        self.calls = 0

    def embed_image(self, image):
        return np.array([1.0, 0.0])

    def embed_text(self, text):
        c = self.cosines[self.calls % len(self.cosines)]
        self.calls += 1
        return np.array([c, math.sqrt(max(0.0, 1 - c * c))])


def _cls():
    return ObjectClass("mug", ("a", "b", "c"))


def test_score_object_identical_and_orthogonal():
    rng = seeded_rng(0, "c")
    assert score_object(_ConstantBackend(), _CosineCritic([1.0]), _cls(), ["a dog"], 3, rng) == 1.0
    assert score_object(_ConstantBackend(), _CosineCritic([0.0]), _cls(), ["a dog"], 3, rng) == 0.0


def test_score_object_mean_of_four():
    s = score_object(_ConstantBackend(), _CosineCritic([0.2, 0.4, 0.3, 0.3]), "mug", ["a dog", "a star"], 4,
                     seeded_rng(0, "c"))
    assert s == pytest.approx(0.30, abs=1e-12)


def test_score_object_reduction_order():
    cos = [0.1, 0.7, -0.3, 0.33333, 0.9, 0.05]
    a = score_object(_ConstantBackend(), _CosineCritic(cos), "mug", ["a dog"], 6, seeded_rng(0, "c"))
    b = score_object(_ConstantBackend(), _CosineCritic(cos[::-1]), "mug", ["a dog"], 6, seeded_rng(0, "c"))
    assert abs(a - b) <= 1e-12


def test_score_object_errors():
    class Broken:
        def embed_image(self, image):
            raise RuntimeError("boom")

        def embed_text(self, text):
            return np.ones(2)

    with pytest.raises(CriticError):
        score_object(_ConstantBackend(), Broken(), "mug", ["a dog"], 1, seeded_rng(0, "c"))
    with pytest.raises(DomainError):
        score_object(_ConstantBackend(), _CosineCritic([1.0]), "mug", ["a dog"], 0, seeded_rng(0, "c"))


def test_replay_reproduces_recorded_probabilities():
    from logoinsert.scheduler import history_record

    rng = np.random.default_rng(0)
    records = []
    for it in (5, 10, 15):
        table = CriticScoreTable({f"c{i}": float(s) for i, s in enumerate(rng.uniform(-1, 1, 6))}, it)
        records.append(history_record(recalibrate(table, 2.0)))
    assert replay(records) == [r["probs"] for r in records]


def test_simulated_learner_basics():
    init = {"a": 0.1, "b": 0.2, "c": 0.3}
    out = simulate_learner(init, 0.001, 300, 10, 2.0, np.random.default_rng(0), sampler="uniform")
    # each draw adds delta to exactly one class; 300 draws cannot push any class to the cap
    assert sum(out.values()) == pytest.approx(sum(init.values()) + 300 * 0.001, abs=1e-9)
    capped = simulate_learner(init, 0.5, 50, 10, 2.0, np.random.default_rng(0))
    assert max(capped.values()) <= 1.0
    with pytest.raises(DomainError):
        simulate_learner(init, 0.01, 10, 5, 2.0, np.random.default_rng(0), sampler="greedy")
    a = simulate_learner(init, 0.01, 200, 10, 2.0, np.random.default_rng(3))
    b = simulate_learner(init, 0.01, 200, 10, 2.0, np.random.default_rng(3))
    assert a == b
