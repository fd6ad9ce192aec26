import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selfadapt.metrics import ScoredSet, auc, evaluate, hter, roc
from oracles import brute_roc, exhaustive_hter, mann_whitney


def random_instance(rng, n=None):
    n = n or int(rng.integers(2, 30))
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    # coarse grid so ties are common
    scores = rng.integers(0, 8, size=n) / 8.0 if rng.random() < 0.5 else rng.random(n)
    return scores, labels


def test_perfect_separation():
    s = ScoredSet([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    _, far, tpr = roc(s)
    assert any(f == 0.0 and t == 1.0 for f, t in zip(far, tpr))
    assert auc(s) == 1.0
    assert hter(s)[0] == 0.0


def test_inverted_scores():
    assert auc(ScoredSet([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])) == 0.0


def test_all_equal_scores_two_points():
    thr, far, tpr = roc(ScoredSet([0.5] * 6, [1, 0, 1, 0, 1, 0]))
    assert len(thr) == 2
    assert (far[0], tpr[0], far[1], tpr[1]) == (0.0, 0.0, 1.0, 1.0)


def test_hter_definition_example():
    # 10 spoof with scores 0..9, 5 live; tau = 9 accepts one spoof (FAR 0.1)
    # and rejects one live (FRR 0.2)
    scores = list(range(10)) + [8.5, 9, 10, 11, 12]
    labels = [0] * 10 + [1] * 5
    rep = evaluate(np.array(scores, dtype=float), labels)
    assert rep.threshold == 9.0
    assert (rep.far, rep.frr) == pytest.approx((0.1, 0.2))
    assert rep.hter == pytest.approx(0.15)


def test_single_class_rejected():
    for fn in (roc, auc, hter):
        with pytest.raises(ValueError):
            fn(ScoredSet([0.1, 0.2], [1, 1]))
    with pytest.raises(ValueError):
        ScoredSet([0.1, 0.2], [1, 2])


def test_roc_matches_brute_force_50():
    rng = np.random.default_rng(0)
    s, y = random_instance(rng, 50)
    thr, far, tpr = roc(ScoredSet(s, y))
    ref = brute_roc(s, y)
    assert len(ref) == len(thr)
    for (t, a, b), t2, a2, b2 in zip(ref, thr, far, tpr):
        assert (t, a, b) == (t2, a2, b2)


def test_thousand_instances_against_oracles():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        s, y = random_instance(rng)
        sc = ScoredSet(s, y)
        assert abs(auc(sc) - mann_whitney(s, y)) < 1e-9
        h, t = hter(sc)
        h_ref, t_ref = exhaustive_hter(s, y)
        assert h == pytest.approx(h_ref, abs=1e-12) and t == t_ref
        thr, far, tpr = roc(sc)
        ref = brute_roc(s, y)
        assert np.allclose(far, [r[1] for r in ref]) and np.allclose(tpr, [r[2] for r in ref])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-500, 500), min_size=4, max_size=25), st.integers(0, 2 ** 31))
def test_monotone_transform_invariance(values, seed):
    # integer grid keeps distinct scores distinct after the float transform
    rng = np.random.default_rng(seed)
    s = np.array(values) / 100.0
    y = rng.integers(0, 2, size=len(s))
    y[0], y[1] = 0, 1
    transformed = np.exp(s * 0.7) * 3.0 - 1.0
    a, b = ScoredSet(s, y), ScoredSet(transformed, y)
    assert auc(a) == pytest.approx(auc(b), abs=1e-12)
    ra, rb = evaluate(s, y), evaluate(transformed, y)
    assert (ra.hter, ra.far, ra.frr) == pytest.approx((rb.hter, rb.far, rb.frr), abs=1e-12)
    assert math.isclose(np.exp(ra.threshold * 0.7) * 3.0 - 1.0, rb.threshold, rel_tol=1e-9) \
        or (math.isinf(ra.threshold) and math.isinf(rb.threshold))


def test_report_records_policy_and_counts():
    rep = evaluate([0.2, 0.7, 0.4], [0, 1, 1])
    assert rep.threshold_policy == "eer-on-eval"
    assert (rep.n_live, rep.n_spoof) == (2, 1)
    assert rep.roc[0][0] == math.inf
