import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segnl import metrics
from segnl.metrics import DegenerateClassError


def mask(shape, on):
    a = np.zeros(shape, dtype=np.uint8)
    for idx in on:
        a[idx] = 1
    return a


def brute_dsc(ref, pred, selector):
    """Set arithmetic over voxel coordinates."""
    keep = {"left": {1}, "right": {2}, "both": {1, 2}}[selector]
    r = {i for i, v in np.ndenumerate(ref) if v in keep}
    x = {i for i, v in np.ndenumerate(pred) if v in keep}
    if not r and not x:
        return 1.0
    return 2 * len(r & x) / (len(r) + len(x))


def mann_whitney_auc(pos, neg):
    pos, neg = np.asarray(pos)[:, None], np.asarray(neg)[None, :]
    return float(np.mean((pos > neg) + 0.5 * (pos == neg)))


# -- DSC ---------------------------------------------------------------------

def test_dsc_examples():
    r = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    assert metrics.dsc_per_subject(r, r) == 1.0
    assert metrics.dsc_per_subject(r, 1 - r) == 0.0
    assert metrics.dsc_per_subject(r, np.array([1, 1, 0, 0, 1, 1, 0, 0])) == 0.5
    assert metrics.dsc_per_subject(np.zeros(5), np.zeros(5)) == 1.0


def test_dsc_pooled_example():
    ra, xa = mask(8, [0, 1, 2, 3]), mask(8, [0, 1, 4, 5])
    rb, xb = mask(4, [0, 1]), mask(4, [0, 1])
    assert metrics.dsc_pooled([ra, rb], [xa, xb]) == pytest.approx(2 * 4 / 12, abs=1e-15)


def test_dsc_selectors():
    ref = np.array([1, 1, 2, 2, 0])
    pred = np.array([1, 2, 2, 0, 1])
    assert metrics.dsc_per_subject(ref, pred, "left") == pytest.approx(2 * 1 / 4)
    assert metrics.dsc_per_subject(ref, pred, "right") == pytest.approx(2 * 1 / 4)
    assert metrics.dsc_per_subject(ref, pred, "both") == pytest.approx(2 * 3 / 8)
    with pytest.raises(ValueError):
        metrics.dsc_per_subject(ref, pred, "middle")


def test_dsc_errors():
    with pytest.raises(ValueError):
        metrics.dsc_per_subject(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        metrics.dsc_pooled([np.zeros(3)], [])


def test_dsc_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        shape = tuple(rng.integers(1, 5, size=3))
        ref = rng.choice(3, size=shape, p=rng.dirichlet(np.ones(3)))
        pred = rng.choice(3, size=shape, p=rng.dirichlet(np.ones(3)))
        for sel in metrics.SELECTORS:
            assert metrics.dsc_per_subject(ref, pred, sel) == brute_dsc(ref, pred, sel)


labels = arrays(np.uint8, st.integers(1, 30), elements=st.integers(0, 2))


@given(labels, st.data())
def test_dsc_symmetric_and_pooled_single(a, data):
    b = data.draw(arrays(np.uint8, a.shape, elements=st.integers(0, 2)))
    for sel in metrics.SELECTORS:
        d = metrics.dsc_per_subject(a, b, sel)
        assert d == metrics.dsc_per_subject(b, a, sel)
        assert d == metrics.dsc_pooled([a], [b], sel)
        assert 0.0 <= d <= 1.0


# -- ROC / AUC -----------------------------------------------------------------

def probs_from_scores(scores):
    """(3, n) stack whose "both" foreground probability equals ``scores``."""
    s = np.asarray(scores, dtype=np.float64)
    return np.stack([1 - s, s / 2, s / 2])


def test_roc_enumerated_example():
    pts = metrics.roc_from_scores([0.9, 0.4, 0.5, 0.1], [True, True, False, False], n_thresholds=21)
    row = pts[np.isclose(pts[:, 0], 0.45)][0]
    assert (row[1], row[2]) == (0.5, 0.5)
    assert metrics.auc(pts) == pytest.approx(0.75, abs=1e-12)


def test_roc_endpoints_and_perfect_separator():
    pts = metrics.roc_from_scores([0.8, 0.9, 0.1, 0.2], [True, True, False, False])
    assert tuple(pts[0, 1:]) == (0.0, 0.0)
    assert tuple(pts[-1, 1:]) == (1.0, 1.0)
    assert pts[-1, 0] == 0.0 and pts[0, 0] > 1.0
    assert any((f == 0.0 and t == 1.0) for f, t in pts[:, 1:])
    assert metrics.auc(pts) == 1.0


def test_roc_uninformative_scores_half():
    rng = np.random.default_rng(1)
    scores = rng.uniform(size=20000)
    truth = rng.uniform(size=20000) < 0.3
    assert metrics.auc(metrics.roc_from_scores(scores, truth)) == pytest.approx(0.5, abs=0.02)


def test_roc_degenerate():
    with pytest.raises(DegenerateClassError):
        metrics.roc_from_scores([0.1, 0.2], [True, True])
    with pytest.raises(DegenerateClassError):
        metrics.roc_point_single(np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        metrics.roc_from_scores([1.5, 0.2], [True, False])


def test_roc_monotone_and_masked():
    rng = np.random.default_rng(2)
    ref = rng.integers(0, 3, size=(6, 6, 3))
    probs = rng.dirichlet(np.ones(3), size=ref.shape).transpose(3, 0, 1, 2)
    m = rng.uniform(size=ref.shape) < 0.7
    for sel in metrics.SELECTORS:
        pts = metrics.roc_curve([probs], [ref], sel, masks=[m])
        assert np.all(np.diff(pts[:, 0]) < 0)
        assert np.all(np.diff(pts[:, 1]) >= 0) and np.all(np.diff(pts[:, 2]) >= 0)
    # masking is the same as dropping the voxels
    s = metrics.class_probability(probs, "both")[m]
    t = (ref > 0)[m]
    np.testing.assert_array_equal(metrics.roc_curve([probs], [ref], "both", masks=[m]), metrics.roc_from_scores(s, t))


def test_auc_matches_mann_whitney():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(20, 400))
        truth = rng.uniform(size=n) < rng.uniform(0.1, 0.9)
        truth[:2] = [True, False]
        shift = rng.uniform(-2, 2)
        scores = 1 / (1 + np.exp(-(rng.normal(size=n) + shift * truth)))
        pts = metrics.roc_curve([probs_from_scores(scores)], [truth.astype(np.uint8)], "both", n_thresholds=200)
        assert abs(metrics.auc(pts) - mann_whitney_auc(scores[truth], scores[~truth])) <= 1 / 200


def test_roc_point_single_examples():
    ref = np.array([1, 1, 2, 2, 0, 0, 0, 0])
    assert metrics.roc_point_single(ref, ref) == (0.0, 1.0)
    assert metrics.roc_point_single(np.ones(8, np.uint8), ref) == (1.0, 1.0)
    assert metrics.roc_point_single(np.array([1, 1, 0, 0, 0, 0, 0, 0]), ref) == (0.0, 0.5)


def test_roc_point_pooled_over_subjects():
    refs = [np.array([1, 0, 0, 0]), np.array([2, 2, 0, 0])]
    preds = [np.array([1, 1, 0, 0]), np.array([0, 2, 0, 0])]
    assert metrics.roc_point_single(preds, refs) == (1 / 5, 2 / 3)


# -- bootstrap -----------------------------------------------------------------

def enumerate_pvalue(a, b):
    """Exact expectation over every ordered resample."""
    a, b = np.asarray(a), np.asarray(b)
    n = len(a)
    score = 0.0
    for idx in itertools.product(range(n), repeat=n):
        ma, mb = a[list(idx)].mean(), b[list(idx)].mean()
        score += (mb > ma) + 0.5 * (mb == ma)
    return score / n ** n


def test_bootstrap_identical_is_half():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.uniform(size=int(rng.integers(2, 30)))
        assert metrics.bootstrap_pvalue(a, a, 1000, rng) == 0.5


def test_bootstrap_dominance():
    a, b = np.array([0.9, 0.8, 0.7]), np.array([0.5, 0.4, 0.3])
    assert metrics.bootstrap_pvalue(a, b, 1000, np.random.default_rng(0)) == 0.0
    assert metrics.bootstrap_pvalue(b, a, 1000, np.random.default_rng(0)) == 1.0


def test_bootstrap_enumeration_oracle():
    a, b = [0.9, 0.9], [0.9, 0.1]
    exact = enumerate_pvalue(a, b)
    assert exact == 0.125
    assert abs(metrics.bootstrap_pvalue(a, b, 20000, np.random.default_rng(1)) - exact) <= 0.05
    rng = np.random.default_rng(2)
    for _ in range(5):
        a, b = rng.uniform(size=4).round(1), rng.uniform(size=4).round(1)
        assert abs(metrics.bootstrap_pvalue(a, b, 20000, rng) - enumerate_pvalue(a, b)) <= 0.02


def test_bootstrap_median_statistic():
    a, b = [0.9, 0.9, 0.1], [0.5, 0.5, 0.5]
    p = metrics.bootstrap_pvalue(a, b, 1000, np.random.default_rng(0), statistic=np.median)
    assert 0 < p < 0.5


def test_bootstrap_seeded():
    a, b = [0.7, 0.8, 0.6, 0.9], [0.75, 0.7, 0.65, 0.85]
    p1 = metrics.bootstrap_pvalue(a, b, 1000, np.random.default_rng(7))
    p2 = metrics.bootstrap_pvalue(a, b, 1000, np.random.default_rng(7))
    assert p1 == p2


def test_bootstrap_errors():
    with pytest.raises(ValueError):
        metrics.bootstrap_pvalue([0.1, 0.2], [0.1, 0.2], 0)
    with pytest.raises(ValueError):
        metrics.bootstrap_pvalue([0.1], [0.2])
    with pytest.raises(ValueError):
        metrics.bootstrap_pvalue([0.1, 0.2], [0.2, 0.3, 0.4])
