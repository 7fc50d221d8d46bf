import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from rvt import metrics
from rvt.metrics import ConfusionMatrix, MetricError


def brute_force(cm):
    """Per-class recall/precision/F1 from explicit label lists, exact fractions."""
    k = len(cm)
    y_true, y_pred = [], []
    for t in range(k):
        for p in range(k):
            y_true += [t] * int(cm[t][p])
            y_pred += [p] * int(cm[t][p])
    rec, prec, f1 = [], [], []
    for c in range(k):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        r = Fraction(tp, tp + fn)
        pr = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        rec.append(r)
        prec.append(pr)
        f1.append(2 * pr * r / (pr + r) if pr + r else Fraction(0))
    return rec, prec, f1


def random_cm(gen):
    k = int(gen.integers(2, 5))
    cm = gen.integers(0, 12, size=(k, k))
    for c in range(k):
        if cm[c].sum() == 0:
            cm[c, c] = 1
    return cm


def test_confusion_metrics_match_brute_force_exactly():
    gen = np.random.default_rng(0)
    for _ in range(1000):
        cm = random_cm(gen)
        rec, prec, f1 = brute_force(cm)
        k = len(cm)
        bacc = sum(rec) / k
        if k == 2:
            want_f1, want_p = f1[1], prec[1]
        else:
            want_f1, want_p = sum(f1) / k, sum(prec) / k
        assert metrics.balanced_accuracy(cm) == float(bacc)
        f, p = metrics.f1_precision(cm)
        assert f == float(want_f1)
        assert p == float(want_p)


def test_confusion_metrics_match_sklearn():
    skm = pytest.importorskip("sklearn.metrics")
    gen = np.random.default_rng(1)
    for _ in range(200):
        k = int(gen.integers(2, 5))
        y = np.concatenate([np.arange(k), gen.integers(0, k, 30)])
        yp = gen.integers(0, k, len(y))
        cm = ConfusionMatrix.from_labels(y, yp, k)
        avg = "binary" if k == 2 else "macro"
        assert metrics.balanced_accuracy(cm) == pytest.approx(skm.balanced_accuracy_score(y, yp), abs=1e-14)
        f, p = metrics.f1_precision(cm)
        assert f == pytest.approx(skm.f1_score(y, yp, average=avg, zero_division=0), abs=1e-14)
        assert p == pytest.approx(skm.precision_score(y, yp, average=avg, zero_division=0), abs=1e-14)


def all_pairs_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def test_auc_matches_all_pairs_counting():
    gen = np.random.default_rng(2)
    for _ in range(1000):
        n = int(gen.integers(2, 40))
        y = gen.integers(0, 2, n)
        y[0], y[1] = 0, 1
        # coarse scores so ties are common
        s = gen.integers(0, 6, n) / 5.0 if gen.random() < 0.5 else gen.normal(size=n)
        assert abs(metrics.auc_binary(s, y) - all_pairs_auc(s, y)) <= 1e-12


def test_auc_matches_sklearn():
    skm = pytest.importorskip("sklearn.metrics")
    gen = np.random.default_rng(3)
    for _ in range(100):
        y = np.concatenate([[0, 1], gen.integers(0, 2, 30)])
        s = gen.integers(0, 4, len(y)).astype(float)
        assert metrics.auc_binary(s, y) == pytest.approx(skm.roc_auc_score(y, s), abs=1e-12)


def test_auc_one_vs_rest_matches_sklearn():
    skm = pytest.importorskip("sklearn.metrics")
    gen = np.random.default_rng(4)
    y = np.concatenate([[0, 1, 2], gen.integers(0, 3, 40)])
    prob = gen.dirichlet(np.ones(3), len(y))
    want = skm.roc_auc_score(y, prob, multi_class="ovr", average="macro")
    assert metrics.auc_ovr(prob, y) == pytest.approx(want, abs=1e-12)


def enumerate_wilcoxon(d):
    """Exact two-sided p by listing all 2^n sign patterns."""
    d = np.asarray(d, float)
    d = d[d != 0]
    ranks = metrics.midranks(np.abs(d))
    w = ranks[d > 0].sum()
    n = len(d)
    sums = [sum(r for r, keep in zip(ranks, signs) if keep)
            for signs in itertools.product([0, 1], repeat=n)]
    le = sum(1 for s in sums if s <= w + 1e-9)
    ge = sum(1 for s in sums if s >= w - 1e-9)
    return w, min(1.0, 2 * min(le, ge) / 2 ** n)


def test_wilcoxon_exact_matches_enumeration():
    gen = np.random.default_rng(5)
    for _ in range(300):
        n = int(gen.integers(5, 13))
        a = gen.integers(0, 8, n) / 4.0
        b = gen.integers(0, 8, n) / 4.0
        if (a != b).sum() < metrics.MIN_PAIRS:
            continue
        res = metrics.wilcoxon_signed_rank(a, b, method="exact")
        w, p = enumerate_wilcoxon(a - b)
        assert res.W == w
        assert res.p == p


def test_wilcoxon_matches_scipy_without_ties():
    stats = pytest.importorskip("scipy.stats")
    gen = np.random.default_rng(6)
    for _ in range(50):
        n = int(gen.integers(5, 20))
        a, b = gen.normal(size=n), gen.normal(size=n)
        ref = stats.wilcoxon(a, b, method="exact")
        got = metrics.wilcoxon_signed_rank(a, b)
        assert got.p == pytest.approx(ref.pvalue, rel=1e-12)
        assert min(got.W, n * (n + 1) / 2 - got.W) == ref.statistic


def test_wilcoxon_normal_approximation_matches_scipy():
    stats = pytest.importorskip("scipy.stats")
    gen = np.random.default_rng(7)
    a, b = gen.normal(size=40), gen.normal(0.3, 1, size=40)
    ref = stats.wilcoxon(a, b, method="approx", correction=True)
    got = metrics.wilcoxon_signed_rank(a, b)
    assert got.method == "normal"
    assert got.p == pytest.approx(ref.pvalue, rel=1e-10)


def test_wilcoxon_errors():
    with pytest.raises(MetricError, match="length"):
        metrics.wilcoxon_signed_rank([1, 2], [1])
    with pytest.raises(MetricError, match="zero"):
        metrics.wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])
    with pytest.raises(MetricError, match=">= 5"):
        metrics.wilcoxon_signed_rank([1, 2, 3], [0, 0, 0])


@given(st.integers(2, 4), st.integers(1, 20), st.randoms(use_true_random=False))
def test_bacc_equals_accuracy_for_balanced_classes(k, per_class, r):
    y = [c for c in range(k) for _ in range(per_class)]
    yp = [r.randrange(k) for _ in y]
    cm = ConfusionMatrix.from_labels(y, yp, k)
    assert metrics.balanced_accuracy(cm) == metrics.accuracy(cm)


scores = hnp.arrays(np.float64, st.integers(4, 30), elements=st.integers(-40, 40))


@given(scores, st.randoms(use_true_random=False))
def test_auc_invariant_under_increasing_transform(s, r):
    y = np.array([r.randrange(2) for _ in s])
    y[0], y[1] = 0, 1
    base = metrics.auc_binary(s, y)
    assert metrics.auc_binary(np.exp(s), y) == base
    assert metrics.auc_binary(3 * s + 7, y) == base
    assert 0.0 <= base <= 1.0


@given(st.integers(3, 4), st.randoms(use_true_random=False))
def test_macro_f1_invariant_under_relabeling(k, r):
    cm = np.array([[r.randrange(1, 9) for _ in range(k)] for _ in range(k)])
    perm = list(range(k))
    r.shuffle(perm)
    permuted = cm[np.ix_(perm, perm)]
    f, p = metrics.f1_precision(cm)
    f2, p2 = metrics.f1_precision(permuted)
    assert f == f2 and p == p2
    assert 0 <= f <= 1 and 0 <= p <= 1


@given(hnp.arrays(np.float64, st.integers(5, 15), elements=st.floats(-3, 3)),
       hnp.arrays(np.float64, st.integers(5, 15), elements=st.floats(-3, 3)))
def test_wilcoxon_p_in_unit_interval(a, b):
    n = min(len(a), len(b))
    try:
        res = metrics.wilcoxon_signed_rank(a[:n], b[:n])
    except MetricError:
        return
    assert 0.0 < res.p <= 1.0


def test_undefined_metrics_raise():
    with pytest.raises(MetricError, match="class 1"):
        metrics.balanced_accuracy([[3, 1], [0, 0]])
    with pytest.raises(MetricError):
        metrics.auc_binary([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        ConfusionMatrix([[1, -1], [0, 2]])


def test_summarize_marks_undefined_as_none():
    out = metrics.summarize([1, 1], [1, 0], [0.9, 0.2], 2)
    assert out["bacc"] is None and out["auc"] is None and out["accuracy"] == 0.5
