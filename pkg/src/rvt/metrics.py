"""Classification metrics and the paired Wilcoxon signed-rank test.

Confusion-matrix metrics use exact rational arithmetic on integer counts and
round once at the end, so results are correctly rounded and reproducible.
"""

import math
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from . import _kernels

EXACT_MAX_N = 20  # auto method: exact null distribution up to this many pairs
MIN_PAIRS = 5


class MetricError(ValueError):
    pass


class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    def __init__(self, counts):
        c = np.asarray(counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 2:
            raise MetricError(f"confusion matrix must be square with >= 2 classes, got {c.shape}")
        if not np.issubdtype(c.dtype, np.integer):
            if not np.all(c == np.round(c)):
                raise MetricError("confusion matrix counts must be integers")
            c = c.astype(np.int64)
        if (c < 0).any():
            raise MetricError("confusion matrix counts must be non-negative")
        self.counts = c.astype(np.int64)

    @classmethod
    def from_labels(cls, y_true, y_pred, n_classes):
        c = np.zeros((n_classes, n_classes), dtype=np.int64)
        for t, p in zip(y_true, y_pred):
            c[int(t), int(p)] += 1
        return cls(c)

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def tolist(self):
        return self.counts.tolist()


def _as_cm(cm):
    return cm if isinstance(cm, ConfusionMatrix) else ConfusionMatrix(cm)


def _recalls(cm):
    out = []
    for c in range(cm.n_classes):
        support = int(cm.counts[c].sum())
        if support == 0:
            raise MetricError(f"class {c} has no true samples; recall undefined")
        out.append(Fraction(int(cm.counts[c, c]), support))
    return out


def recalls(cm):
    return [float(r) for r in _recalls(_as_cm(cm))]


def balanced_accuracy(cm):
    r = _recalls(_as_cm(cm))
    return float(sum(r) / len(r))


def accuracy(cm):
    cm = _as_cm(cm)
    if cm.total == 0:
        raise MetricError("empty confusion matrix")
    return float(Fraction(int(np.trace(cm.counts)), cm.total))


def _per_class_pr(cm, c):
    tp = int(cm.counts[c, c])
    predicted = int(cm.counts[:, c].sum())
    actual = int(cm.counts[c].sum())
    p = Fraction(tp, predicted) if predicted else Fraction(0)
    r = Fraction(tp, actual) if actual else Fraction(0)
    f = 2 * p * r / (p + r) if p + r > 0 else Fraction(0)
    return p, r, f


def f1_precision(cm):
    """(F1, precision): positive class for binary, macro average otherwise."""
    cm = _as_cm(cm)
    _recalls(cm)  # every class must be present
    if cm.n_classes == 2:
        p, _, f = _per_class_pr(cm, 1)
        return float(f), float(p)
    ps, fs = [], []
    for c in range(cm.n_classes):
        p, _, f = _per_class_pr(cm, c)
        ps.append(p)
        fs.append(f)
    return float(sum(fs) / len(fs)), float(sum(ps) / len(ps))


def midranks(values):
    """1-based average ranks; ties share the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_binary(scores, labels):
    """P(score_pos > score_neg) + P(tie) / 2 via the rank-sum identity."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise MetricError("binary AUC labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    # doubled midranks are integers, so the pair count below is exact
    r2 = np.rint(2 * midranks(s)).astype(np.int64)
    u2 = int(r2[y == 1].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def auc(pairs):
    """AUC from (score, class) pairs, binary classes."""
    pairs = list(pairs)
    return auc_binary([p[0] for p in pairs], [p[1] for p in pairs])


def auc_ovr(prob, labels):
    """One-vs-rest macro AUC from an (n, n_classes) score matrix."""
    prob = np.asarray(prob, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    vals = [auc_binary(prob[:, c], (y == c).astype(int)) for c in range(prob.shape[1])]
    return sum(vals) / len(vals)


class WilcoxonResult(NamedTuple):
    W: float
    p: float
    n: int
    method: str


def _signed_ranks(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1:
        raise MetricError("paired samples must be one-dimensional")
    d = d[d != 0]
    if len(d) == 0:
        raise MetricError("all paired differences are zero")
    return d, midranks(np.abs(d))


def wilcoxon_exact_counts(ranks):
    """Number of sign patterns per doubled positive-rank sum."""
    r2 = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    return _kernels.signed_rank_counts(r2)


def wilcoxon_signed_rank(a, b, method="auto"):
    """Two-sided paired test; W is the positive-rank sum, zero differences dropped."""
    if len(a) != len(b):
        raise MetricError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    d, ranks = _signed_ranks(a, b)
    n = len(d)
    if n < MIN_PAIRS:
        raise MetricError(f"need >= {MIN_PAIRS} nonzero differences, got {n}")
    w = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        if n > 62:
            raise MetricError("exact enumeration is limited to 62 pairs")
        counts = wilcoxon_exact_counts(ranks)
        w2 = int(round(2 * w))
        le = int(counts[:w2 + 1].sum())
        ge = int(counts[w2:].sum())
        p = min(1.0, 2 * min(le, ge) / 2.0 ** n)
        return WilcoxonResult(w, p, n, "exact")
    if method != "normal":
        raise MetricError(f"unknown method {method!r}")
    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tie_sizes ** 3 - tie_sizes).sum()) / 48.0
    dev = abs(w - mean) - 0.5
    if dev <= 0 or var <= 0:
        return WilcoxonResult(w, 1.0, n, "normal")
    p = min(1.0, math.erfc(dev / math.sqrt(var) / math.sqrt(2.0)))
    return WilcoxonResult(w, p, n, "normal")


def summarize(y_true, y_pred, scores, n_classes, prob=None):
    """Metric dict for one set of predictions; undefined entries are None."""
    cm = ConfusionMatrix.from_labels(y_true, y_pred, n_classes)
    out = {"n": cm.total, "confusion": cm.tolist(), "accuracy": accuracy(cm) if cm.total else None}
    try:
        out["bacc"] = balanced_accuracy(cm)
        out["f1"], out["precision"] = f1_precision(cm)
    except MetricError:
        out["bacc"] = out["f1"] = out["precision"] = None
    try:
        if n_classes == 2:
            out["auc"] = auc_binary(scores, y_true)
        else:
            out["auc"] = auc_ovr(prob if prob is not None else scores, y_true)
    except (MetricError, IndexError):
        out["auc"] = None
    return out
