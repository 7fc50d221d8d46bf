"""Gaussian GEE with independence or AR(1) working correlation and sandwich SEs."""

import math
from dataclasses import dataclass, field

import numpy as np

CORRS = ("independence", "ar1")
MODELS = {
    "eq2": ("session",),
    "eq3": ("session", "l_mean"),
    "eq4": ("session", "l_mean", "gifs"),
}
GIFS_AGGREGATIONS = ("mean", "endpoints")


class GeeError(RuntimeError):
    pass


def chi2_1_sf(x):
    """Upper tail of chi-square with one degree of freedom."""
    return math.erfc(math.sqrt(max(x, 0.0) / 2.0))


@dataclass
class LongitudinalTable:
    clusters: list
    times: np.ndarray
    outcome: np.ndarray
    covariates: dict  # name -> array

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        self.outcome = np.asarray(self.outcome, dtype=np.float64)
        self.covariates = {k: np.asarray(v, dtype=np.float64) for k, v in self.covariates.items()}
        n = len(self.clusters)
        if len(self.times) != n or len(self.outcome) != n or any(
                len(v) != n for v in self.covariates.values()):
            raise GeeError("table columns differ in length")
        order = sorted(range(n), key=lambda i: (str(self.clusters[i]), int(self.times[i])))
        self.clusters = [str(self.clusters[i]) for i in order]
        self.times = self.times[order]
        self.outcome = self.outcome[order]
        self.covariates = {k: v[order] for k, v in self.covariates.items()}
        for i in range(1, n):
            if self.clusters[i] == self.clusters[i - 1] and self.times[i] <= self.times[i - 1]:
                raise GeeError(f"cluster {self.clusters[i]}: times must be strictly increasing")
        if not np.all(np.isfinite(self.outcome)):
            raise GeeError("outcome contains non-finite values")

    def __len__(self):
        return len(self.clusters)

    def groups(self):
        """(start, stop) row ranges, one per cluster."""
        out, start = [], 0
        for i in range(1, len(self.clusters) + 1):
            if i == len(self.clusters) or self.clusters[i] != self.clusters[start]:
                out.append((start, i))
                start = i
        return out

    def design(self, terms, standardize=False):
        cols = [np.ones(len(self))]
        for t in terms:
            if t not in self.covariates:
                raise GeeError(f"unknown covariate {t!r}; have {sorted(self.covariates)}")
            c = self.covariates[t]
            if standardize:
                sd = c.std(ddof=1) if len(c) > 1 else 0.0
                if not sd > 0:
                    raise GeeError(f"cannot standardize constant covariate {t!r}")
                c = (c - c.mean()) / sd
            cols.append(c)
        return np.column_stack(cols)


@dataclass
class GeeFit:
    terms: tuple  # including "intercept"
    beta: np.ndarray
    cov: np.ndarray
    alpha: float
    phi: float
    corr: str
    n_clusters: int
    n_obs: int
    iterations: int
    converged: bool = True
    standardized: bool = False
    se: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.se = np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    @property
    def wald(self):
        out = []
        for b, s in zip(self.beta, self.se):
            chi2 = (b / s) ** 2 if s > 0 else math.inf
            out.append((float(chi2), chi2_1_sf(chi2) if math.isfinite(chi2) else 0.0))
        return out

    def coef(self, term):
        i = self.terms.index(term)
        chi2, p = self.wald[i]
        return {"term": term, "B": float(self.beta[i]), "SE": float(self.se[i]),
                "wald_chi2": chi2, "p": p}

    def table(self):
        return [self.coef(t) for t in self.terms]

    def to_dict(self):
        return {"terms": list(self.terms), "coefficients": self.table(),
                "alpha": self.alpha, "phi": self.phi, "corr": self.corr,
                "n_clusters": self.n_clusters, "n_obs": self.n_obs,
                "iterations": self.iterations, "converged": self.converged,
                "standardized": self.standardized}

    def format(self):
        lines = [f"{'term':<10} {'B':>12} {'SE':>12} {'Wald chi2':>12} {'p':>12}"]
        for row in self.table():
            lines.append(f"{row['term']:<10} {row['B']:>12.6g} {row['SE']:>12.6g} "
                         f"{row['wald_chi2']:>12.6g} {row['p']:>12.6g}")
        lines.append(f"corr={self.corr} alpha={self.alpha:.6g} phi={self.phi:.6g} "
                     f"clusters={self.n_clusters} n={self.n_obs} iterations={self.iterations}")
        return "\n".join(lines)


def ar1_matrix(times, alpha):
    t = np.asarray(times, dtype=np.float64)
    return float(alpha) ** np.abs(t[:, None] - t[None, :])


class _Layout:
    """Clusters grouped by time pattern so each correlation inverse is built once."""

    def __init__(self, table):
        self.patterns = {}
        for start, stop in table.groups():
            key = tuple(int(t) for t in table.times[start:stop])
            self.patterns.setdefault(key, []).append(np.arange(start, stop))
        self.blocks = [(np.array(k), np.stack(rows)) for k, rows in sorted(self.patterns.items())]
        # adjacent within-cluster pairs one time step apart
        first, second = [], []
        for start, stop in table.groups():
            for i in range(start, stop - 1):
                if table.times[i + 1] - table.times[i] == 1:
                    first.append(i)
                    second.append(i + 1)
        self.pairs = (np.array(first, dtype=np.int64), np.array(second, dtype=np.int64))
        self.n_clusters = len(table.groups())

    def sums(self, X, r, alpha, meat=False):
        """Bread X'R^-1 X, score X'R^-1 r, and optionally the cluster-robust meat."""
        p = X.shape[1]
        bread = np.zeros((p, p))
        score = np.zeros(p)
        m = np.zeros((p, p))
        for times, idx in self.blocks:
            rinv = np.linalg.inv(ar1_matrix(times, alpha))
            Xc = X[idx]  # (n_c, m, p)
            rc = r[idx]  # (n_c, m)
            XtRi = np.einsum("cmp,mn->cpn", Xc, rinv)
            bread += np.einsum("cpn,cnq->pq", XtRi, Xc)
            u = np.einsum("cpn,cn->cp", XtRi, rc)
            score += u.sum(axis=0)
            if meat:
                m += u.T @ u
        return bread, score, m


def _moments(r, layout, n_params, need_alpha=True):
    n = len(r)
    if n - n_params <= 0:
        raise GeeError(f"{n} observations cannot support {n_params} parameters")
    phi = float(r @ r) / (n - n_params)
    if not phi > 0:
        raise GeeError("zero residual variance; the outcome is fit exactly")
    a, b = layout.pairs
    if not need_alpha:
        return phi, 0.0
    if len(a) - n_params <= 0:
        raise GeeError(f"{len(a)} lag-1 pairs are too few to estimate the AR(1) parameter")
    alpha = float(r[a] @ r[b]) / ((len(a) - n_params) * phi)
    return phi, alpha


def fit_gee(table, terms, corr="ar1", tol=1e-10, max_iter=100, alpha=None,
            standardize=False):
    """Fit outcome ~ intercept + terms.  ``alpha`` fixes the AR(1) parameter."""
    if corr not in CORRS:
        raise GeeError(f"corr must be one of {CORRS}, got {corr!r}")
    terms = tuple(terms)
    X = table.design(terms, standardize)
    y = table.outcome
    n, p = X.shape
    layout = _Layout(table)
    if layout.n_clusters < 2:
        raise GeeError(f"need at least 2 clusters, got {layout.n_clusters}")
    rank = np.linalg.matrix_rank(X)
    if rank < p:
        raise GeeError(f"design matrix is rank deficient (rank {rank} < {p} columns "
                       f"for intercept + {list(terms)})")
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    a = 0.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r = y - X @ beta
        phi, a_hat = _moments(r, layout, p, corr == "ar1" and alpha is None)
        if corr == "independence":
            a = 0.0
        elif alpha is not None:
            a = float(alpha)
        else:
            a = a_hat
        if abs(a) >= 1.0:
            raise GeeError(f"AR(1) estimate |alpha| = {abs(a):.4g} >= 1; the working "
                           f"correlation is not positive definite")
        bread, score, _ = layout.sums(X, r, a)
        step = np.linalg.solve(bread, score)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    if not converged:
        raise GeeError(f"GEE did not converge in {max_iter} iterations (tol {tol})")
    r = y - X @ beta
    phi = float(r @ r) / (n - p)
    # V = phi R; phi cancels in the sandwich
    bread, _, meat = layout.sums(X, r, a, meat=True)
    binv = np.linalg.inv(bread)
    cov = binv @ meat @ binv
    cov = 0.5 * (cov + cov.T)
    return GeeFit(("intercept",) + terms, beta, cov, float(a), float(phi), corr,
                  layout.n_clusters, n, it, converged, standardize)


# --------------------------------------------------------------------------
# validation models over a dataset
# --------------------------------------------------------------------------

def session_gifs(trace, aggregation="mean"):
    g = np.asarray(trace.gifs if hasattr(trace, "gifs") else trace, dtype=np.float64)
    if aggregation == "mean":
        return float(g.mean())
    if aggregation == "endpoints":
        return float(0.5 * (g[0] + g[-1]))
    raise GeeError(f"gifs aggregation must be one of {GIFS_AGGREGATIONS}, got {aggregation!r}")


def session_table(ds, traces=None, aggregation="mean"):
    """One row per session with a reaction time; traces map session key -> trace or gifs."""
    rows = [s for s in ds.sessions if s.reaction_time is not None]
    cov = {"session": [s.index for s in rows], "l_mean": [s.l_mean for s in rows]}
    if traces is not None:
        missing = [s.key for s in rows if s.key not in traces]
        if missing:
            raise GeeError(f"no trace for {len(missing)} sessions, e.g. {missing[0]}")
        cov["gifs"] = [session_gifs(traces[s.key], aggregation) for s in rows]
    return LongitudinalTable([s.participant_id for s in rows], [s.index for s in rows],
                             [s.reaction_time for s in rows], cov)


@dataclass
class Validation:
    fits: dict  # model name -> GeeFit

    def signs(self):
        out = {}
        for name, fit in self.fits.items():
            last = fit.terms[-1]
            c = fit.coef(last)
            out[name] = {"term": last, "sign": int(np.sign(c["B"])), "p": c["p"]}
        return out

    def to_dict(self):
        return {"models": {k: v.to_dict() for k, v in self.fits.items()}, "signs": self.signs()}

    def format(self):
        parts = []
        for name, fit in self.fits.items():
            parts.append(f"[{name}] RT ~ {' + '.join(fit.terms[1:])}\n{fit.format()}")
        return "\n\n".join(parts)


def validate_gifs(ds, traces, aggregation="mean", corr="ar1", standardize=False):
    table = session_table(ds, traces, aggregation)
    if len(set(table.clusters)) < 2:
        raise GeeError("need sessions with reaction times from at least 2 participants")
    fits = {name: fit_gee(table, terms, corr=corr, standardize=standardize)
            for name, terms in MODELS.items()}
    return Validation(fits)
