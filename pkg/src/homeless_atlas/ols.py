"""Least squares with cluster-robust covariance, Wald tests and margins curves."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy import stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import RankDeficiencyError, check_design, check_groups, column_names

# one legend for every table: + p<.10, * p<.05, ** p<.01, *** p<.001
STAR_LEGEND = ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.10, "+"))


def stars(p):
    for cut, mark in STAR_LEGEND:
        if p < cut:
            return mark
    return ""


@dataclass
class EstimateReport:
    """Coefficients, clustered covariance and fit statistics of one specification."""

    names: list
    coef: np.ndarray
    cov: np.ndarray
    n: int
    k: int
    n_clusters: int
    r2: float
    adj_r2: float
    rmse: float
    label: str = ""
    estimator: str = "ols"
    drop_summary: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    @property
    def df_resid(self):
        return self.n - self.k

    @property
    def tvalues(self):
        se = self.se
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(se > 0, self.coef / se, np.where(self.coef == 0, 0.0, np.inf))

    @property
    def pvalues(self):
        # t reference with G-1 df, matching the small-sample clustered convention
        return 2 * stats.t.sf(np.abs(self.tvalues), max(self.n_clusters - 1, 1))

    def index(self, name):
        return self.names.index(name)

    def __getitem__(self, name):
        return float(self.coef[self.index(name)])

    def to_dict(self):
        return {
            "schema_version": 1,
            "label": self.label,
            "estimator": self.estimator,
            "names": list(self.names),
            "coef": [float(v) for v in self.coef],
            "se": [float(v) for v in self.se],
            "pvalues": [float(v) for v in self.pvalues],
            "cov": [[float(v) for v in row] for row in self.cov],
            "n": int(self.n),
            "k": int(self.k),
            "n_clusters": int(self.n_clusters),
            "r2": _num(self.r2),
            "adj_r2": _num(self.adj_r2),
            "rmse": _num(self.rmse),
            "drop_summary": dict(self.drop_summary),
            "extra": _jsonable(self.extra),
        }


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return _num(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def qr_solve(X, y, names=None, rank_tol=1e-10):
    """Least squares through a column-pivoted QR; raises on rank deficiency.

    Returns ``(beta, R, perm)`` with ``X[:, perm] = Q R``.
    """
    Q, R, perm = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size and (diag[0] == 0 or np.any(diag < rank_tol * diag[0])):
        bad = perm[diag < rank_tol * max(diag[0], np.finfo(float).tiny)]
        names = column_names(names, X.shape[1])
        cols = [names[j] for j in sorted(bad)]
        raise RankDeficiencyError(f"design matrix is rank deficient; collinear columns: {cols}",
                                  cols)
    z = Q.T @ y
    b = scipy.linalg.solve_triangular(R, z)
    beta = np.empty_like(b)
    beta[perm] = b
    return beta, R, perm


def bread_from_qr(R, perm):
    """``(X'X)^{-1}`` from the pivoted QR factor."""
    k = R.shape[0]
    Rinv = scipy.linalg.solve_triangular(R, np.eye(k))
    inv_p = Rinv @ Rinv.T
    out = np.empty_like(inv_p)
    out[np.ix_(perm, perm)] = inv_p
    return out


def cluster_meat(X, resid, codes, n_groups):
    """``sum_g (X_g' e_g)(X_g' e_g)'`` with scores summed inside clusters."""
    scores = X * resid[:, None]
    S = np.zeros((n_groups, X.shape[1]))
    np.add.at(S, codes, scores)
    return S.T @ S


def clustered_cov(X, resid, codes, n_groups, bread):
    n, k = X.shape
    meat = cluster_meat(X, resid, codes, n_groups)
    c = (n_groups / (n_groups - 1)) * ((n - 1) / (n - k))
    V = c * bread @ meat @ bread
    return 0.5 * (V + V.T)


class ClusteredOLS(RegressorMixin, BaseEstimator):
    """Ordinary least squares with cluster-robust (sandwich) covariance.

    The covariance uses the small-sample factor ``G/(G-1) * (n-1)/(n-k)``.
    With ``groups=None`` every row is its own cluster, which gives HC1.

    Parameters
    ----------
    rank_tol : float
        Relative pivot tolerance of the rank check.
    label : str
        Specification label copied into the report.
    """

    def __init__(self, rank_tol=1e-10, label=""):
        self.rank_tol = rank_tol
        self.label = label

    def fit(self, X, y, groups=None, feature_names=None):
        names = feature_names
        if names is None and hasattr(X, "columns"):
            names = list(X.columns)
        X, y = check_design(X, y)
        n, k = X.shape
        self.feature_names_in_ = np.array(column_names(names, k), dtype=object)
        self.n_features_in_ = k
        codes, G = check_groups(groups, n)
        beta, R, perm = qr_solve(X, y, self.feature_names_in_.tolist(), self.rank_tol)
        resid = y - X @ beta
        bread = bread_from_qr(R, perm)
        V = clustered_cov(X, resid, codes, G, bread)
        ssr = float(resid @ resid)
        yc = y - y.mean()
        tss = float(yc @ yc)
        r2 = 1.0 - ssr / tss if tss > 0 else (1.0 if ssr == 0 else 0.0)
        adj = 1.0 - (1.0 - r2) * (n - 1) / (n - k)
        self.coef_ = beta
        self.cov_ = V
        self.resid_ = resid
        self.report_ = EstimateReport(
            names=self.feature_names_in_.tolist(), coef=beta, cov=V, n=n, k=k, n_clusters=G,
            r2=r2, adj_r2=adj, rmse=math.sqrt(ssr / n), label=self.label,
        )
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X, _ = check_design(X, min_rows_over_cols=False)
        return X @ self.coef_


def fit(design, label=""):
    """Fit a :class:`~homeless_atlas.panel.DesignMatrix`; returns its report."""
    model = ClusteredOLS(label=label).fit(design.X, design.y, groups=design.clusters,
                                         feature_names=design.names)
    return model.report_


@dataclass
class WaldResult:
    statistic: float
    df: int
    pvalue: float

    def to_dict(self):
        return {"chi2": _num(self.statistic), "df": int(self.df), "p": _num(self.pvalue)}


def wald_test(report, R, r=None):
    """Wald chi-square test of ``R beta = r`` using the report's covariance."""
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    q, k = R.shape
    if k != len(report.coef):
        raise ValueError(f"restriction has {k} columns, model has {len(report.coef)} coefficients")
    if np.linalg.matrix_rank(R) < q:
        raise ValueError("restriction matrix must have full row rank")
    r = np.zeros(q) if r is None else np.asarray(r, dtype=np.float64).reshape(q)
    diff = R @ report.coef - r
    M = R @ report.cov @ R.T
    try:
        c, low = scipy.linalg.cho_factor(M)
        stat = float(diff @ scipy.linalg.cho_solve((c, low), diff))
    except np.linalg.LinAlgError:
        if np.allclose(diff, 0.0):
            return WaldResult(0.0, q, 1.0)
        raise np.linalg.LinAlgError("R V R' is singular; the restriction is degenerate") from None
    return WaldResult(stat, q, float(stats.chi2.sf(stat, q)))


def equal_slopes_test(report, a, b):
    """Wald test that the coefficients named ``a`` and ``b`` are equal."""
    R = np.zeros((1, len(report.coef)))
    R[0, report.index(a)] = 1.0
    R[0, report.index(b)] = -1.0
    return wald_test(report, R)


def margins(report, grid, plus, minus, base=None, z=1.96):
    """Predicted outcome along a grid of split-variable changes.

    ``base`` maps column names to the values held fixed (intercept defaults
    to 1, everything else to 0). Returns an ``(m, 4)`` array of
    ``grid, fit, lo, hi`` with a pointwise ``z``-based band.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if not np.all(np.isfinite(grid)):
        raise ValueError("grid must be finite")
    x0 = np.zeros(len(report.coef))
    base = {"intercept": 1.0} if base is None else {"intercept": 1.0, **base}
    for name, val in base.items():
        if name in report.names:
            x0[report.index(name)] = val
    Xg = np.tile(x0, (len(grid), 1))
    Xg[:, report.index(plus)] = np.maximum(grid, 0.0)
    Xg[:, report.index(minus)] = np.minimum(grid, 0.0)
    fit_ = Xg @ report.coef
    se = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", Xg, report.cov, Xg), 0.0, None))
    return np.column_stack([grid, fit_, fit_ - z * se, fit_ + z * se])


def format_table(reports, labels=None, *, extra_rows=(), decimals=3):
    """Aligned text table: one column per report, SEs in parentheses, stars legend."""
    names = []
    for rep in reports:
        for nm in rep.names:
            if nm not in names and nm != "intercept" and not nm.startswith("period_"):
                names.append(nm)
    labels = labels or {}
    rows = [[""] + [f"({i + 1})" for i in range(len(reports))]]
    rows.append([""] + [rep.label for rep in reports])
    for nm in names:
        coef_row, se_row = [labels.get(nm, nm)], [""]
        for rep in reports:
            if nm in rep.names:
                j = rep.index(nm)
                coef_row.append(f"{rep.coef[j]:.{decimals}f}{stars(rep.pvalues[j])}")
                se_row.append(f"({rep.se[j]:.{decimals}f})")
            else:
                coef_row.append("")
                se_row.append("")
        rows += [coef_row, se_row]
    rows.append(["Num.Obs."] + [str(rep.n) for rep in reports])
    rows.append(["R2"] + [_fmt(rep.r2, 3) for rep in reports])
    rows.append(["R2 Adj."] + [_fmt(rep.adj_r2, 3) for rep in reports])
    rows.append(["RMSE"] + [_fmt(rep.rmse, 2) for rep in reports])
    rows.append(["Std.Errors"] + ["by: GEOID" for _ in reports])
    rows.append(["FE: year"] + ["X" if any(n.startswith("period_") for n in rep.names) or
                                rep.extra.get("n_periods", 1) > 1 else "" for rep in reports])
    for row in extra_rows:
        rows.append(list(row))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    rule = "-" * len(lines[0])
    legend = "+ p<.10, * p<.05, ** p<.01, *** p<.001"
    return "\n".join([rule, lines[0], lines[1], rule] + lines[2:] + [rule, legend]) + "\n"


def _fmt(v, d):
    return "" if v is None or not math.isfinite(v) else f"{v:.{d}f}"
