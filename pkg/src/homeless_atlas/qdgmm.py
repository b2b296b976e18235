"""Quasi-differenced method of moments for a multiplicative mean with unit effects.

With ``E[y_it | x_it] = c_i exp(x_it' b)`` the ratio of consecutive means is
``exp(dx' b)``, so ``u = y_t - exp(dx' b) y_{t-1}`` has mean zero and the unit
effect ``c_i`` never has to be estimated. Instruments are the regressor
differences themselves, which makes the system exactly identified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import check_groups, column_names
from .ols import EstimateReport

OVERFLOW_GUARD = 50.0


class ConvergenceError(RuntimeError):
    def __init__(self, message, trajectory=()):
        super().__init__(message)
        self.trajectory = list(trajectory)


def qd_residual(beta, dx, y_curr, y_prev):
    """``y_t - exp(dx' beta) y_{t-1}`` for one pair or arrays of pairs."""
    idx = np.asarray(dx, dtype=np.float64) @ np.asarray(beta, dtype=np.float64)
    if np.any(np.abs(idx) > OVERFLOW_GUARD):
        raise OverflowError(f"|dx'beta| exceeds {OVERFLOW_GUARD}")
    return np.asarray(y_curr, dtype=np.float64) - np.exp(idx) * np.asarray(y_prev, dtype=np.float64)


def sample_moments(beta, dx, y_curr, y_prev):
    """``(1/n) sum_i dx_i u_i(beta)``."""
    dx = np.atleast_2d(np.asarray(dx, dtype=np.float64))
    u = qd_residual(beta, dx, y_curr, y_prev)
    return dx.T @ u / dx.shape[0]


def moment_jacobian(beta, dx, y_prev):
    """Analytic ``d m / d beta' = -(1/n) sum_i dx_i y_{t-1,i} exp(dx_i' beta) dx_i'``."""
    dx = np.atleast_2d(np.asarray(dx, dtype=np.float64))
    w = np.asarray(y_prev, dtype=np.float64) * np.exp(dx @ beta)
    return -(dx * w[:, None]).T @ dx / dx.shape[0]


@dataclass
class QDEstimate:
    coef: np.ndarray
    cov: np.ndarray
    n: int
    n_clusters: int
    iterations: int
    moment_norm: float
    names: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def to_report(self, label="", drop_summary=None):
        rep = EstimateReport(
            names=list(self.names), coef=self.coef, cov=self.cov, n=self.n, k=len(self.coef),
            n_clusters=self.n_clusters, r2=math.nan, adj_r2=math.nan, rmse=math.nan,
            label=label, estimator="qd-gmm", drop_summary=dict(drop_summary or {}),
            extra={"iterations": self.iterations, "moment_norm": self.moment_norm},
        )
        return rep


def ols_start(dx, y_curr, y_prev):
    """Warm start from regressing ``log(y_t / y_{t-1})`` on ``dx`` where both are positive."""
    ok = (y_curr > 0) & (y_prev > 0)
    if ok.sum() <= dx.shape[1]:
        return np.zeros(dx.shape[1])
    b, *_ = np.linalg.lstsq(dx[ok], np.log(y_curr[ok] / y_prev[ok]), rcond=None)
    return b


def fit_qd(dx, y_curr, y_prev, groups=None, init=None, *, tol=1e-10, step_tol=1e-12,
           max_iter=100, names=None):
    """Solve the quasi-differenced moment equations by damped Newton.

    Converges when ``max|m| < tol`` or the accepted step is below ``step_tol``.
    The step is halved until ``||m||`` decreases and ``|dx'b|`` stays within
    the overflow guard.
    """
    dx = np.atleast_2d(np.asarray(dx, dtype=np.float64))
    y_curr = np.asarray(y_curr, dtype=np.float64)
    y_prev = np.asarray(y_prev, dtype=np.float64)
    n, k = dx.shape
    if n == 0:
        raise ValueError("no observations")
    if np.any(y_curr < 0) or np.any(y_prev < 0):
        raise ValueError("outcome levels must be nonnegative")
    codes, G = check_groups(groups, n)
    beta = np.zeros(k) if init is None else np.asarray(init, dtype=np.float64).copy()
    if not np.all(np.isfinite(beta)):
        raise ValueError("initial value must be finite")
    if np.any(np.abs(dx @ beta) > OVERFLOW_GUARD):
        beta = np.zeros(k)
    m = sample_moments(beta, dx, y_curr, y_prev)
    norm = float(np.linalg.norm(m))
    trajectory = [(beta.copy(), norm)]
    it = 0
    converged = float(np.max(np.abs(m))) < tol
    while not converged and it < max_iter:
        it += 1
        J = moment_jacobian(beta, dx, y_prev)
        try:
            step = np.linalg.solve(J, -m)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular moment Jacobian", trajectory) from None
        if not np.all(np.isfinite(step)):
            raise ConvergenceError("non-finite Newton step", trajectory)
        lam = 1.0
        while True:
            cand = beta + lam * step
            if np.all(np.abs(dx @ cand) <= OVERFLOW_GUARD):
                m_new = sample_moments(cand, dx, y_curr, y_prev)
                n_new = float(np.linalg.norm(m_new))
                if n_new < norm or lam < 1e-12:
                    break
            lam *= 0.5
            if lam < 1e-12:
                raise ConvergenceError("line search failed to reduce the moment norm", trajectory)
        small_step = float(np.max(np.abs(lam * step))) < step_tol
        beta, m, norm = cand, m_new, n_new
        trajectory.append((beta.copy(), norm))
        converged = float(np.max(np.abs(m))) < tol or small_step
    if not converged:
        raise ConvergenceError(f"no convergence in {max_iter} iterations (|m|={norm:.3g})",
                               trajectory)
    cov = qd_covariance(beta, dx, y_curr, y_prev, codes, G)
    return QDEstimate(beta, cov, n, G, it, float(np.max(np.abs(m))),
                      column_names(names, k), trajectory)


def qd_covariance(beta, dx, y_curr, y_prev, codes, n_groups):
    """Clustered sandwich ``(1/n) J^{-1} S J^{-T}`` with the ``G/(G-1)`` factor."""
    n = dx.shape[0]
    J = moment_jacobian(beta, dx, y_prev)
    u = qd_residual(beta, dx, y_curr, y_prev)
    scores = np.zeros((n_groups, dx.shape[1]))
    np.add.at(scores, codes, dx * u[:, None])
    S = scores.T @ scores / n * (n_groups / (n_groups - 1))
    Jinv = np.linalg.inv(J)
    V = Jinv @ S @ Jinv.T / n
    return 0.5 * (V + V.T)


class QuasiDifferencedGMM(BaseEstimator):
    """Estimator wrapper: ``fit(dX, y_curr, y_prev=..., groups=...)``.

    Parameters
    ----------
    init : {"zeros", "ols"} or array-like
        Starting point of the Newton iteration.
    tol, max_iter : convergence controls.
    n_starts : int
        Extra random starts (seeded by ``random_state``); the root with the
        smallest moment norm is kept and ``start_spread_`` records how far
        the converged roots were apart.
    """

    def __init__(self, init="zeros", tol=1e-10, max_iter=100, n_starts=0, random_state=0,
                 label=""):
        self.init = init
        self.tol = tol
        self.max_iter = max_iter
        self.n_starts = n_starts
        self.random_state = random_state
        self.label = label

    def _start(self, dx, y_curr, y_prev):
        if isinstance(self.init, str):
            if self.init == "zeros":
                return np.zeros(dx.shape[1])
            if self.init == "ols":
                return ols_start(dx, y_curr, y_prev)
            raise ValueError(f"unknown init {self.init!r}")
        return np.asarray(self.init, dtype=np.float64)

    def fit(self, X, y, y_prev=None, groups=None, feature_names=None):
        names = feature_names
        if names is None and hasattr(X, "columns"):
            names = list(X.columns)
        dx = check_array(X, dtype=np.float64)
        y_curr = check_array(y, dtype=np.float64, ensure_2d=False)
        if y_prev is None:
            raise ValueError("y_prev is required")
        y_prev = check_array(y_prev, dtype=np.float64, ensure_2d=False)
        est = fit_qd(dx, y_curr, y_prev, groups, self._start(dx, y_curr, y_prev),
                     tol=self.tol, max_iter=self.max_iter, names=names)
        roots = [est.coef]
        if self.n_starts:
            rng = np.random.default_rng(self.random_state)
            scale = np.maximum(np.abs(est.coef), 0.1)
            for _ in range(self.n_starts):
                b0 = est.coef + rng.normal(0, 1, len(est.coef)) * scale
                other = fit_qd(dx, y_curr, y_prev, groups, b0, tol=self.tol,
                               max_iter=self.max_iter, names=names)
                roots.append(other.coef)
                if other.moment_norm < est.moment_norm:
                    est = other
        self.start_spread_ = float(np.max(np.abs(np.array(roots) - est.coef)))
        self.estimate_ = est
        self.coef_ = est.coef
        self.cov_ = est.cov
        self.n_features_in_ = dx.shape[1]
        self.report_ = est.to_report(self.label)
        return self

    def predict(self, X, y_prev):
        """Expected current level ``exp(dx' b) y_{t-1}``."""
        check_is_fitted(self, "coef_")
        dx = check_array(X, dtype=np.float64)
        return np.exp(dx @ self.coef_) * np.asarray(y_prev, dtype=np.float64)


def format_qd_table(reports, labels=None, decimals=4):
    """Text table in the method-of-moments layout (coefficients, SEs, Obs.)."""
    from .ols import stars

    labels = labels or {}
    names = []
    for rep in reports:
        for nm in rep.names:
            if nm not in names:
                names.append(nm)
    rows = [[""] + [f"({i + 1})" for i in range(len(reports))],
            [""] + [rep.label for rep in reports]]
    for nm in names:
        a, b = [labels.get(nm, nm)], [""]
        for rep in reports:
            if nm in rep.names:
                j = rep.index(nm)
                a.append(f"{rep.coef[j]:.{decimals}f}{stars(rep.pvalues[j])}")
                b.append(f"({rep.se[j]:.{decimals}f})")
            else:
                a += [""]
                b += [""]
        rows += [a, b]
    rows.append(["Obs."] + [str(rep.n) for rep in reports])
    rows.append(["Std.Errors clustered by GEOID"] + ["" for _ in reports])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    rule = "-" * len(lines[0])
    return "\n".join([rule, *lines[:2], rule, *lines[2:], rule,
                      "Standard errors in parentheses",
                      "+ p<.10, * p<.05, ** p<.01, *** p<.001"]) + "\n"
