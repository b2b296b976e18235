"""Shift-share (Bartik) instruments, supply-constraint interactions and IV estimation.

The predictor for an MSA is the share-weighted mean of national industry log
employment growth. It is interacted with a time-invariant vector
``(1, WRI, supply elasticity, undevelopable share)`` to form four excluded
instruments for the rent-increase, rent-decrease and employment-change
regressors.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.linalg
from scipy import stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import ConfigurationError, check_design, check_groups, column_names
from .ols import ClusteredOLS, EstimateReport, bread_from_qr, clustered_cov, qr_solve, wald_test
from .panel import DropLog

ETA_COLUMNS = ("wri", "elasticity", "undevelopable_share")
INSTRUMENT_NAMES = ("bartik", "bartik_x_wri", "bartik_x_elasticity", "bartik_x_undevelopable")


def bartik(shares, growth):
    """Share-weighted national growth for one MSA.

    ``shares`` and ``growth`` map industry codes to the local employment
    share and the national log growth. Shares are renormalised to sum to one.
    """
    s_keys, g_keys = set(shares), set(growth)
    if s_keys != g_keys:
        raise ConfigurationError(
            f"industry keys differ: only in shares {sorted(s_keys - g_keys)}, "
            f"only in growth {sorted(g_keys - s_keys)}"
        )
    keys = sorted(s_keys)
    s = np.array([float(shares[k]) for k in keys])
    g = np.array([float(growth[k]) for k in keys])
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValueError("shares must be finite and nonnegative")
    total = math.fsum(s.tolist())
    if total <= 0:
        raise ValueError("all-zero industry shares")
    return math.fsum((s * g).tolist()) / total


@dataclass
class InstrumentSet:
    frame: pd.DataFrame
    drop_log: DropLog = field(default_factory=DropLog)

    @property
    def matrix(self):
        return self.frame[list(INSTRUMENT_NAMES)].to_numpy(dtype=np.float64)


def build_instruments(bartik_values, eta):
    """Interact Bartik values with the supply-constraint vector.

    ``bartik_values``: DataFrame with ``msa_id, period, bartik``.
    ``eta``: DataFrame indexed or keyed by ``msa_id`` with the columns
    ``wri, elasticity, undevelopable_share``. Rows lacking an eta entry are
    dropped and logged.
    """
    eta = eta.set_index("msa_id") if "msa_id" in eta.columns else eta
    eta.index = eta.index.astype(str)
    log = DropLog()
    rows = []
    for rec in bartik_values.itertuples(index=False):
        msa = str(rec.msa_id)
        if msa not in eta.index:
            log.add(msa, rec.period, "missing supply constraints")
            continue
        e = eta.loc[msa]
        b = float(rec.bartik)
        rows.append({"msa_id": msa, "period": rec.period, "bartik": b,
                     "bartik_x_wri": b * float(e["wri"]),
                     "bartik_x_elasticity": b * float(e["elasticity"]),
                     "bartik_x_undevelopable": b * float(e["undevelopable_share"])})
    frame = pd.DataFrame(rows, columns=["msa_id", "period", *INSTRUMENT_NAMES])
    if not np.all(np.isfinite(frame[list(INSTRUMENT_NAMES)].to_numpy(dtype=np.float64))):
        raise ValueError("non-finite instrument values")
    return InstrumentSet(frame, log)


def bartik_panel(shares, growth, periods):
    """Bartik values for every MSA and period.

    ``shares``: long frame ``msa_id, year, naics2, share`` (base-year shares).
    ``growth``: long frame ``naics2, year, log_growth`` where ``year`` is the
    period end year and ``log_growth`` the national change over the period.
    """
    rows = []
    for t0, t1 in periods:
        g = growth[growth["year"].astype(int) == int(t1)]
        gmap = dict(zip(g["naics2"].astype(str), g["log_growth"].astype(float)))
        s = shares[shares["year"].astype(int) == int(t0)]
        for msa, grp in s.groupby(s["msa_id"].astype(str), sort=True):
            smap = dict(zip(grp["naics2"].astype(str), grp["share"].astype(float)))
            tot = sum(smap.values())
            if abs(tot - 1.0) > 1e-6:
                warnings.warn(f"shares for {msa} in {t0} sum to {tot:.6g}; renormalised",
                              stacklevel=2)
            rows.append({"msa_id": msa, "period": f"{t0}-{t1}", "bartik": bartik(smap, gmap)})
    return pd.DataFrame(rows, columns=["msa_id", "period", "bartik"])


# --- estimation -------------------------------------------------------------------

@dataclass
class FirstStage:
    endogenous: str
    report: EstimateReport
    partial_f: float
    perfect_fit: bool = False

    def to_dict(self):
        return {"endogenous": self.endogenous, "partial_f": _num(self.partial_f),
                "perfect_fit": self.perfect_fit, "report": self.report.to_dict()}


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


def first_stage(endog, instruments, exog, groups=None, *, endog_name="endog",
                instrument_names=None, exog_names=None):
    """Regress one endogenous variable on instruments and exogenous controls.

    The partial F is the clustered Wald statistic on the instrument block
    divided by the number of instruments. A zero-residual fit reports
    ``partial_f = inf`` with ``perfect_fit`` set.
    """
    Z = np.atleast_2d(np.asarray(instruments, dtype=np.float64))
    W = np.atleast_2d(np.asarray(exog, dtype=np.float64))
    q = Z.shape[1]
    zn = column_names(instrument_names, q, "z")
    wn = column_names(exog_names, W.shape[1], "w")
    model = ClusteredOLS(label=f"first stage: {endog_name}").fit(
        np.hstack([W, Z]), endog, groups=groups, feature_names=wn + zn)
    rep = model.report_
    ssr = float(model.resid_ @ model.resid_)
    scale = float(np.asarray(endog, dtype=np.float64) @ np.asarray(endog, dtype=np.float64))
    if ssr <= 1e-24 * max(scale, 1.0):
        return FirstStage(endog_name, rep, math.inf, True)
    R = np.zeros((q, len(rep.coef)))
    R[np.arange(q), W.shape[1] + np.arange(q)] = 1.0
    F = wald_test(rep, R).statistic / q
    return FirstStage(endog_name, rep, F)


@dataclass
class HansenJ:
    statistic: float
    df: int
    pvalue: float
    testable: bool = True

    def to_dict(self):
        return {"J": _num(self.statistic), "df": int(self.df), "p": _num(self.pvalue),
                "testable": self.testable}


class TwoStageLeastSquares(RegressorMixin, BaseEstimator):
    """2SLS with cluster-robust covariance.

    ``fit(X, y, instruments=Z, groups=g)`` where ``X`` holds exogenous and
    endogenous regressors; ``endogenous`` lists the column indices (or names)
    of ``X`` to be instrumented. Exogenous columns of ``X`` instrument
    themselves.
    """

    def __init__(self, endogenous=(), rank_tol=1e-10, label=""):
        self.endogenous = endogenous
        self.rank_tol = rank_tol
        self.label = label

    def fit(self, X, y, instruments=None, groups=None, feature_names=None, instrument_names=None):
        names = feature_names
        if names is None and hasattr(X, "columns"):
            names = list(X.columns)
        X, y = check_design(X, y)
        n, k = X.shape
        names = column_names(names, k)
        endo = [names.index(e) if isinstance(e, str) else int(e) for e in self.endogenous]
        exo = [j for j in range(k) if j not in endo]
        if instruments is None:
            raise ValueError("instruments are required")
        Zx = check_array(instruments, dtype=np.float64, ensure_2d=False)
        Zx = Zx.reshape(n, -1)
        if Zx.shape[1] < len(endo):
            raise ValueError(f"{Zx.shape[1]} instruments for {len(endo)} endogenous regressors")
        codes, G = check_groups(groups, n)
        Z = np.hstack([X[:, exo], Zx])
        zn = [names[j] for j in exo] + column_names(instrument_names, Zx.shape[1], "z")
        Qz, Rz, pz = scipy.linalg.qr(Z, mode="economic", pivoting=True)
        d = np.abs(np.diag(Rz))
        if np.any(d < self.rank_tol * d[0]):
            bad = sorted(zn[j] for j in pz[d < self.rank_tol * d[0]])
            raise np.linalg.LinAlgError(f"instrument matrix is rank deficient: {bad}")
        Xhat = Qz @ (Qz.T @ X)
        # exogenous columns project onto themselves; keep them exact
        Xhat[:, exo] = X[:, exo]
        beta, R, perm = qr_solve(Xhat, y, names, self.rank_tol)
        resid = y - X @ beta
        V = clustered_cov(Xhat, resid, codes, G, bread_from_qr(R, perm))
        ssr = float(resid @ resid)
        yc = y - y.mean()
        tss = float(yc @ yc)
        r2 = 1.0 - ssr / tss if tss > 0 else math.nan
        self.coef_ = beta
        self.cov_ = V
        self.resid_ = resid
        self.n_features_in_ = k
        self.feature_names_in_ = np.array(names, dtype=object)
        self._Z, self._X, self._y, self._codes, self._G = Z, X, y, codes, G
        self.report_ = EstimateReport(
            names=names, coef=beta, cov=V, n=n, k=k, n_clusters=G, r2=r2,
            adj_r2=1.0 - (1.0 - r2) * (n - 1) / (n - k), rmse=math.sqrt(ssr / n),
            label=self.label, estimator="2sls",
            extra={"endogenous": [names[j] for j in endo],
                   "instruments": zn[len(exo):], "n_instruments": int(Zx.shape[1])},
        )
        self.hansen_j_ = hansen_j(Z, X, y, codes, G)
        self.report_.extra["hansen_j"] = self.hansen_j_.to_dict()
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X, _ = check_design(X, min_rows_over_cols=False)
        return X @ self.coef_


def hansen_j(Z, X, y, codes, n_groups):
    """Hansen's J from two-step efficient GMM.

    The clustered moment covariance ``S`` is estimated from 2SLS residuals,
    the efficient GMM estimate is computed with weight ``S^{-1}``, and
    ``J = n gbar' S^{-1} gbar`` at that estimate.
    """
    n, L = Z.shape
    K = X.shape[1]
    df = L - K
    if df <= 0:
        return HansenJ(0.0, 0, 1.0, testable=False)
    Qz, Rz = np.linalg.qr(Z)
    Xhat = Qz @ (Qz.T @ X)
    b2, *_ = np.linalg.lstsq(Xhat, y, rcond=None)
    e = y - X @ b2
    scores = np.zeros((n_groups, L))
    np.add.at(scores, codes, Z * e[:, None])
    S = scores.T @ scores / n
    Sc = scipy.linalg.cho_factor(S)
    ZX, Zy = Z.T @ X / n, Z.T @ y / n
    A = ZX.T @ scipy.linalg.cho_solve(Sc, ZX)
    bg = np.linalg.solve(A, ZX.T @ scipy.linalg.cho_solve(Sc, Zy))
    g = Z.T @ (y - X @ bg) / n
    J = float(n * g @ scipy.linalg.cho_solve(Sc, g))
    return HansenJ(J, df, float(stats.chi2.sf(J, df)))


@dataclass
class IVSystem:
    main: TwoStageLeastSquares
    first_stages: list
    leave_one_out: list
    n: int

    def reports(self):
        out = [self.main.report_] + [fs.report for fs in self.first_stages]
        out += [m.report_ for m in self.leave_one_out]
        return out

    def to_dict(self):
        return {
            "schema_version": 1,
            "n": self.n,
            "main": self.main.report_.to_dict(),
            "hansen_j": self.main.hansen_j_.to_dict(),
            "first_stages": [fs.to_dict() for fs in self.first_stages],
            "leave_one_out": [
                {"dropped": m.report_.extra.get("dropped_instrument"),
                 "report": m.report_.to_dict(), "hansen_j": m.hansen_j_.to_dict()}
                for m in self.leave_one_out
            ],
        }


def fit_iv(y, exog, endog, instruments, groups=None, *, exog_names=None, endog_names=None,
           instrument_names=None, leave_one_out=True, n_jobs=1, label="iv"):
    """Full system: 2SLS, one first stage per endogenous variable, and optional
    leave-one-instrument-out refits, all on the same rows."""
    W = np.atleast_2d(np.asarray(exog, dtype=np.float64))
    E = np.atleast_2d(np.asarray(endog, dtype=np.float64))
    Z = np.atleast_2d(np.asarray(instruments, dtype=np.float64))
    wn = column_names(exog_names, W.shape[1], "w")
    en = column_names(endog_names, E.shape[1], "endog")
    zn = column_names(instrument_names, Z.shape[1], "z")
    X = np.hstack([W, E])
    names = wn + en
    endo_idx = list(range(W.shape[1], X.shape[1]))

    def fit_one(keep, tag):
        m = TwoStageLeastSquares(endogenous=endo_idx, label=tag)
        return m.fit(X, y, instruments=Z[:, keep], groups=groups, feature_names=names,
                     instrument_names=[zn[j] for j in keep])

    main = fit_one(list(range(Z.shape[1])), label)
    firsts = [first_stage(E[:, j], Z, W, groups, endog_name=en[j], instrument_names=zn,
                          exog_names=wn) for j in range(E.shape[1])]
    loo = []
    if leave_one_out:
        jobs = [([j for j in range(Z.shape[1]) if j != d], f"{label} without {zn[d]}", zn[d])
                for d in range(Z.shape[1])]
        if n_jobs > 1:
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                fits = list(pool.map(lambda a: fit_one(a[0], a[1]), jobs))
        else:
            fits = [fit_one(keep, tag) for keep, tag, _ in jobs]
        for m, (_, _, dropped) in zip(fits, jobs):
            m.report_.extra["dropped_instrument"] = dropped
            loo.append(m)
    return IVSystem(main, firsts, loo, len(np.asarray(y)))


EMPLOYMENT = {"name": "employment", "transform": "log"}
EMPLOYMENT_COLUMN = "d_log_employment"


def iv_spec(spec):
    """Spec with the employment change added as a regressor when it is instrumented."""
    from dataclasses import replace

    from .panel import VarSpec

    if spec.split is None:
        raise ConfigurationError(f"{spec.name}: the IV system needs a split regressor")
    if spec.employment == "endogenous":
        return replace(spec, regressors=[*spec.regressors, VarSpec.parse(EMPLOYMENT)])
    return spec


def fit_iv_panel(frame, spec, instruments, *, n_jobs=1, leave_one_out=True):
    """Join a built panel with its instruments and fit the IV system.

    ``frame`` must come from ``build_panel(series, iv_spec(spec))``; ``spec``
    may be either the preset or its ``iv_spec`` form. With
    ``spec.employment == "endogenous"`` the rent split and the employment
    change are instrumented by all four Bartik terms. With
    ``"predicted-exogenous"`` the Bartik value itself enters as an exogenous
    control and its three interactions instrument the rent split.

    Returns ``(IVSystem, DropLog)``; MSA-periods without instruments are
    dropped and logged.
    """
    inst = instruments.frame
    merged = frame.merge(inst, on=["msa_id", "period"], how="left", validate="one_to_one")
    missing = merged[list(INSTRUMENT_NAMES)].isna().any(axis=1)
    log = DropLog()
    log.extend(instruments.drop_log)
    for msa, period in merged.loc[missing, ["msa_id", "period"]].itertuples(index=False):
        log.add(msa, period, "missing instruments")
    merged = merged.loc[~missing].reset_index(drop=True)
    split = [f"{spec.split.column}_plus", f"{spec.split.column}_minus"]
    controls = ["intercept"] + [v.column for v in spec.regressors + spec.covariates
                                if v.column != EMPLOYMENT_COLUMN] + spec.dummy_columns
    if spec.employment == "endogenous":
        endog = split + [EMPLOYMENT_COLUMN]
        z = list(INSTRUMENT_NAMES)
    else:
        endog = split
        controls = controls + ["bartik"]
        z = list(INSTRUMENT_NAMES[1:])
    system = fit_iv(
        merged["dy"].to_numpy(dtype=np.float64),
        merged[controls].to_numpy(dtype=np.float64),
        merged[endog].to_numpy(dtype=np.float64),
        merged[z].to_numpy(dtype=np.float64),
        merged["cluster"].to_numpy(),
        exog_names=controls, endog_names=endog, instrument_names=z,
        leave_one_out=leave_one_out, n_jobs=n_jobs, label=spec.label or spec.name,
    )
    return system, log


# --- I/O ------------------------------------------------------------------------

def _read_csv(path, required):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    df = pd.read_csv(path, dtype={"msa_id": str, "naics2": str})
    missing = set(required) - set(df.columns)
    if missing:
        raise ConfigurationError(f"{path}: missing columns {sorted(missing)}")
    return df


def read_shares_csv(path):
    return _read_csv(path, ("msa_id", "year", "naics2", "share"))


def read_growth_csv(path):
    return _read_csv(path, ("naics2", "year", "log_growth"))


def read_eta_csv(path):
    """Time-invariant supply constraints; a ``year`` column with several values is rejected."""
    df = _read_csv(path, ("msa_id", *ETA_COLUMNS))
    if "year" in df.columns and df["year"].nunique() > 1:
        raise ConfigurationError(f"{path}: supply constraints must be time-invariant "
                                 "(one row per MSA, no varying year)")
    if df["msa_id"].duplicated().any():
        raise ConfigurationError(f"{path}: duplicate msa_id rows")
    if (df["elasticity"] <= 0).any():
        raise ConfigurationError(f"{path}: elasticity must be positive")
    if ((df["undevelopable_share"] < 0) | (df["undevelopable_share"] > 1)).any():
        raise ConfigurationError(f"{path}: undevelopable_share must lie in [0, 1]")
    return df


def write_csv_rows(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
