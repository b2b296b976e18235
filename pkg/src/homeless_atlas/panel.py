"""Long-differenced MSA panel construction and data sanity statistics.

Raw inputs are a long table with one row per ``(msa_id, year)`` and one
column per variable. A :class:`SpecConfig` names the outcome, the variable
split into positive and negative changes, covariates and periods; every
excluded MSA-period is recorded in a :class:`DropLog`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import ConfigurationError

DERIVED_RATES = {
    # name: (numerator, default denominator)
    "chronic_rate": ("chronic_count", "population"),
    "crowded_rate": ("crowded_units", "total_units"),
    "homeless_rate": ("homeless_count", "population"),
}


@dataclass
class DropEntry:
    msa_id: str
    period: str
    reason: str


@dataclass
class DropLog:
    entries: list = field(default_factory=list)

    def add(self, msa_id, period, reason):
        self.entries.append(DropEntry(str(msa_id), str(period), reason))

    def extend(self, other):
        self.entries.extend(other.entries)

    def __len__(self):
        return len(self.entries)

    def summary(self):
        counts = {}
        for e in self.entries:
            counts[e.reason] = counts.get(e.reason, 0) + 1
        return dict(sorted(counts.items()))

    def to_records(self):
        return [asdict(e) for e in self.entries]


# --- elementary transforms ---------------------------------------------------

def deflate(nominal, deflator):
    """Convert nominal dollars to base-year dollars: ``nominal / deflator``."""
    d = np.asarray(deflator, dtype=np.float64)
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise ValueError(f"deflator must be positive and finite, got {deflator!r}")
    out = np.asarray(nominal, dtype=np.float64) / d
    return float(out) if out.ndim == 0 else out


def piecewise_split(delta):
    """Split a change into ``(max(delta, 0), min(delta, 0))``; the knot maps to (0, 0)."""
    d = np.asarray(delta, dtype=np.float64)
    plus = np.maximum(d, 0.0) + 0.0
    minus = np.minimum(d, 0.0) + 0.0
    if d.ndim == 0:
        return float(plus), float(minus)
    return plus, minus


def crowded_rate(crowded, total):
    """Share of crowded units. Returns NaN where ``total <= 0``."""
    c = np.asarray(crowded, dtype=np.float64)
    t = np.asarray(total, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(t > 0, c / np.where(t > 0, t, 1.0), np.nan)
    return float(out) if out.ndim == 0 else out


def period_label(t0, t1):
    return f"{int(t0)}-{int(t1)}"


def long_difference(series, variable, t0, t1, transform="level"):
    """Per-MSA change of ``variable`` between ``t0`` and ``t1``.

    Returns ``(pd.Series indexed by msa_id, DropLog)``. Dropped and logged:
    MSAs lacking a row for either year ("missing year"), rows whose value is
    NaN, e.g. a rate with a zero denominator ("undefined value"), and
    nonpositive values under ``transform="log"``.
    """
    if transform not in ("level", "log"):
        raise ConfigurationError(f"unknown transform {transform!r}")
    if variable not in series.columns:
        raise ConfigurationError(f"unknown variable {variable!r}")
    label = period_label(t0, t1)
    wide = series.pivot_table(index="msa_id", columns="year", values=variable, aggfunc="first",
                              dropna=False)
    present = set(zip(series["msa_id"], series["year"]))
    log = DropLog()
    out = {}
    for msa in sorted(series["msa_id"].unique()):
        if (msa, t0) not in present or (msa, t1) not in present:
            log.add(msa, label, "missing year")
            continue
        row = wide.loc[msa]
        a, b = row.get(t0, np.nan), row.get(t1, np.nan)
        if not (np.isfinite(a) and np.isfinite(b)):
            log.add(msa, label, "undefined value")
            continue
        if transform == "log":
            if a <= 0 or b <= 0:
                log.add(msa, label, "nonpositive under log")
                continue
            out[msa] = math.log(b) - math.log(a)
        else:
            out[msa] = b - a
    return pd.Series(out, dtype=np.float64, name=variable), log


# --- sanity statistics ---------------------------------------------------------

@dataclass
class CorrelationResult:
    r: float
    t: float
    p: float
    stars: str
    n: int
    n_dropped: int = 0


def significance_stars(p, legend=((0.001, "***"), (0.01, "**"), (0.05, "*"))):
    for cut, mark in legend:
        if p < cut:
            return mark
    return ""


def correlation_test(x, y):
    """Pearson correlation with a two-sided Student-t test on ``n - 2`` df.

    Non-finite pairs are deleted pairwise and counted in ``n_dropped``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("x and y must have the same length")
    ok = np.isfinite(x) & np.isfinite(y)
    x, y, dropped = x[ok], y[ok], int((~ok).sum())
    n = len(x)
    if n < 3:
        raise ValueError(f"need at least 3 finite pairs, got {n}")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0 or syy == 0:
        raise ValueError("correlation undefined: zero variance")
    r = float(np.clip((xc @ yc) / math.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) == 1.0:
        t, p = math.copysign(math.inf, r), 0.0
    else:
        t = r * math.sqrt((n - 2) / (1 - r * r))
        p = float(2 * stats.t.sf(abs(t), n - 2))
    return CorrelationResult(r, t, p, significance_stars(p), n, dropped)


def summary_stats(frame, columns, by="year"):
    """Per-group count of rows and arithmetic means of ``columns``."""
    g = frame.groupby(by, sort=True)
    out = g[list(columns)].mean()
    out.insert(0, "count", g.size())
    return out.reset_index()


# --- spec-driven panel ---------------------------------------------------------

@dataclass
class VarSpec:
    name: str
    transform: str = "level"
    real: bool = False
    label: str | None = None

    @classmethod
    def parse(cls, obj):
        if isinstance(obj, VarSpec):
            return obj
        if isinstance(obj, str):
            return cls(obj)
        return cls(**obj)

    @property
    def column(self):
        stem = f"d_log_{self.name}" if self.transform == "log" else f"d_{self.name}"
        return stem


@dataclass
class SpecConfig:
    """Declarative description of one estimating equation.

    ``split`` is the regressor entered in piecewise-linear form (rent, or
    unemployment for the labor-market variant); ``regressors`` enter as plain
    differences ahead of ``covariates``.
    """

    name: str
    outcome: VarSpec
    periods: list
    split: VarSpec | None = None
    regressors: list = field(default_factory=list)
    covariates: list = field(default_factory=list)
    estimator: str = "ols"
    rate_denominator: str = "population"
    outcome_scale: float = 1.0
    employment: str = "endogenous"
    label: str | None = None

    def __post_init__(self):
        self.outcome = VarSpec.parse(self.outcome)
        self.split = None if self.split is None else VarSpec.parse(self.split)
        self.regressors = [VarSpec.parse(v) for v in self.regressors]
        self.covariates = [VarSpec.parse(v) for v in self.covariates]
        self.periods = [tuple(int(t) for t in p) for p in self.periods]
        if not self.periods:
            raise ConfigurationError(f"{self.name}: at least one period is required")
        for t0, t1 in self.periods:
            if t1 <= t0:
                raise ConfigurationError(f"{self.name}: period {t0}-{t1} is not increasing")
        if self.estimator not in ("ols", "qd", "iv"):
            raise ConfigurationError(f"{self.name}: unknown estimator {self.estimator!r}")
        if self.employment not in ("endogenous", "predicted-exogenous"):
            raise ConfigurationError(f"{self.name}: unknown employment mode {self.employment!r}")
        if self.outcome_scale <= 0:
            raise ConfigurationError(f"{self.name}: outcome_scale must be positive")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def variables(self):
        vs = [self.outcome] + ([self.split] if self.split else []) + self.regressors + self.covariates
        return vs

    @property
    def period_labels(self):
        return [period_label(*p) for p in self.periods]

    @property
    def dummy_columns(self):
        return [f"period_{lab}" for lab in self.period_labels[1:]]

    @property
    def regressor_columns(self):
        cols = []
        if self.split:
            cols += [f"{self.split.column}_plus", f"{self.split.column}_minus"]
        cols += [v.column for v in self.regressors] + [v.column for v in self.covariates]
        return cols

    @property
    def design_columns(self):
        return ["intercept"] + self.regressor_columns + self.dummy_columns


def add_derived(series, rate_denominator="population", log=None):
    """Append derived rate columns (chronic, crowded, homeless) where inputs exist."""
    df = series.copy()
    for name, (num, den) in DERIVED_RATES.items():
        if name.startswith("crowded"):
            denom = den
        else:
            denom = rate_denominator
        if num in df.columns and denom in df.columns and name not in df.columns:
            d = df[denom].to_numpy(dtype=np.float64)
            bad = ~(d > 0) & np.isfinite(df[num].to_numpy(dtype=np.float64))
            if log is not None:
                for msa, yr in df.loc[bad, ["msa_id", "year"]].itertuples(index=False):
                    log.add(msa, f"{yr}", f"nonpositive denominator for {name}")
            df[name] = crowded_rate(df[num].to_numpy(dtype=np.float64), d)
    return df


def apply_deflator(series, variables, deflator):
    """Deflate the named dollar columns by ``deflator[year]`` (base-1999 index)."""
    df = series.copy()
    if not variables:
        return df
    if deflator is None:
        raise ConfigurationError(f"real-dollar variables {sorted(variables)} need a deflator table")
    years = df["year"].astype(int)
    missing = sorted(set(years) - set(int(k) for k in deflator))
    if missing:
        raise ConfigurationError(f"deflator table lacks years {missing}")
    d = years.map({int(k): float(v) for k, v in deflator.items()}).to_numpy()
    for v in sorted(variables):
        df[v] = deflate(df[v].to_numpy(dtype=np.float64), d)
    return df


def build_panel(series, spec, deflator=None):
    """Build the estimation frame for ``spec``.

    Returns ``(frame, DropLog)``. ``frame`` has one row per MSA x period,
    ordered by ``(msa_id, period)``, with the outcome change ``dy``, outcome
    levels ``y_prev``/``y_curr`` (scaled by ``spec.outcome_scale``), the
    regressor columns of ``spec.design_columns``, ``period`` and ``cluster``.
    """
    if "msa_id" not in series.columns or "year" not in series.columns:
        raise ConfigurationError("series needs msa_id and year columns")
    series = series.copy()
    series["msa_id"] = series["msa_id"].astype(str)
    series["year"] = series["year"].astype(int)
    dup = series.duplicated(["msa_id", "year"])
    if dup.any():
        first = series.loc[dup, ["msa_id", "year"]].iloc[0].tolist()
        raise ConfigurationError(f"duplicate msa-year row {first}")
    series = add_derived(series, spec.rate_denominator)
    for v in spec.variables():
        if v.name not in series.columns:
            raise ConfigurationError(f"{spec.name}: unknown variable {v.name!r}")
    real_vars = {v.name for v in spec.variables() if v.real}
    series = apply_deflator(series, real_vars, deflator)

    msas = sorted(series["msa_id"].unique())
    log = DropLog()
    rows = []
    for (t0, t1), label in zip(spec.periods, spec.period_labels):
        diffs = {}
        dropped = {}
        for v in spec.variables():
            d, dl = long_difference(series, v.name, t0, t1, v.transform)
            diffs[v.column if v is not spec.outcome else "dy"] = d
            for e in dl.entries:
                dropped.setdefault(e.msa_id, f"{e.reason}: {v.name}")
        lv = series[series["year"].isin([t0, t1])].pivot_table(
            index="msa_id", columns="year", values=spec.outcome.name, aggfunc="first")
        for msa in msas:
            if msa in dropped:
                log.add(msa, label, dropped[msa])
                continue
            row = {"msa_id": msa, "period": label, "t0": t0, "t1": t1}
            row["dy"] = float(diffs["dy"][msa])
            row["y_prev"] = float(lv.loc[msa, t0]) * spec.outcome_scale
            row["y_curr"] = float(lv.loc[msa, t1]) * spec.outcome_scale
            if spec.split:
                delta = float(diffs[spec.split.column][msa])
                plus, minus = piecewise_split(delta)
                row[f"{spec.split.column}_plus"] = plus
                row[f"{spec.split.column}_minus"] = minus
                row[f"{spec.split.column}_raw"] = delta
            for v in spec.regressors + spec.covariates:
                row[v.column] = float(diffs[v.column][msa])
            rows.append(row)
    cols = (["msa_id", "period", "t0", "t1", "dy", "y_prev", "y_curr"]
            + [c for c in spec.regressor_columns])
    if spec.split:
        cols.append(f"{spec.split.column}_raw")
    frame = pd.DataFrame(rows, columns=cols)
    frame["intercept"] = 1.0
    for lab, col in zip(spec.period_labels[1:], spec.dummy_columns):
        frame[col] = (frame["period"] == lab).astype(np.float64)
    frame["cluster"] = frame["msa_id"]
    frame = frame.sort_values(["msa_id", "period"], kind="stable").reset_index(drop=True)
    return frame, log


@dataclass
class DesignMatrix:
    X: np.ndarray
    y: np.ndarray
    clusters: np.ndarray
    names: list


def design_matrix(frame, spec, outcome="dy"):
    X = frame[spec.design_columns].to_numpy(dtype=np.float64)
    return DesignMatrix(X, frame[outcome].to_numpy(dtype=np.float64),
                        frame["cluster"].to_numpy(), list(spec.design_columns))


class PanelBuilder(TransformerMixin, BaseEstimator):
    """Transformer wrapper around :func:`build_panel` for pipeline use."""

    def __init__(self, spec=None, deflator=None):
        self.spec = spec
        self.deflator = deflator

    def fit(self, X, y=None):
        if self.spec is None:
            raise ConfigurationError("PanelBuilder needs a spec")
        self.spec_ = self.spec if isinstance(self.spec, SpecConfig) else SpecConfig.from_dict(self.spec)
        return self

    def transform(self, X):
        frame, log = build_panel(X, self.spec_, self.deflator)
        self.drop_log_ = log
        return frame


def crowding_validation(series, years, rate_denominator="population"):
    """Per-year correlation of chronic and crowded rates, in levels and logs,
    plus the per-year means table."""
    df = add_derived(series, rate_denominator)
    corr, means = [], []
    for yr in years:
        sub = df[df["year"] == yr]
        c = sub["crowded_rate"].to_numpy(dtype=np.float64)
        h = sub["chronic_rate"].to_numpy(dtype=np.float64)
        raw = correlation_test(c, h)
        with np.errstate(divide="ignore", invalid="ignore"):
            lc, lh = np.log(c), np.log(h)
        logged = correlation_test(lc, lh)
        corr.append({"year": yr, "raw": raw, "log": logged})
        ok = np.isfinite(c) & np.isfinite(h)
        lok = ok & np.isfinite(lc) & np.isfinite(lh)
        means.append({
            "year": yr, "count": int(ok.sum()),
            "mean_crowded_rate": float(c[ok].mean()) if ok.any() else math.nan,
            "mean_chronic_rate": float(h[ok].mean()) if ok.any() else math.nan,
            "mean_log_crowded": float(lc[lok].mean()) if lok.any() else math.nan,
            "mean_log_chronic": float(lh[lok].mean()) if lok.any() else math.nan,
        })
    return corr, pd.DataFrame(means)
