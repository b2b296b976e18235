"""Named specifications for the regression tables.

Input variable names follow the panel CSV schema documented in the README.
"""

from __future__ import annotations

from .panel import SpecConfig

TWO_PERIODS = [(2011, 2016), (2016, 2020)]
LONG_PERIOD = [(2011, 2020)]

RENT_LOG = {"name": "median_rent", "transform": "log", "real": True}
RENT_LEVEL = {"name": "median_rent", "transform": "level", "real": True}
PA = {"name": "pct_public_assistance", "transform": "level"}
INCOME = {"name": "median_hh_income", "transform": "level", "real": True}
LOG_INCOME = {"name": "median_hh_income", "transform": "log", "real": True}
CHRONIC_LOG = {"name": "chronic_rate", "transform": "log"}
CROWDED_LOG = {"name": "crowded_rate", "transform": "log"}

LABELS = {
    "d_log_median_rent_plus": "Δ log Rent (+)",
    "d_log_median_rent_minus": "Δ log Rent (–)",
    "d_median_rent_plus": "Δ Rent (+)",
    "d_median_rent_minus": "Δ Rent (-)",
    "d_median_rent": "Δ Median Rent",
    "d_pct_public_assistance": "Δ %pop with P.A.",
    "d_median_hh_income": "Δ Median HH Inc.",
    "d_log_median_hh_income": "Δ log Median HH Inc.",
    "d_log_unemployment_rate_plus": "Δ log Unemp (+)",
    "d_log_unemployment_rate_minus": "Δ log Unemp (–)",
    "d_unemployment_rate_plus": "Δ Unemp (+)",
    "d_unemployment_rate_minus": "Δ Unemp (-)",
    "d_log_vacancy_rate": "Δ log Vacancy Rate",
    "d_log_employment": "Δ log Employment",
    "period_2016-2020": "Years 2016-2020 Trend",
    "intercept": "Constant",
}
for q in range(1, 6):
    LABELS[f"d_log_income_q{q}"] = f"Δ log Quintile {q} Inc."
for p in (5, 15, 25, 50):
    LABELS[f"d_log_rent_p{p}_plus"] = f"Δ Rent {p}th pct (IPUMS) (+)"
    LABELS[f"d_log_rent_p{p}_minus"] = f"Δ Rent {p}th pct (IPUMS) (-)"


def _spec(name, **kw):
    kw.setdefault("periods", TWO_PERIODS)
    return SpecConfig(name=name, **kw)


def _build():
    p = {}
    p["table3-col1"] = _spec("table3-col1", outcome=CHRONIC_LOG, split=RENT_LOG,
                             covariates=[PA, INCOME], label="Δ log Chronic Rate")
    p["table3-col2"] = _spec("table3-col2", outcome=CROWDED_LOG, split=RENT_LOG,
                             covariates=[PA, INCOME], label="Δ log Crowded Rate")
    p["table3-col3"] = _spec("table3-col3", outcome=CHRONIC_LOG, split=RENT_LOG,
                             covariates=[PA, INCOME], periods=LONG_PERIOD,
                             label="Δ log Chronic Rate")
    p["table3-col4"] = _spec("table3-col4", outcome=CROWDED_LOG, split=RENT_LOG,
                             covariates=[PA, INCOME], periods=LONG_PERIOD,
                             label="Δ log Crowded Rate")
    for q in range(1, 6):
        p[f"table6-q{q}"] = _spec(
            f"table6-q{q}", outcome=CHRONIC_LOG, split=RENT_LOG,
            covariates=[PA, {"name": f"income_q{q}", "transform": "log", "real": True}],
            label="Δ log Chronic Rate")
    for pct in (5, 15, 25, 50):
        p[f"table7-p{pct}"] = _spec(
            f"table7-p{pct}", outcome=CHRONIC_LOG,
            split={"name": f"rent_p{pct}", "transform": "log", "real": True},
            covariates=[PA, LOG_INCOME], periods=LONG_PERIOD, label="Δ log Chronic Rate")
    p["table8-col1"] = _spec("table8-col1", outcome={"name": "vacancy_rate", "transform": "log"},
                             regressors=[RENT_LEVEL], label="Δ Log Vacancy Rate")
    p["table8-col2"] = _spec("table8-col2", outcome=RENT_LEVEL,
                             regressors=[{"name": "vacancy_rate", "transform": "log"}],
                             label="Δ Median Rent")
    unemp_log = {"name": "unemployment_rate", "transform": "log"}
    p["note2-col1"] = _spec("note2-col1", outcome=CHRONIC_LOG, split=unemp_log,
                            covariates=[PA, INCOME], label="Δ log Chronic Rate")
    p["note2-col2"] = _spec("note2-col2", outcome=CHRONIC_LOG, split=unemp_log,
                            covariates=[PA], label="Δ log Chronic Rate")
    p["note2-col3"] = _spec("note2-col3", outcome=CROWDED_LOG, split=unemp_log,
                            covariates=[PA, INCOME], label="Δ log Crowded Rate")
    chronic = {"name": "chronic_rate"}
    crowded = {"name": "crowded_rate"}
    p["table5-col1"] = _spec("table5-col1", estimator="qd", outcome=chronic, split=RENT_LEVEL,
                             covariates=[PA, INCOME], label="Δ Chronic Rate")
    p["table5-col2"] = _spec("table5-col2", estimator="qd", outcome=crowded, split=RENT_LEVEL,
                             covariates=[PA, INCOME], label="Δ Crowded Rate")
    unemp = {"name": "unemployment_rate"}
    p["note2-mm-col1"] = _spec("note2-mm-col1", estimator="qd", outcome=chronic, split=unemp,
                               covariates=[PA, INCOME], label="Δ Chronic Rate")
    p["note2-mm-col2"] = _spec("note2-mm-col2", estimator="qd", outcome=crowded, split=unemp,
                               covariates=[PA, INCOME], label="Δ Crowded Rate")
    p["iv-main"] = _spec("iv-main", estimator="iv", outcome=CHRONIC_LOG, split=RENT_LOG,
                         covariates=[PA, INCOME], label="Δ log Chronic Rate")
    p["iv-note1"] = _spec("iv-note1", estimator="iv", outcome=CHRONIC_LOG, split=RENT_LOG,
                          covariates=[PA, INCOME], employment="predicted-exogenous",
                          label="Δ log Chronic Rate")
    return p


PRESETS = _build()


def get_preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
