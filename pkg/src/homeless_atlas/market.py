"""Simulator of the minimum-quality rental market with homelessness scarring.

Utility is ``U(H, x) = (1 + a H) * sqrt(x)``: increasing in both goods,
strictly concave in ``x``, and with ``dU/dx`` nondecreasing in ``H``. Each
agent's willingness to pay for a minimum-quality unit is the smaller of

* the homeless bid ``B_H``: indifference between the unit and homelessness;
* the marginal bid ``B_1``: indifference between the unit and the next
  quality ``H_next`` bought at ``P_next`` (only when ``Y > P_next``).

Agents with ``B_1 < 0`` prefer ``H_next`` at any price and stay out of the
market. Prices are total prices of a unit of the given quality.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import optimize

INCOME_FLOOR = 1e-6


class MarketError(ValueError):
    pass


@dataclass(frozen=True)
class UtilityParams:
    a: float = 1.0
    h_min: float = 1.0
    h_next: float = 2.0
    p_min: float = 30.0
    p_next: float = 90.0

    def __post_init__(self):
        if not self.a > 0:
            raise MarketError("a must be positive")
        if not 0 < self.h_min < self.h_next:
            raise MarketError("need 0 < h_min < h_next")
        if not 0 <= self.p_min < self.p_next:
            raise MarketError("prices must be strictly increasing in quality")

    def utility(self, H, x):
        return (1.0 + self.a * np.asarray(H, dtype=np.float64)) * np.sqrt(
            np.maximum(np.asarray(x, dtype=np.float64), 0.0))


# --- bid rents -----------------------------------------------------------------

def bid_rent_homeless(Y, H, params):
    """Payment leaving the agent indifferent between quality ``H`` and homelessness.

    Closed form ``Y * (1 - 1 / (1 + a H)^2)``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if np.any(~(Y > 0)):
        raise MarketError("income must be positive")
    out = Y * (1.0 - 1.0 / (1.0 + params.a * np.asarray(H, dtype=np.float64)) ** 2)
    return float(out) if out.ndim == 0 else out


def _bisect(f, lo, hi, xtol=1e-13):
    return optimize.bisect(f, lo, hi, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=400)


def bid_rent_homeless_bisect(Y, H, params, utility=None):
    """Root of ``U(H, Y - B) = U(0, Y)`` on ``[0, Y]``; works for any utility."""
    if not Y > 0:
        raise MarketError("income must be positive")
    u = utility or params.utility
    target = float(u(0.0, Y))
    f = lambda B: float(u(H, Y - B)) - target  # noqa: E731
    if f(0.0) <= 0:
        return 0.0
    return _bisect(f, 0.0, Y)


def bid_rent_marginal(Y, params):
    """Payment for ``H_min`` leaving the agent indifferent with ``H_next`` at ``P_next``.

    Closed form ``Y - (Y - P_next) * ((1 + a H_next) / (1 + a H_min))^2``.
    Raises :class:`MarketError` when the root is not in ``[0, Y)``.
    """
    if not Y > params.p_next:
        raise MarketError("agent cannot afford the next-preferred quality")
    r2 = ((1 + params.a * params.h_next) / (1 + params.a * params.h_min)) ** 2
    b = Y - (Y - params.p_next) * r2
    if b < 0:
        raise MarketError(f"no root in [0, Y): marginal bid is {b:.6g}")
    return b


def bid_rent_marginal_bisect(Y, params, utility=None):
    if not Y > params.p_next:
        raise MarketError("agent cannot afford the next-preferred quality")
    u = utility or params.utility
    target = float(u(params.h_next, Y - params.p_next))
    f = lambda B: float(u(params.h_min, Y - B)) - target  # noqa: E731
    if f(0.0) < 0:
        raise MarketError("no root in [0, Y): agent never demands the minimum quality")
    return _bisect(f, 0.0, Y)


def cutoff_income(params, price=None):
    """Income at which the homeless bid for ``H_min`` equals its price."""
    p = params.p_min if price is None else price
    return p / (1.0 - 1.0 / (1.0 + params.a * params.h_min) ** 2)


def cutoff_income_root(params, price=None):
    p = params.p_min if price is None else price
    if p == 0:
        return 0.0
    hi = 1.0
    while bid_rent_homeless(hi, params.h_min, params) < p:
        hi *= 2.0
    return optimize.brentq(lambda Y: bid_rent_homeless(Y, params.h_min, params) - p,
                           0.0 + 1e-300, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)


# --- demand and equilibrium ----------------------------------------------------

@dataclass
class DemandCurve:
    """Participants' bids sorted nonincreasing (ties by agent id)."""

    bids: np.ndarray
    ids: np.ndarray
    marginal: np.ndarray  # True where the bid is the next-quality (B_1) bid

    def __len__(self):
        return len(self.bids)


def agent_bids(incomes, params):
    """Per-agent bid for ``H_min``; NaN for agents who never demand it."""
    Y = np.asarray(incomes, dtype=np.float64)
    bh = bid_rent_homeless(Y, params.h_min, params)
    r2 = ((1 + params.a * params.h_next) / (1 + params.a * params.h_min)) ** 2
    can_next = Y > params.p_next
    b1 = np.where(can_next, Y - (Y - params.p_next) * r2, np.inf)
    bid = np.minimum(bh, b1)
    marginal = can_next & (b1 < bh)
    out_of_market = can_next & (b1 < 0)
    bid = np.where(out_of_market, np.nan, bid)
    return bid, marginal & ~out_of_market


def demand_curve(incomes, params, ids=None):
    bid, marginal = agent_bids(incomes, params)
    ids = np.arange(len(bid)) if ids is None else np.asarray(ids)
    keep = np.isfinite(bid)
    bid, marginal, ids = bid[keep], marginal[keep], ids[keep]
    order = np.lexsort((ids, -bid))
    return DemandCurve(bid[order], ids[order], marginal[order])


@dataclass(frozen=True)
class SupplyCurve:
    """Piecewise-linear nondecreasing price -> quantity, flat beyond the end points."""

    prices: tuple
    quantities: tuple

    def __post_init__(self):
        p = np.asarray(self.prices, dtype=np.float64)
        q = np.asarray(self.quantities, dtype=np.float64)
        if p.ndim != 1 or p.shape != q.shape or len(p) == 0:
            raise MarketError("supply needs matching, nonempty price and quantity lists")
        if np.any(np.diff(p) < 0) or np.any(np.diff(q) < 0) or np.any(q < 0):
            raise MarketError("supply must be nondecreasing with nonnegative quantities")
        object.__setattr__(self, "prices", tuple(p.tolist()))
        object.__setattr__(self, "quantities", tuple(q.tolist()))

    @classmethod
    def vertical(cls, q):
        return cls((0.0,), (float(q),))

    def __call__(self, price):
        p, q = np.asarray(self.prices), np.asarray(self.quantities)
        if len(p) == 1:
            return np.full_like(np.asarray(price, dtype=np.float64), q[0])
        return np.interp(price, p, q)

    def scaled(self, factor):
        return SupplyCurve(self.prices, tuple(v * factor for v in self.quantities))

    def sup_price_at_most(self, units):
        """``sup{p : floor(S(p)) <= units}`` elementwise; ``inf`` if never exceeded,
        ``-inf`` if already exceeded at every price."""
        units = np.asarray(units, dtype=np.float64)
        p = np.asarray(self.prices)
        q = np.asarray(self.quantities)
        limit = np.atleast_1d(units + 1.0)  # floor(S) <= units  <=>  S < units + 1
        j = np.searchsorted(q, limit, side="left")
        out = np.full(limit.shape, math.inf)
        out[j == 0] = -math.inf
        mid = (j > 0) & (j < len(q))
        jm = j[mid]
        p0, p1, q0, q1 = p[jm - 1], p[jm], q[jm - 1], q[jm]
        out[mid] = p0 + (limit[mid] - q0) / (q1 - q0) * (p1 - p0)
        return float(out[0]) if units.ndim == 0 else out


@dataclass
class Equilibrium:
    price: float
    quantity: int
    housed_ids: np.ndarray
    homeless_ids: np.ndarray
    upgraded_ids: np.ndarray
    degenerate: str = ""


def equilibrium(demand, supply):
    """Clear the step demand against a supply curve.

    The price is the highest price at which demand still covers integer
    supply (``sup{p : D(p) >= floor(S(p))}``), capped at the highest bid; the
    top ``Q = min(D(p), floor(S(p)))`` bidders are housed. Unhoused bidders
    whose binding alternative is the next quality move up to it; the rest
    are homeless. Supply exceeding all demand at price zero gives price 0
    with everyone housed (flagged ``"excess supply"``).
    """
    b = demand.bids
    n = len(b)
    empty = np.empty(0, dtype=demand.ids.dtype)
    if n == 0:
        return Equilibrium(0.0, 0, empty, empty, empty, "no participants")
    best = clearing_price(b, supply)
    degenerate = ""
    if best < 0:
        price, Q, degenerate = 0.0, n, "excess supply"
    else:
        price = min(best, float(b[0]))
        d_at = int(np.count_nonzero(b >= price))
        s_at = int(math.floor(float(supply(price)) + 1e-9))
        Q = min(d_at, s_at)
        if s_at == 0:
            degenerate = "no supply"
    housed = demand.ids[:Q]
    rest = slice(Q, n)
    upgraded = demand.ids[rest][demand.marginal[rest]]
    homeless = demand.ids[rest][~demand.marginal[rest]]
    return Equilibrium(float(price), int(Q), housed, homeless, upgraded, degenerate)


def clearing_price(bids, supply):
    """``sup{p : #{bids >= p} >= floor(S(p))}`` for bids sorted nonincreasing.

    Demand equals ``k`` on ``(b[k], b[k-1]]``; on that interval the condition
    holds up to ``sup{p : floor(S(p)) <= k}``. Returns ``inf`` when supply
    never exceeds demand and ``-inf`` when the condition fails everywhere.
    """
    b = np.asarray(bids, dtype=np.float64)
    n = len(b)
    k = np.arange(n + 1)
    upper = np.concatenate([[math.inf], b])
    lower = np.concatenate([b, [-math.inf]])
    cand = np.minimum(upper, supply.sup_price_at_most(k))
    ok = (upper > lower) & (cand > lower)
    return float(cand[ok].max()) if ok.any() else -math.inf


def classify_at_price(incomes, params, price):
    """Boolean homeless flags when ``H_min`` rents for ``price`` with unlimited supply."""
    bid, marginal = agent_bids(incomes, params)
    return np.isfinite(bid) & (bid < price) & ~marginal


# --- dynamics ------------------------------------------------------------------------

@dataclass
class MarketConfig:
    """Everything needed to run a market.

    ``supply`` is ``{"prices": [...], "quantities": [...]}`` or a
    :class:`SupplyCurve`; ``epsilon`` is the half-width of a uniform income
    shock (0 disables noise).
    """

    utility: UtilityParams = field(default_factory=UtilityParams)
    n_agents: int = 10_000
    income_log_mean: float = math.log(100.0)
    income_log_sd: float = 0.4
    supply: SupplyCurve = field(default_factory=lambda: SupplyCurve((20.0, 80.0), (6000.0, 9000.0)))
    delta: float = -15.0
    epsilon: float = 2.0
    income_floor: float = INCOME_FLOOR
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.utility, dict):
            self.utility = UtilityParams(**self.utility)
        if isinstance(self.supply, dict):
            self.supply = SupplyCurve(tuple(self.supply["prices"]), tuple(self.supply["quantities"]))
        if self.delta > 0:
            raise MarketError("delta must be nonpositive")
        if self.epsilon < 0:
            raise MarketError("epsilon half-width must be nonnegative")
        if self.income_floor <= 0:
            raise MarketError("income floor must be positive")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["supply"] = {"prices": list(self.supply.prices), "quantities": list(self.supply.quantities)}
        return d

    def initial_incomes(self, rng=None):
        rng = rng or np.random.default_rng(self.seed)
        return rng.lognormal(self.income_log_mean, self.income_log_sd, self.n_agents)


@dataclass
class MarketState:
    period: int
    incomes: np.ndarray
    price: float
    quantity: int
    homeless: np.ndarray  # bool per agent
    upgraded: np.ndarray
    degenerate: str = ""

    @property
    def homeless_count(self):
        return int(self.homeless.sum())

    @property
    def housed_count(self):
        return len(self.incomes) - self.homeless_count

    def row(self):
        h = self.homeless
        mean_h = float(self.incomes[h].mean()) if h.any() else math.nan
        mean_o = float(self.incomes[~h].mean()) if (~h).any() else math.nan
        return {"t": self.period, "price": self.price, "quantity": self.quantity,
                "homeless_count": self.homeless_count,
                "mean_income_homeless": mean_h, "mean_income_housed": mean_o}


def clear(incomes, params, supply, period=0):
    eq = equilibrium(demand_curve(incomes, params), supply)
    homeless = np.zeros(len(incomes), dtype=bool)
    homeless[eq.homeless_ids] = True
    upgraded = np.zeros(len(incomes), dtype=bool)
    upgraded[eq.upgraded_ids] = True
    return MarketState(period, np.asarray(incomes, dtype=np.float64), eq.price, eq.quantity,
                       homeless, upgraded, eq.degenerate)


def step_dynamics(state, config, rng):
    """Next-period incomes: ``Y + delta * homeless + eps``, floored."""
    Y = state.incomes + config.delta * state.homeless
    if config.epsilon > 0:
        Y = Y + rng.uniform(-config.epsilon, config.epsilon, len(Y))
    return np.maximum(Y, config.income_floor)


@dataclass
class SimulationResult:
    states: list
    asymmetry: dict | None = None

    def rows(self):
        return [s.row() for s in self.states]


def simulate(config, shocks=None, T=2, *, incomes=None, asymmetry_shift=None):
    """Iterate demand -> equilibrium -> income dynamics for ``T`` periods.

    ``shocks`` maps period -> multiplicative factor on base supply
    quantities. With ``asymmetry_shift=s`` the two-branch experiment is run
    from the final state (see :func:`asymmetry_experiment`).
    """
    if T < 2:
        raise MarketError("T must be at least 2")
    shocks = shocks or {}
    rng = np.random.default_rng(config.seed)
    Y = config.initial_incomes(rng) if incomes is None else np.asarray(incomes, dtype=np.float64)
    states = []
    for t in range(T):
        supply = config.supply.scaled(float(shocks.get(t, 1.0)))
        state = clear(Y, config.utility, supply, period=t)
        states.append(state)
        if t < T - 1:
            Y = step_dynamics(state, config, rng)
    result = SimulationResult(states)
    if asymmetry_shift is not None:
        result.asymmetry = asymmetry_experiment(states[-1], config, asymmetry_shift,
                                                supply_factor=float(shocks.get(T - 1, 1.0)),
                                                rng=rng)
    return result


def asymmetry_experiment(state, config, shift, *, supply_factor=1.0, rng=None):
    """Two branches from one state: supply scaled by ``1 - shift`` and ``1 + shift``.

    Both branches share the same next-period incomes (one draw of the income
    shocks, scarring applied to the currently homeless).
    """
    if not 0 < shift < 1:
        raise MarketError("shift must lie in (0, 1)")
    rng = rng or np.random.default_rng(config.seed + 1)
    Y = step_dynamics(state, config, rng)
    base = config.supply.scaled(supply_factor)
    inward = clear(Y, config.utility, base.scaled(1 - shift), state.period + 1)
    outward = clear(Y, config.utility, base.scaled(1 + shift), state.period + 1)
    unchanged = clear(Y, config.utility, base, state.period + 1)
    up = inward.homeless_count - state.homeless_count
    down = state.homeless_count - outward.homeless_count
    return {
        "shift": shift,
        "base": {"price": state.price, "homeless": state.homeless_count},
        "no_shock": {"price": unchanged.price, "homeless": unchanged.homeless_count},
        "inward": {"d_price": inward.price - state.price, "d_homeless": up},
        "outward": {"d_price": outward.price - state.price, "d_homeless": -down},
        "homeless_increase": up,
        "homeless_decrease": down,
        "ratio": (up / down) if down > 0 else (math.inf if up > 0 else math.nan),
    }


# --- simulate -> estimate bridge ----------------------------------------------------

def simulated_panel(config, n_markets=200, *, burn_in=6, shock_sd=0.08, seed=0, n_agents=None,
                    periods=(("t0", "t1"), ("t1", "t2"))):
    """Long-format frame of market outcomes for many independent markets.

    Each market draws its own seed, runs ``burn_in`` unshocked periods so the
    scarred tail forms, then three observation years with lognormal supply
    shocks between them. Columns: ``msa_id, year, homeless_count,
    population, median_rent`` (the H_min price).
    """
    rng = np.random.default_rng(seed)
    rows = []
    n_agents = n_agents or config.n_agents
    width = len(str(n_markets))
    n_obs = len(periods) + 1
    for m in range(n_markets):
        cfg = replace(config, n_agents=n_agents, seed=int(rng.integers(2**31)),
                      supply=config.supply.scaled(n_agents / config.n_agents))
        mrng = np.random.default_rng(cfg.seed)
        Y = cfg.initial_incomes(mrng)
        factor = 1.0
        for _ in range(burn_in):
            st = clear(Y, cfg.utility, cfg.supply, 0)
            Y = step_dynamics(st, cfg, mrng)
        for t in range(n_obs):
            if t > 0:
                factor *= math.exp(mrng.normal(0.0, shock_sd))
            st = clear(Y, cfg.utility, cfg.supply.scaled(factor), t)
            rows.append({"msa_id": f"S{m:0{width}d}", "year": 2000 + t,
                         "homeless_count": float(st.homeless_count),
                         "chronic_count": float(st.homeless_count),
                         "population": float(n_agents), "median_rent": st.price})
            Y = step_dynamics(st, cfg, mrng)
    import pandas as pd

    return pd.DataFrame(rows)


def bridge_estimate(config, n_markets=200, *, seed=0, **kw):
    """Simulate a market panel and fit the ``table3-col1`` equation on it.

    Simulated markets carry no covariates and prices are already real, so the
    preset is used with its covariates removed and no deflation.
    """
    from .ols import fit as ols_fit
    from .panel import build_panel, design_matrix
    from .presets import get_preset

    frame = simulated_panel(config, n_markets, seed=seed, **kw)
    base = get_preset("table3-col1")
    spec = replace(base, name="bridge", covariates=[], periods=[(2000, 2001), (2001, 2002)],
                   split=replace(base.split, real=False), label="simulated markets")
    panel, log = build_panel(frame, spec)
    rep = ols_fit(design_matrix(panel, spec), label="simulated markets")
    rep.drop_summary = log.summary()
    return rep


def write_simulation_csv(result, path):
    import csv

    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["t", "price", "quantity", "homeless_count", "mean_income_homeless",
                "mean_income_housed"]
        w.writerow(cols)
        for row in result.rows():
            w.writerow([row[c] if not isinstance(row[c], float) else repr(row[c]) for c in cols])


def write_asymmetry_json(report, path):
    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, float) and not math.isfinite(v):
            return None
        return v

    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump({"schema_version": 1, **clean(report)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
