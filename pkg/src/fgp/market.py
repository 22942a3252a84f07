"""Backtesting: closed-market relative value, open markets with constituent
renewal, dividends, delistings, and proportional transaction costs.

Conventions (recorded in result metadata): trades happen at prevailing
weights on rebalance dates; dividend and delisting proceeds sit in cash at a
zero rate until the next rebalance; missing returns count as 0%.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InputError, NumericalError
from .genfun import Generator, portfolio_weights
from .simplex import WeightVector

TC_BISECT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class MarketHistory:
    """Time x asset panel of capitalizations and total returns.

    caps[t, i] is NaN when asset i is not listed at date t.  total_returns[t, i]
    is the total (dividend-inclusive) return over [t, t+1]; the final row is
    unused.  delistings maps (t, i) to the delisting return paid over
    [t, t+1], after which the asset must be unlisted.
    """

    dates: tuple
    identifiers: tuple
    caps: np.ndarray
    total_returns: np.ndarray
    delistings: dict

    def __post_init__(self):
        caps = np.asarray(self.caps, dtype=float)
        rets = np.asarray(self.total_returns, dtype=float)
        T, N = caps.shape
        if len(self.dates) != T or len(self.identifiers) != N:
            raise InputError("dates/identifiers do not match the caps panel")
        if rets.shape != (T, N):
            raise InputError("total_returns must match the caps panel shape")
        listed = ~np.isnan(caps)
        if np.any(caps[listed] <= 0):
            raise InputError("listed capitalizations must be positive")
        if np.any(~np.isfinite(rets[~np.isnan(rets)])):
            raise InputError("returns must be finite where present")
        for (t, i), r in self.delistings.items():
            if not (0 <= t < T and 0 <= i < N):
                raise InputError(f"delisting ({t},{i}) outside the panel")
            if np.isnan(caps[t, i]):
                raise InputError(f"delisting ({t},{i}) on an unlisted asset")
            if t + 1 < T and not np.isnan(caps[t + 1, i]):
                raise InputError(f"asset {i} still listed after delisting at {t}")
            if not np.isfinite(r):
                raise InputError(f"delisting return at ({t},{i}) must be finite")
        caps = caps.copy()
        rets = rets.copy()
        caps.setflags(write=False)
        rets.setflags(write=False)
        object.__setattr__(self, "caps", caps)
        object.__setattr__(self, "total_returns", rets)
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "identifiers", tuple(self.identifiers))

    @property
    def T(self) -> int:
        return self.caps.shape[0]

    @property
    def n_assets(self) -> int:
        return self.caps.shape[1]

    def listed(self, t: int) -> np.ndarray:
        return ~np.isnan(self.caps[t])

    def top_constituents(self, t: int, n_top: int) -> np.ndarray:
        """Indices of the n_top largest listed assets at t (stable ties)."""
        caps = np.where(self.listed(t), self.caps[t], -np.inf)
        if int(np.sum(np.isfinite(caps) & (caps > 0))) < n_top:
            raise InputError(f"fewer than {n_top} listed assets at date index {t}")
        order = np.argsort(-caps, kind="stable")
        return np.sort(order[:n_top])

    def weights_of(self, t: int, universe: np.ndarray) -> np.ndarray:
        caps = self.caps[t, universe]
        if np.any(np.isnan(caps)):
            raise InputError("universe contains unlisted assets")
        return caps / caps.sum()

    def closed_weight_sequence(self, n_top: int | None = None) -> list[WeightVector]:
        """Renormalized weight path of assets listed over the whole panel
        (optionally the n_top largest at the first date)."""
        survivors = np.flatnonzero(np.all(~np.isnan(self.caps), axis=0))
        if survivors.size < 2:
            raise InputError("fewer than 2 assets survive the whole panel")
        if n_top is not None:
            if survivors.size < n_top:
                raise InputError(f"only {survivors.size} survivors, need {n_top}")
            order = np.argsort(-self.caps[0, survivors], kind="stable")
            survivors = np.sort(survivors[order[:n_top]])
        caps = self.caps[:, survivors]
        return [WeightVector(row / row.sum()) for row in caps]


@dataclass(frozen=True)
class WeightRule:
    """A deterministic map from current market weights to target weights."""

    kind: str
    generator: Optional[Generator] = None
    theta: float = 0.5

    _KINDS = ("market", "equal", "diversity", "generated", "index_tracking")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise InputError(f"unknown weight rule {self.kind!r}")
        if self.kind == "generated" and self.generator is None:
            raise InputError("generated rule needs a generator")
        if self.kind == "diversity" and not self.theta < 1.0:
            raise InputError("diversity rule needs theta < 1")

    @classmethod
    def market(cls):
        return cls("market")

    @classmethod
    def equal(cls):
        return cls("equal")

    @classmethod
    def diversity(cls, theta: float = 0.5):
        return cls("diversity", theta=theta)

    @classmethod
    def generated(cls, generator: Generator):
        return cls("generated", generator=generator)

    @classmethod
    def index_tracking(cls):
        return cls("index_tracking")

    def weights(self, mu: np.ndarray) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if self.kind in ("market", "index_tracking"):
            return mu / mu.sum()
        if self.kind == "equal":
            return np.full_like(mu, 1.0 / mu.size)
        if self.kind == "diversity":
            w = mu ** self.theta
            return w / w.sum()
        pi = portfolio_weights(self.generator, mu)
        if np.any(pi < 0):
            raise NumericalError("generated rule produced negative weights")
        return pi / pi.sum()


@dataclass(frozen=True)
class BacktestConfig:
    rebalance_every: int = 5
    tc: float = 0.0
    mode: str = "closed"
    n_top: Optional[int] = None
    renewal_every: int = 126
    train_test: Optional[tuple] = None
    diversity_theta: float = 0.5

    def __post_init__(self):
        if self.mode not in ("closed", "open"):
            raise InputError("mode must be 'closed' or 'open'")
        if not 0.0 <= self.tc < 1.0:
            raise InputError("tc must lie in [0, 1)")
        if self.rebalance_every < 1 or self.renewal_every < 1:
            raise InputError("rebalance/renewal spacing must be >= 1")


@dataclass(frozen=True, eq=False)
class BacktestResult:
    dates: tuple
    value: np.ndarray
    relative_value: np.ndarray
    turnover: np.ndarray
    costs_paid: np.ndarray
    diversity: np.ndarray
    holdings: dict
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["date", "value", "relative_value", "turnover",
                             "cum_costs", "diversity"])
            for k, date in enumerate(self.dates):
                writer.writerow([
                    date,
                    repr(float(self.value[k])),
                    repr(float(self.relative_value[k])),
                    repr(float(self.turnover[k])),
                    repr(float(self.costs_paid[k])),
                    repr(float(self.diversity[k])),
                ])


def dividend_split(total_return: float, cap_old: float, cap_new: float):
    """Split a total return into dividend and realized parts.

    r_D = max(1 + r - cap_new/cap_old, 0) (clamped so share issuance does not
    register as a dividend), r_R = r - r_D.
    """
    if cap_old <= 0 or cap_new <= 0:
        raise InputError("capitalizations must be positive")
    r_d = max(1.0 + total_return - cap_new / cap_old, 0.0)
    return r_d, total_return - r_d


def apply_transaction_costs(current_dollars, target_weights, wealth: float, tc: float):
    """Move holdings to target weights, paying tc per traded dollar.

    Post-trade wealth W' solves W' = W - tc * sum_i |W' w_i - h_i| (monotone,
    unique root), found by bisection to 1e-12.  Returns (new_dollars,
    cost_paid).
    """
    h = np.asarray(current_dollars, dtype=float)
    w = np.asarray(target_weights, dtype=float)
    if not 0.0 <= tc < 1.0:
        raise InputError("tc must lie in [0, 1)")
    if wealth <= 0:
        raise NumericalError("wealth must stay positive")
    if tc == 0.0:
        return wealth * w, 0.0
    lo, hi = 0.0, wealth
    while hi - lo > TC_BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if mid + tc * np.abs(mid * w - h).sum() - wealth > 0.0:
            hi = mid
        else:
            lo = mid
    w_post = 0.5 * (lo + hi)
    return w_post * w, wealth - w_post


def diversity_series(market: Sequence[WeightVector], theta: float) -> np.ndarray:
    """Market diversity (sum_i mu_i^theta)^(1/theta) per period."""
    if not 0.0 < theta < 1.0:
        raise InputError("theta must lie in (0, 1)")
    M = np.stack([m.entries for m in market])
    return (M ** theta).sum(axis=1) ** (1.0 / theta)


def _turnover(h: np.ndarray, new_h: np.ndarray, wealth: float) -> float:
    return float(np.abs(new_h - h).sum() / wealth)


# targets within this band of the drifted proportions are already held; no
# trade is booked (keeps the market rule's turnover and costs exactly zero)
NO_TRADE_BAND = 1e-13


def _rebalance(h: np.ndarray, target: np.ndarray, wealth: float, tc: float):
    """(new_dollars, cost, turnover) with a machine-epsilon no-trade band."""
    if wealth > 0 and float(np.max(np.abs(h / wealth - target))) <= NO_TRADE_BAND:
        return wealth * target, 0.0, 0.0
    new_h, cost = apply_transaction_costs(h, target, wealth, tc)
    return new_h, cost, _turnover(h, new_h, wealth)


def run_closed(rule: WeightRule, market: Sequence[WeightVector],
               cfg: BacktestConfig) -> BacktestResult:
    """Closed-market backtest on a weight path.

    Prices are the market weights themselves, so the wealth series IS the
    value relative to the market portfolio.  The initial position is endowed
    at the target weights without cost; trades happen every rebalance_every
    periods at prevailing weights.
    """
    if cfg.mode != "closed":
        raise InputError("run_closed requires closed mode")
    T = len(market)
    if T < 2:
        raise InputError("need at least 2 periods")
    M = np.stack([m.entries for m in market])
    value = np.empty(T)
    bench_value = np.empty(T)
    turnover = np.zeros(T)
    costs = np.zeros(T)

    bench_rule = WeightRule.market()
    h = rule.weights(M[0]).copy()  # wealth 1, endowed in kind
    hb = bench_rule.weights(M[0]).copy()
    value[0] = bench_value[0] = 1.0
    for t in range(T - 1):
        growth = M[t + 1] / M[t]
        h = h * growth
        hb = hb * growth
        wealth = float(h.sum())
        wealth_b = float(hb.sum())
        t1 = t + 1
        if t1 % cfg.rebalance_every == 0 and t1 < T:
            h, cost, turnover[t1] = _rebalance(h, rule.weights(M[t1]), wealth, cfg.tc)
            costs[t1] = cost
            wealth -= cost
            hb, cost_b, _ = _rebalance(hb, bench_rule.weights(M[t1]), wealth_b, cfg.tc)
            wealth_b -= cost_b
        value[t1] = wealth
        bench_value[t1] = wealth_b

    return BacktestResult(
        dates=tuple(range(T)),
        value=value,
        relative_value=value / bench_value,
        turnover=turnover,
        costs_paid=np.cumsum(costs),
        diversity=diversity_series(market, cfg.diversity_theta),
        holdings={"weights": (h / h.sum()).tolist()},
        metadata={"mode": "closed", "tc": cfg.tc, "rule": rule.kind,
                  "rebalance_every": cfg.rebalance_every,
                  "benchmark": "market",
                  "note": "dividend/delisting cash reinvested at next rebalance"},
    )


class _OpenPortfolio:
    """Dollar positions over a changing universe, with a cash bucket."""

    def __init__(self, history: MarketHistory, rule: WeightRule,
                 cfg: BacktestConfig, universe: np.ndarray):
        self.history = history
        self.rule = rule
        self.cfg = cfg
        self.universe = universe.copy()
        mu = history.weights_of(0, universe)
        self.h = rule.weights(mu) * 1.0
        self.cash = 0.0
        self.cum_cost = 0.0
        self.last_turnover = 0.0

    @property
    def wealth(self) -> float:
        return float(self.h.sum()) + self.cash

    def drift(self, t: int) -> None:
        """Apply returns over [t, t+1]; dividends and delisting proceeds go
        to cash."""
        hist = self.history
        keep = []
        for pos, j in enumerate(self.universe):
            held = self.h[pos]
            if (t, j) in hist.delistings:
                self.cash += held * (1.0 + hist.delistings[(t, j)])
                continue
            cap_old = hist.caps[t, j]
            cap_new = hist.caps[t + 1, j]
            if np.isnan(cap_new):
                # unlisted without a recorded delisting: exit at 0% return
                self.cash += held
                continue
            r_tot = hist.total_returns[t, j]
            if np.isnan(r_tot):
                r_tot = cap_new / cap_old - 1.0
            r_d, r_r = dividend_split(r_tot, cap_old, cap_new)
            self.h[pos] = held * (1.0 + r_r)
            self.cash += held * r_d
            keep.append(pos)
        self.universe = self.universe[keep]
        self.h = self.h[keep]
        self.last_turnover = 0.0

    def rebalance(self, t: int, universe: np.ndarray) -> None:
        """Trade to the rule's target weights on the given universe."""
        hist = self.history
        mu = hist.weights_of(t, universe)
        target = self.rule.weights(mu)
        merged = np.union1d(self.universe, universe)
        h_all = np.zeros(merged.size)
        h_all[np.searchsorted(merged, self.universe)] = self.h
        w_all = np.zeros(merged.size)
        w_all[np.searchsorted(merged, universe)] = target
        wealth = self.wealth
        # cash participates in the pre-trade mix, so compare targets against
        # stock positions only when there is no cash to deploy
        if self.cash == 0.0:
            new_h, cost, self.last_turnover = _rebalance(h_all, w_all, wealth, self.cfg.tc)
        else:
            new_h, cost = apply_transaction_costs(h_all, w_all, wealth, self.cfg.tc)
            self.last_turnover = _turnover(h_all, new_h, wealth)
        self.cum_cost += cost
        keep = np.searchsorted(merged, universe)
        self.h = new_h[keep]
        self.universe = universe.copy()
        self.cash = 0.0


def run_open(rule: WeightRule, history: MarketHistory,
             cfg: BacktestConfig) -> BacktestResult:
    """Open-market backtest against the index-tracking benchmark.

    The constituent list resets to the current top n_top every renewal_every
    periods (renewal dates also trade); other trades follow the rebalance
    schedule.  relative_value is wealth over the benchmark wealth, both
    starting at 1 and paying the same cost rate.
    """
    if cfg.mode != "open":
        raise InputError("run_open requires open mode")
    if cfg.n_top is None:
        raise InputError("open mode requires n_top")
    T = history.T
    if T < 2:
        raise InputError("history too short")

    universe0 = history.top_constituents(0, cfg.n_top)
    port = _OpenPortfolio(history, rule, cfg, universe0)
    bench = _OpenPortfolio(history, WeightRule.index_tracking(), cfg, universe0)

    universe = universe0
    value = np.empty(T)
    rel = np.empty(T)
    turnover = np.zeros(T)
    costs = np.zeros(T)
    diversity = np.empty(T)

    mu0 = history.weights_of(0, universe0)
    value[0], rel[0] = 1.0, 1.0
    diversity[0] = float((mu0 ** cfg.diversity_theta).sum() ** (1.0 / cfg.diversity_theta))

    events = []
    for t in range(T - 1):
        port.drift(t)
        bench.drift(t)
        t1 = t + 1
        renew = t1 % cfg.renewal_every == 0
        if renew:
            new_universe = history.top_constituents(t1, cfg.n_top)
            if not np.array_equal(new_universe, universe):
                events.append({"date": history.dates[t1], "event": "renewal",
                               "entered": int(np.setdiff1d(new_universe, universe).size),
                               "exited": int(np.setdiff1d(universe, new_universe).size)})
            universe = new_universe
        else:
            live = universe[~np.isnan(history.caps[t1, universe])]
            if live.size != universe.size:
                events.append({"date": history.dates[t1], "event": "delisting",
                               "exited": int(universe.size - live.size)})
            universe = live
        if renew or t1 % cfg.rebalance_every == 0:
            port.rebalance(t1, universe)
            bench.rebalance(t1, universe)
            turnover[t1] = port.last_turnover
        value[t1] = port.wealth
        rel[t1] = port.wealth / bench.wealth
        costs[t1] = port.cum_cost
        mu = history.weights_of(t1, universe)
        diversity[t1] = float((mu ** cfg.diversity_theta).sum() ** (1.0 / cfg.diversity_theta))

    holdings = {
        "assets": [history.identifiers[j] for j in port.universe],
        "dollars": port.h.tolist(),
        "cash": port.cash,
    }
    return BacktestResult(
        dates=tuple(history.dates),
        value=value,
        relative_value=rel,
        turnover=turnover,
        costs_paid=costs,
        diversity=diversity,
        holdings=holdings,
        metadata={"mode": "open", "tc": cfg.tc, "rule": rule.kind,
                  "n_top": cfg.n_top, "renewal_every": cfg.renewal_every,
                  "rebalance_every": cfg.rebalance_every,
                  "benchmark": "index_tracking", "events": events,
                  "note": "dividend/delisting cash reinvested at next rebalance"},
    )
