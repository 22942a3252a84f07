"""Generating functions on [0,1] and the portfolios they induce.

Two representations coexist: GenVector (node values over a Partition, the
decision variable of the discretized fit) and AnalyticGenerator (closed-form
oracles such as the constant, weighted-log and quadratic generators).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .errors import InputError, NumericalError
from .simplex import WeightVector, OrderedWeightVector

HALF_TOL = 1e-12
FEAS_TOL = 1e-9


class Partition:
    """Grid 0 = x_1 < ... < x_d = 1 with 1/2 among the nodes."""

    __slots__ = ("nodes", "half_index")

    def __init__(self, nodes):
        x = np.asarray(nodes, dtype=float)
        if x.ndim != 1 or x.size < 3:
            raise InputError("partition needs at least 3 nodes")
        if not np.all(np.isfinite(x)):
            raise InputError("partition nodes must be finite")
        if np.any(np.diff(x) <= 0):
            raise InputError("partition nodes must be strictly increasing")
        if x[0] != 0.0 or x[-1] != 1.0:
            raise InputError("partition must start at 0 and end at 1")
        half = np.flatnonzero(np.abs(x - 0.5) <= HALF_TOL)
        if half.size != 1:
            raise InputError("partition must contain the node 1/2 exactly once")
        x = x.copy()
        x[half[0]] = 0.5
        x.setflags(write=False)
        object.__setattr__(self, "nodes", x)
        object.__setattr__(self, "half_index", int(half[0]))

    def __setattr__(self, name, value):
        raise AttributeError("Partition is immutable")

    @property
    def d(self) -> int:
        return self.nodes.size

    @property
    def spacings(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def mesh(self) -> float:
        return float(self.spacings.max())

    @property
    def min_mesh(self) -> float:
        return float(self.spacings.min())

    def is_almost_uniform(self, big_m: float) -> bool:
        """Whether |delta - delta_min| <= M * delta_min^3."""
        return abs(self.mesh - self.min_mesh) <= big_m * self.min_mesh**3

    def segment_index(self, x):
        """Segment j with x in [x_j, x_{j+1}); x = 1 maps to the last segment.

        This realizes the right-derivative convention for the piecewise
        affine extension (left derivative at the final node).
        """
        idx = np.searchsorted(self.nodes, x, side="right") - 1
        return np.clip(idx, 0, self.d - 2)

    def __eq__(self, other):
        return isinstance(other, Partition) and np.array_equal(self.nodes, other.nodes)

    def __hash__(self):
        return hash(self.nodes.tobytes())

    def __repr__(self):
        return f"Partition(d={self.d}, mesh={self.mesh:.4g}, min_mesh={self.min_mesh:.4g})"

    @classmethod
    def uniform(cls, d: int) -> "Partition":
        """Uniform grid with d nodes; d must be odd so that 1/2 is a node."""
        if d < 3 or d % 2 == 0:
            raise InputError("uniform partition needs an odd node count >= 3")
        return cls(np.linspace(0.0, 1.0, d))

    @classmethod
    def clustered(cls, n_assets: int, d: int) -> "Partition":
        """Non-uniform grid clustered geometrically below 1/n, uniform above.

        Market weights pile up near small values, so most resolution goes
        below 1/n.  Always contains 0, 1/n, 1/2 and 1.
        """
        if n_assets < 2 or d < 6:
            raise InputError("clustered partition needs n_assets >= 2, d >= 6")
        anchor = 1.0 / n_assets
        lo = anchor / max(50.0, n_assets)
        n_below = max(3, int(0.6 * d))
        below = np.geomspace(lo, anchor, n_below)
        above = np.linspace(anchor, 1.0, d - n_below)
        nodes = np.concatenate([[0.0], below, above, [0.5, 1.0]])
        nodes = np.unique(nodes)
        # drop near-duplicates that unique() keeps (distinct floats, same point)
        keep = np.concatenate([[True], np.diff(nodes) > 1e-12])
        return cls(nodes[keep])


class GenVector:
    """Node values of a generating function over a Partition.

    The piecewise affine extension interpolates the values; the value at the
    node 1/2 is pinned to 0.  Derivatives use the right-segment slope except
    at 1, where the left-segment slope applies.
    """

    __slots__ = ("partition", "values", "_slopes")

    def __init__(self, partition: Partition, values):
        v = np.asarray(values, dtype=float)
        if v.shape != (partition.d,):
            raise InputError(f"need {partition.d} node values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InputError("node values must be finite")
        if abs(v[partition.half_index]) > HALF_TOL:
            raise InputError("value at the node 1/2 must be 0")
        v = v.copy()
        v[partition.half_index] = 0.0
        v.setflags(write=False)
        slopes = np.diff(v) / partition.spacings
        slopes.setflags(write=False)
        object.__setattr__(self, "partition", partition)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "_slopes", slopes)

    def __setattr__(self, name, value):
        raise AttributeError("GenVector is immutable")

    @property
    def slopes(self) -> np.ndarray:
        return self._slopes

    def __call__(self, x):
        return np.interp(x, self.partition.nodes, self.values)

    def deriv(self, x):
        return self._slopes[self.partition.segment_index(x)]

    def to_dict(self, beta: float | None = None) -> dict:
        out = {"nodes": self.partition.nodes.tolist(), "values": self.values.tolist()}
        if beta is not None:
            out["beta"] = float(beta)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "GenVector":
        return cls(Partition(obj["nodes"]), obj["values"])

    @classmethod
    def zero(cls, partition: Partition) -> "GenVector":
        return cls(partition, np.zeros(partition.d))


@dataclass(frozen=True)
class AnalyticGenerator:
    """Closed-form generating function with derivative, normalized at 1/2.

    eval and deriv must accept numpy arrays.  Generators with unbounded
    derivative near 0 (e.g. lambda*log) are valid portfolio oracles but are
    outside every beta-smooth class.
    """

    eval: Callable
    deriv: Callable
    label: str

    def __post_init__(self):
        v = float(self.eval(np.asarray(0.5)))
        if abs(v) > HALF_TOL:
            raise InputError(f"generator {self.label!r} has value {v!r} at 1/2, expected 0")

    def __call__(self, x):
        return self.eval(x)


Generator = Union[GenVector, AnalyticGenerator]


def zero_generator() -> AnalyticGenerator:
    """Constant generator: induces the market portfolio."""
    return AnalyticGenerator(
        eval=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        deriv=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        label="zero",
    )


def log_blend(lam: float) -> AnalyticGenerator:
    """lam * log(2x): blends the market (lam=0) into equal weights (lam=1)."""
    if not 0.0 <= lam <= 1.0:
        raise InputError("log blend requires 0 <= lam <= 1")
    return AnalyticGenerator(
        eval=lambda x: lam * np.log(2.0 * np.asarray(x, dtype=float)),
        deriv=lambda x: lam / np.asarray(x, dtype=float),
        label=f"{lam}*log(2x)",
    )


def neg_quadratic() -> AnalyticGenerator:
    """-x^2/2 + 1/8, a 1-smooth generator."""
    return AnalyticGenerator(
        eval=lambda x: -np.asarray(x, dtype=float) ** 2 / 2.0 + 0.125,
        deriv=lambda x: -np.asarray(x, dtype=float),
        label="-x^2/2+1/8",
    )


def shifted_log(a: float) -> AnalyticGenerator:
    """log(a+x) - log(a+1/2); lies in the (1/a^2)-smooth class."""
    if a <= 0:
        raise InputError("shifted log requires a > 0")
    b = -math.log(a + 0.5)
    return AnalyticGenerator(
        eval=lambda x: np.log(a + np.asarray(x, dtype=float)) + b,
        deriv=lambda x: 1.0 / (a + np.asarray(x, dtype=float)),
        label=f"log({a}+x)",
    )


def _deriv(g: Generator, x):
    return g.deriv(x)


def _eval(g: Generator, x):
    return g(x)


def portfolio_weights(g: Generator, p: np.ndarray) -> np.ndarray:
    """Raw portfolio weights at market weights p (may be non-positive if g
    is infeasible); callers wanting a validated simplex point use
    portfolio_map."""
    p = np.asarray(p, dtype=float)
    n = p.shape[-1]
    lp = _deriv(g, p)
    drift = np.sum(p * lp, axis=-1, keepdims=True)
    return p * (1.0 + (lp - drift) / n)


def portfolio_map(g: Generator, p: WeightVector) -> WeightVector:
    """The portfolio generated by g at market weights p.

    pi_i = p_i (1 + l'(p_i)/n - sum_j p_j l'(p_j)/n); sums to one by
    construction.  Raises if g produces a non-positive weight (an
    infeasible generator) rather than clipping.
    """
    pi = portfolio_weights(g, p.entries)
    if np.any(pi <= 0.0):
        raise NumericalError(
            "generator produced a non-positive portfolio weight; "
            "it is not feasible for any smoothness level"
        )
    return WeightVector(pi)


def relative_log_return(u: OrderedWeightVector, r: WeightVector, g: Generator) -> float:
    """log(pi(u).r / (u.r)): one-period relative log return in rank coordinates."""
    if u.n != r.n:
        raise InputError(f"dimension mismatch: {u.n} vs {r.n}")
    pi = portfolio_weights(g, u.entries)
    w = float(np.dot(pi, r.entries) / np.dot(u.entries, r.entries))
    if w <= 0.0:
        raise NumericalError("non-positive relative return; generator is infeasible")
    return math.log(w)


def _phi(g: Generator, p: np.ndarray) -> float:
    return float(np.mean(_eval(g, p)))


def l_divergence(g: Generator, q: WeightVector, p: WeightVector) -> float:
    """L-divergence log(1 + grad_phi(p).(q-p)) - (phi(q) - phi(p)); >= 0 for
    exponentially concave generators."""
    if q.n != p.n:
        raise InputError(f"dimension mismatch: {q.n} vs {p.n}")
    pa, qa = p.entries, q.entries
    arg = 1.0 + float(np.dot(_deriv(g, pa), qa - pa)) / p.n
    if arg <= 0.0:
        raise NumericalError("log argument non-positive; generator is infeasible")
    return math.log(arg) - (_phi(g, qa) - _phi(g, pa))


def diversity_contribution(g: Generator, v: WeightVector, u: OrderedWeightVector) -> float:
    """(1/n) sum_k (l(v_k) - l(u_k)): the change-of-diversity term."""
    if v.n != u.n:
        raise InputError(f"dimension mismatch: {v.n} vs {u.n}")
    return _phi(g, v.entries) - _phi(g, u.entries)


def pathwise_decomposition(g: Generator, market: Sequence[WeightVector]):
    """Split the relative log value along a market path.

    Returns (log_v, diversity, divergence), each an array over t with
    log_v[t] = diversity[t] + divergence[t], where diversity[t] is
    phi(mu(t)) - phi(mu(0)) and divergence[t] the accumulated L-divergence.
    """
    if len(market) < 2:
        raise InputError("market sequence must have at least 2 steps")
    n = market[0].n
    if any(m.n != n for m in market):
        raise InputError("market sequence has inconsistent dimension")
    M = np.stack([m.entries for m in market])
    phis = np.mean(_eval(g, M), axis=1)
    P, Q = M[:-1], M[1:]
    args = 1.0 + np.sum(_deriv(g, P) * (Q - P), axis=1) / n
    if np.any(args <= 0.0):
        raise NumericalError("log argument non-positive along the path")
    l_terms = np.log(args) - (phis[1:] - phis[:-1])
    diversity = phis - phis[0]
    divergence = np.concatenate([[0.0], np.cumsum(l_terms)])
    return diversity + divergence, diversity, divergence


@dataclass(frozen=True)
class FeasibilityReport:
    """Worst constraint residuals of a GenVector against the discretized class.

    Each residual is the left-hand side of a `<= 0` constraint; a family
    passes when its worst residual is at most the tolerance.
    """

    exp_concave_ok: bool
    beta_smooth_ok: bool
    endpoint_ok: bool
    monotone_ok: bool
    violations: dict
    monotone_checked: bool
    tol: float

    @property
    def passed(self) -> bool:
        return self.exp_concave_ok and self.beta_smooth_ok and self.endpoint_ok and self.monotone_ok

    def to_dict(self) -> dict:
        return {
            "exp_concave_ok": self.exp_concave_ok,
            "beta_smooth_ok": self.beta_smooth_ok,
            "endpoint_ok": self.endpoint_ok,
            "monotone_ok": self.monotone_ok,
            "monotone_checked": self.monotone_checked,
            "violations": {k: float(v) for k, v in self.violations.items()},
            "tol": self.tol,
            "passed": self.passed,
        }


def constraint_residuals(values: np.ndarray, partition: Partition, beta: float,
                         monotone: bool) -> dict:
    """Residuals (LHS of `<= 0`) per constraint family for given node values."""
    x = partition.nodes
    dx = partition.spacings
    v = np.asarray(values, dtype=float)
    s = np.diff(v) / dx

    # exp-concavity: -l_i + log(w_i e^{l_{i+1}} + (1-w_i) e^{l_{i-1}}) <= 0
    w = dx[:-1] / (x[2:] - x[:-2])
    lse = np.logaddexp(np.log(w) + v[2:], np.log1p(-w) + v[:-2])
    exp_conc = lse - v[1:-1]

    # beta-smoothness: s_i - s_{i+1} <= (beta/2)(x_{i+2} - x_i)
    smooth = (s[:-1] - s[1:]) - 0.5 * beta * (x[2:] - x[:-2])

    endpoint = np.array([s[0] ** 2 - beta, s[-1] ** 2 - beta])

    out = {
        "exp_concave": exp_conc,
        "beta_smooth": smooth,
        "endpoint": endpoint,
    }
    if monotone:
        out["monotone_sign"] = -s
        out["monotone_growth"] = x[:-2] * s[:-1] - x[1:-1] * s[1:]
    return out


def verify_membership(g: GenVector, beta: float, monotone: bool = False,
                      tol: float = FEAS_TOL) -> FeasibilityReport:
    """Check the discrete exp-concavity / beta-smoothness / endpoint
    constraints (and optionally the monotone-weight surrogate) of g."""
    if beta <= 0:
        raise InputError("beta must be positive")
    res = constraint_residuals(g.values, g.partition, beta, monotone)
    worst = {k: float(np.max(v)) for k, v in res.items()}
    mono_ok = True
    if monotone:
        mono_ok = worst["monotone_sign"] <= tol and worst["monotone_growth"] <= tol
    return FeasibilityReport(
        exp_concave_ok=worst["exp_concave"] <= tol,
        beta_smooth_ok=worst["beta_smooth"] <= tol,
        endpoint_ok=worst["endpoint"] <= tol,
        monotone_ok=mono_ok,
        violations=worst,
        monotone_checked=monotone,
        tol=tol,
    )


def deviation_bounds(beta: float, n: int) -> tuple[float, float]:
    """Guaranteed range of pi_i/p_i - 1 for beta-smooth generators:
    (e^{-2 sqrt(beta)/n} - 1, beta/n^2)."""
    if beta <= 0 or n < 2:
        raise InputError("need beta > 0 and n >= 2")
    return math.exp(-2.0 * math.sqrt(beta) / n) - 1.0, beta / n**2
