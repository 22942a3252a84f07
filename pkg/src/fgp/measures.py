"""Empirical measures on rank space, exact 1-Wasserstein distance, and the
Lipschitz stability bounds of the fit objective."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .errors import InputError, NumericalError
from .simplex import (MIN_ENTRY, OrderedWeightVector, WeightVector,
                      rank_transform)

WEIGHT_SUM_TOL = 1e-12
DEFAULT_SUPPORT_CAP = 2000


def _validate_rows(M: np.ndarray, name: str, ordered: bool) -> np.ndarray:
    if M.ndim != 2 or M.shape[1] < 2:
        raise InputError(f"{name} must be a 2-d array with at least 2 columns")
    if not np.all(np.isfinite(M)):
        raise InputError(f"{name} has non-finite entries")
    if np.any(M <= MIN_ENTRY):
        raise InputError(f"{name} entries must be > {MIN_ENTRY}")
    sums = M.sum(axis=1, keepdims=True)
    if np.max(np.abs(M / sums - M)) > 1e-6:
        raise InputError(f"{name} rows are too far from the simplex")
    if np.max(np.abs(sums - 1.0)) > 1e-13:  # keep already-normalized rows intact
        M = M / sums
    else:
        M = M.copy()
    if ordered and np.any(M[:, :-1] < M[:, 1:]):
        raise InputError(f"{name} rows must be non-increasing")
    M.setflags(write=False)
    return M


class EmpiricalMeasure:
    """Weighted atoms (u, r) on (ordered simplex) x (simplex).

    Stored row-major: u and r are (m, n) arrays, weights an (m,) array
    summing to one.
    """

    __slots__ = ("u", "r", "weights")

    def __init__(self, u, r, weights=None):
        u = _validate_rows(np.asarray(u, dtype=float), "u", ordered=True)
        r = _validate_rows(np.asarray(r, dtype=float), "r", ordered=False)
        if u.shape != r.shape:
            raise InputError("u and r must have matching shapes")
        m = u.shape[0]
        if weights is None:
            w = np.full(m, 1.0 / m)
        else:
            w = np.asarray(weights, dtype=float)
            if w.shape != (m,) or np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise InputError("weights must be positive, finite, one per atom")
            s = w.sum()
            if abs(s - 1.0) > 1e-6:
                raise InputError(f"weights sum to {s!r}, too far from 1")
            w = w / s if abs(s - 1.0) > 1e-13 else w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "weights", w)

    def __setattr__(self, name, value):
        raise AttributeError("EmpiricalMeasure is immutable")

    @property
    def m(self) -> int:
        return self.u.shape[0]

    @property
    def n(self) -> int:
        return self.u.shape[1]

    def atoms(self):
        for k in range(self.m):
            yield OrderedWeightVector(self.u[k]), WeightVector(self.r[k])

    @classmethod
    def from_atoms(cls, atoms, weights=None) -> "EmpiricalMeasure":
        u = np.stack([a[0].entries for a in atoms])
        r = np.stack([a[1].entries for a in atoms])
        return cls(u, r, weights)


def from_market_sequence(market: Sequence[WeightVector]) -> EmpiricalMeasure:
    """Uniform measure with one (u, r) atom per market step."""
    if len(market) < 2:
        raise InputError("need at least 2 market observations")
    n = market[0].n
    if any(m.n != n for m in market):
        raise InputError("market sequence has inconsistent dimension")
    trans = [rank_transform(market[s], market[s + 1]) for s in range(len(market) - 1)]
    u = np.stack([t.u.entries for t in trans])
    r = np.stack([t.r.entries for t in trans])
    return EmpiricalMeasure(u, r)


def _tilde_d_matrix(A: np.ndarray, B: np.ndarray, chunk: int = 128) -> np.ndarray:
    """Pairwise max(Hilbert, l1) distances between rows of A and rows of B."""
    out = np.empty((A.shape[0], B.shape[0]))
    logB = np.log(B)
    for lo in range(0, A.shape[0], chunk):
        hi = min(lo + chunk, A.shape[0])
        diff_log = np.log(A[lo:hi])[:, None, :] - logB[None, :, :]
        dh = diff_log.max(axis=2) - diff_log.min(axis=2)
        l1 = np.abs(A[lo:hi, None, :] - B[None, :, :]).sum(axis=2)
        out[lo:hi] = np.maximum(dh, l1)
    return out


def rho_cost_matrix(u1, r1, u2, r2) -> np.ndarray:
    """Pairwise rho distances between two atom clouds (no ordering assumed)."""
    u1, r1, u2, r2 = (np.asarray(a, dtype=float) for a in (u1, r1, u2, r2))
    if u1.shape[1] != u2.shape[1] or r1.shape[1] != r2.shape[1]:
        raise InputError("atom clouds have mismatched dimension")
    return _tilde_d_matrix(u1, u2) + _tilde_d_matrix(r1, r2)


def _exact_ot(w1: np.ndarray, w2: np.ndarray, cost: np.ndarray) -> float:
    """Exact optimal transport cost by LP (HiGHS dual simplex)."""
    m, k = cost.shape
    ones = np.ones(m * k)
    rows = sparse.csr_matrix(
        (ones, (np.repeat(np.arange(m), k), np.arange(m * k))), shape=(m, m * k))
    cols = sparse.csr_matrix(
        (ones, (np.tile(np.arange(k), m), np.arange(m * k))), shape=(k, m * k))
    A_eq = sparse.vstack([rows, cols[:-1]])  # last column constraint is redundant
    b_eq = np.concatenate([w1, w2[:-1]])
    res = linprog(cost.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:  # pragma: no cover - balanced OT is always feasible
        raise NumericalError(f"transport LP failed: {res.message}")
    return max(0.0, float(res.fun))


def wasserstein1_clouds(u1, r1, w1, u2, r2, w2,
                        max_support: int = DEFAULT_SUPPORT_CAP) -> float:
    """Exact W1 between two weighted atom clouds under the rho ground cost.

    Works for both rank-based (ordered u) and name-based (p, q) clouds since
    the cost formula does not use the ordering.
    """
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    if len(w1) > max_support or len(w2) > max_support:
        raise InputError(f"support exceeds the cap of {max_support} atoms")
    cost = rho_cost_matrix(u1, r1, u2, r2)
    return _exact_ot(w1 / w1.sum(), w2 / w2.sum(), cost)


def wasserstein1(mu: EmpiricalMeasure, nu: EmpiricalMeasure,
                 max_support: int = DEFAULT_SUPPORT_CAP) -> float:
    """Exact 1-Wasserstein distance between two empirical measures."""
    if mu.n != nu.n:
        raise InputError(f"dimension mismatch: {mu.n} vs {nu.n}")
    return wasserstein1_clouds(mu.u, mu.r, mu.weights, nu.u, nu.r, nu.weights,
                               max_support=max_support)


@dataclass(frozen=True)
class StabilityConstants:
    """Lipschitz constants of the objective in the input measure."""

    K0: float
    K1: float
    K2: float
    K: float


def stability_constants(beta: float, n: int, eta0: float, eta1: float,
                        K2: float = 0.0) -> StabilityConstants:
    """K0 = 2 + sqrt(beta)/n, K1 = 2 + ((sqrt(beta)+2 beta)/n) e^{2 sqrt(beta)/n},
    K = |eta0| K0 + eta1 K1 + K2."""
    if beta <= 0 or n < 2 or eta1 <= 0 or K2 < 0:
        raise InputError("need beta > 0, n >= 2, eta1 > 0, K2 >= 0")
    rb = math.sqrt(beta)
    K0 = 2.0 + rb / n
    K1 = 2.0 + ((rb + 2.0 * beta) / n) * math.exp(2.0 * rb / n)
    return StabilityConstants(K0, K1, K2, abs(eta0) * K0 + eta1 * K1 + K2)


@dataclass(frozen=True)
class StabilityReport:
    """Both stability inequalities evaluated on a measure pair.

    Margins are (bound - observed gap); with solver error accounted for they
    must not fall below -1e-6.
    """

    j_gamma: float
    j_tilde: float
    j_cross: float
    w_distance: float
    constants: StabilityConstants
    solver_tol: float
    lipschitz_gap: float
    lipschitz_margin: float
    suboptimality_gap: float
    suboptimality_lower_margin: float
    suboptimality_upper_margin: float

    MARGIN_FLOOR = -1e-6

    @property
    def passed(self) -> bool:
        return (self.lipschitz_margin >= self.MARGIN_FLOOR
                and self.suboptimality_lower_margin >= self.MARGIN_FLOOR
                and self.suboptimality_upper_margin >= self.MARGIN_FLOOR)

    def to_dict(self) -> dict:
        return {
            "j_gamma": self.j_gamma,
            "j_tilde": self.j_tilde,
            "j_cross": self.j_cross,
            "w_distance": self.w_distance,
            "K": self.constants.K,
            "K0": self.constants.K0,
            "K1": self.constants.K1,
            "K2": self.constants.K2,
            "solver_tol": self.solver_tol,
            "lipschitz_gap": self.lipschitz_gap,
            "lipschitz_margin": self.lipschitz_margin,
            "suboptimality_gap": self.suboptimality_gap,
            "suboptimality_lower_margin": self.suboptimality_lower_margin,
            "suboptimality_upper_margin": self.suboptimality_upper_margin,
            "passed": self.passed,
        }


def _estimate_k2(spec, gamma: EmpiricalMeasure, gamma_tilde: EmpiricalMeasure,
                 solution) -> float:
    """Numerical Lipschitz estimate of a portfolio_distance penalty integrand
    over the sampled atoms (closed-form constants exist only for the
    built-in penalties)."""
    from .genfun import portfolio_weights
    from .simplex import rho_metric

    target = spec.regularizer.target
    u_all = np.vstack([gamma.u, gamma_tilde.u])
    r_all = np.vstack([gamma.r, gamma_tilde.r])
    m = u_all.shape[0]
    phi = np.empty(m)
    for k in range(m):
        pi = portfolio_weights(solution, u_all[k])
        phi[k] = float(np.sum((pi - np.asarray(target(u_all[k]))) ** 2))
    best = 0.0
    idx = np.arange(m)
    for i in idx[: min(m, 64)]:
        for j in idx[: min(m, 64)]:
            if i == j:
                continue
            d = rho_metric(
                (OrderedWeightVector(u_all[i]), WeightVector(r_all[i])),
                (OrderedWeightVector(u_all[j]), WeightVector(r_all[j])))
            if d > 1e-12:
                best = max(best, abs(phi[i] - phi[j]) / d)
    return 1.1 * best


def check_stability(gamma: EmpiricalMeasure, gamma_tilde: EmpiricalMeasure,
                    spec, opts=None) -> StabilityReport:
    """Solve the fit under both measures and test the Wasserstein stability
    inequalities |J(g) - J(g~)| <= K W and 0 <= J(g~) - J(l*; g~) <= 2 K W,
    each padded by twice the solver tolerance."""
    from dataclasses import replace as _replace

    from .optimize import SolverOptions, objective_value, solve

    if gamma.n != gamma_tilde.n:
        raise InputError("measures have mismatched dimension")
    opts = opts or SolverOptions()
    spec_g = _replace(spec, measure=gamma)
    spec_t = _replace(spec, measure=gamma_tilde)
    rep_g = solve(spec_g, opts)
    rep_t = solve(spec_t, opts)
    w = wasserstein1(gamma, gamma_tilde)

    if spec.regularizer.kind == "portfolio_distance":
        k2 = _estimate_k2(spec, gamma, gamma_tilde, rep_g.solution)
    else:
        k2 = 0.0
    consts = stability_constants(spec.beta, gamma.n, spec.eta0, spec.eta1, k2)

    j_cross = objective_value(rep_g.solution, spec_t)
    tol = opts.tolerance
    lip_gap = abs(rep_g.objective - rep_t.objective)
    sub_gap = rep_t.objective - j_cross
    return StabilityReport(
        j_gamma=rep_g.objective,
        j_tilde=rep_t.objective,
        j_cross=j_cross,
        w_distance=w,
        constants=consts,
        solver_tol=tol,
        lipschitz_gap=lip_gap,
        lipschitz_margin=consts.K * w + 2.0 * tol - lip_gap,
        suboptimality_gap=sub_gap,
        suboptimality_lower_margin=sub_gap + 2.0 * tol,
        suboptimality_upper_margin=2.0 * consts.K * w + 2.0 * tol - sub_gap,
    )
