"""Fitting the generating function: a discretized concave program.

The decision variable is a node-value vector over a Partition (value at 1/2
pinned to 0).  The objective averages eta0 * diversity + eta1 * relative log
return over an empirical measure and subtracts a convex regularizer.  The
feasible set combines exp-concavity (log-sum-exp), discrete beta-smoothness
and endpoint-slope constraints, plus an optional monotone-weight surrogate.

The solver is a primal log-barrier interior-point method: damped Newton with
Armijo backtracking inside, barrier parameter divided by 10 per outer stage
starting at 1, stopping once (constraint count) * mu <= tolerance.  It is
fully deterministic: identical inputs give bit-identical reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InputError, NumericalError
from .genfun import (FEAS_TOL, FeasibilityReport, GenVector,
                     verify_membership)
from .measures import EmpiricalMeasure

_START_MARGIN = -1e-14


@dataclass(frozen=True)
class RegularizerSpec:
    """Convex penalty on the node values.

    kinds:
      none                 -- no penalty
      l2_derivative        -- integral of the squared derivative (pulls toward
                              the market portfolio)
      reference_deviation  -- integral of squared derivative gap to a
                              reference generator on the same partition
      portfolio_distance   -- measure-weighted squared distance between the
                              induced portfolio and a target weight rule
    """

    kind: str
    ref: Optional[GenVector] = None
    target: Optional[Callable] = None

    _KINDS = ("none", "l2_derivative", "reference_deviation", "portfolio_distance")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise InputError(f"unknown regularizer kind {self.kind!r}")
        if self.kind == "reference_deviation" and self.ref is None:
            raise InputError("reference_deviation requires a reference generator")
        if self.kind == "portfolio_distance" and self.target is None:
            raise InputError("portfolio_distance requires a target weight rule")

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def l2_derivative(cls):
        return cls("l2_derivative")

    @classmethod
    def reference_deviation(cls, ref: GenVector):
        return cls("reference_deviation", ref=ref)

    @classmethod
    def portfolio_distance(cls, target: Callable):
        return cls("portfolio_distance", target=target)

    def compile(self, partition: Partition, measure: EmpiricalMeasure):
        """Quadratic form (Q, q, c) with R(l) = 0.5 l'Ql + q.l + c."""
        d = partition.d
        dx = partition.spacings
        if self.kind == "none":
            return np.zeros((d, d)), np.zeros(d), 0.0
        if self.kind in ("l2_derivative", "reference_deviation"):
            D = np.zeros((d - 1, d))
            idx = np.arange(d - 1)
            D[idx, idx] = -1.0 / dx
            D[idx, idx + 1] = 1.0 / dx
            Q = 2.0 * D.T @ (dx[:, None] * D)
            if self.kind == "l2_derivative":
                return Q, np.zeros(d), 0.0
            if self.ref.partition != partition:
                raise InputError("reference generator must live on the problem partition")
            s0 = self.ref.slopes
            q = -2.0 * D.T @ (dx * s0)
            return Q, q, float(np.sum(dx * s0**2))
        # portfolio_distance
        n = measure.n
        Q = np.zeros((d, d))
        q = np.zeros(d)
        c = 0.0
        for u, w in zip(measure.u, measure.weights):
            segs = partition.segment_index(u)
            G = np.zeros((n, d))
            rows = np.arange(n)
            G[rows, segs] = -1.0 / dx[segs]
            G[rows, segs + 1] = 1.0 / dx[segs]
            T = (u[:, None] * (G - np.outer(np.ones(n), u @ G))) / n
            target_w = np.asarray(self.target(u), dtype=float)
            if target_w.shape != (n,) or abs(target_w.sum() - 1.0) > 1e-8:
                raise InputError("target rule must return weights summing to 1")
            mvec = u - target_w
            Q += 2.0 * w * T.T @ T
            q += 2.0 * w * T.T @ mvec
            c += w * float(mvec @ mvec)
        return Q, q, c


@dataclass(frozen=True)
class ProblemSpec:
    """A full optimization instance over a fixed partition and measure."""

    measure: EmpiricalMeasure
    partition: Partition
    beta: float
    eta0: float = 0.0
    eta1: float = 1.0
    lam: float = 0.0
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec.none)
    monotone: bool = False

    def __post_init__(self):
        if self.beta <= 0:
            raise InputError("beta must be positive")
        if self.eta1 <= 0:
            raise InputError("eta1 must be positive")
        if self.lam < 0:
            raise InputError("lambda must be nonnegative")


def eta_from_weights(w0: float, w1: float) -> tuple[float, float]:
    """Convert (diversity weight, volatility weight) to (eta0, eta1)."""
    if w1 <= 0:
        raise InputError("volatility weight must be positive")
    return w0 - w1, w1


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-8
    max_outer: int = 60
    max_inner: int = 200
    barrier_decrease: float = 10.0
    x0: Optional[GenVector] = None
    keep_trace: bool = False

    def __post_init__(self):
        if self.tolerance <= 0 or self.barrier_decrease <= 1:
            raise InputError("need tolerance > 0 and barrier_decrease > 1")


@dataclass(frozen=True)
class SolveReport:
    solution: GenVector
    objective: float
    iterations: int
    kkt_residual: float
    barrier_final: float
    feasibility: FeasibilityReport
    converged: bool
    trace: Optional[tuple] = None

    def to_dict(self, beta: float | None = None) -> dict:
        return {
            "solution": self.solution.to_dict(beta),
            "objective": self.objective,
            "iterations": self.iterations,
            "kkt_residual": self.kkt_residual,
            "barrier_final": self.barrier_final,
            "converged": self.converged,
            "feasibility": self.feasibility.to_dict(),
        }


@dataclass(frozen=True)
class OracleResult:
    solution: GenVector
    objective: float
    n_feasible: int
    n_skipped: int


class _Compiled:
    """Problem data precomputed per spec: per-atom linear forms, regularizer
    quadratic, and constraint geometry."""

    def __init__(self, spec: ProblemSpec):
        part = spec.partition
        x, dx, d = part.nodes, part.spacings, part.d
        meas = spec.measure
        n = meas.n
        m_atoms = meas.m

        U, R, w = meas.u, meas.r, meas.weights
        UR = U * R
        V = UR / UR.sum(axis=1, keepdims=True)

        # L(u, r; l) = log(1 + a.l) with a from the per-rank slope selectors
        A = np.zeros((m_atoms, d))
        segs = part.segment_index(U)
        coeff = (V - U) / (n * dx[segs])
        rows = np.repeat(np.arange(m_atoms), n)
        np.add.at(A, (rows, (segs + 1).ravel()), coeff.ravel())
        np.add.at(A, (rows, segs.ravel()), -coeff.ravel())

        # D(v : u) = b.l from interpolation weights at v and u
        B = np.zeros((m_atoms, d))
        for Y, sign in ((V, 1.0), (U, -1.0)):
            sy = part.segment_index(Y)
            t = (Y - x[sy]) / dx[sy]
            np.add.at(B, (rows, sy.ravel()), (sign * (1.0 - t) / n).ravel())
            np.add.at(B, (rows, (sy + 1).ravel()), (sign * t / n).ravel())

        self.spec = spec
        self.d = d
        self.A = A
        self.w = w
        self.bbar = spec.eta0 * (B.T @ w)
        Q, qvec, rconst = spec.regularizer.compile(part, meas)
        self.Q, self.qvec, self.rconst = Q, qvec, rconst

        # constraint geometry
        self.lse_w = dx[:-1] / (x[2:] - x[:-2])  # interior-node chord weights
        G_rows = []
        offs = []
        idx = np.arange(d - 2)
        Gs = np.zeros((d - 2, d))
        Gs[idx, idx] = -1.0 / dx[:-1]
        Gs[idx, idx + 1] = 1.0 / dx[:-1] + 1.0 / dx[1:]
        Gs[idx, idx + 2] = -1.0 / dx[1:]
        G_rows.append(Gs)
        offs.append(-0.5 * spec.beta * (x[2:] - x[:-2]))
        if spec.monotone:
            Gm = np.zeros((d - 1, d))
            im = np.arange(d - 1)
            Gm[im, im] = 1.0 / dx
            Gm[im, im + 1] = -1.0 / dx
            G_rows.append(Gm)
            offs.append(np.zeros(d - 1))
            # x_i s_i <= x_{i+1} s_{i+1}; the row at x_1 = 0 duplicates a sign
            # constraint, so start from the second junction
            Gg = np.zeros((d - 3, d))
            ig = np.arange(d - 3)
            Gg[ig, ig + 1] = -x[1:-2] / dx[1:-1]
            Gg[ig, ig + 2] = x[1:-2] / dx[1:-1] + x[2:-1] / dx[2:]
            Gg[ig, ig + 3] = -x[2:-1] / dx[2:]
            G_rows.append(Gg)
            offs.append(np.zeros(d - 3))
        self.G_aff = np.vstack(G_rows)
        self.off_aff = np.concatenate(offs)

        c1 = np.zeros(d)
        c1[0], c1[1] = -1.0 / dx[0], 1.0 / dx[0]
        cd = np.zeros(d)
        cd[-2], cd[-1] = -1.0 / dx[-1], 1.0 / dx[-1]
        self.end_vecs = np.stack([c1, cd])

        self.n_lse = d - 2
        self.n_aff = self.G_aff.shape[0]
        self.n_constraints = self.n_lse + self.n_aff + 2
        self.free = np.arange(d) != part.half_index

    # ---- objective -------------------------------------------------------

    def log_args(self, l: np.ndarray) -> np.ndarray:
        return 1.0 + self.A @ l

    def objective(self, l: np.ndarray) -> float:
        args = self.log_args(l)
        if np.any(args <= 0.0):
            raise NumericalError("relative return non-positive at this point")
        spec = self.spec
        val = float(self.bbar @ l) + spec.eta1 * float(self.w @ np.log(args))
        if spec.lam > 0.0:
            val -= spec.lam * (0.5 * float(l @ self.Q @ l) + float(self.qvec @ l) + self.rconst)
        return val

    def objective_grad(self, l: np.ndarray) -> np.ndarray:
        args = self.log_args(l)
        g = self.bbar + self.spec.eta1 * (self.A.T @ (self.w / args))
        if self.spec.lam > 0.0:
            g = g - self.spec.lam * (self.Q @ l + self.qvec)
        return g

    def objective_hess(self, l: np.ndarray) -> np.ndarray:
        args = self.log_args(l)
        scale = self.spec.eta1 * self.w / args**2
        H = -(self.A.T * scale) @ self.A
        if self.spec.lam > 0.0:
            H = H - self.spec.lam * self.Q
        return H

    # ---- constraints -----------------------------------------------------

    def _lse_parts(self, l: np.ndarray):
        hi = np.log(self.lse_w) + l[2:]
        lo = np.log1p(-self.lse_w) + l[:-2]
        lse = np.logaddexp(hi, lo)
        p_hi = np.exp(hi - lse)
        return lse - l[1:-1], p_hi

    def constraint_values(self, l: np.ndarray) -> np.ndarray:
        lse_vals, _ = self._lse_parts(l)
        aff = self.G_aff @ l + self.off_aff
        ends = (self.end_vecs @ l) ** 2 - self.spec.beta
        return np.concatenate([lse_vals, aff, ends])

    def constraint_grads(self, l: np.ndarray) -> np.ndarray:
        d = self.d
        _, p_hi = self._lse_parts(l)
        G = np.zeros((self.n_constraints, d))
        idx = np.arange(self.n_lse)
        G[idx, idx + 1] = -1.0
        G[idx, idx + 2] = p_hi
        G[idx, idx] = 1.0 - p_hi
        G[self.n_lse:self.n_lse + self.n_aff] = self.G_aff
        slopes = self.end_vecs @ l
        G[-2] = 2.0 * slopes[0] * self.end_vecs[0]
        G[-1] = 2.0 * slopes[1] * self.end_vecs[1]
        return G

    def barrier_curvature(self, l: np.ndarray, vals: np.ndarray, mu: float) -> np.ndarray:
        """Sum of mu * hess(g_c) / (-g_c) over the non-affine constraints."""
        d = self.d
        H = np.zeros((d, d))
        _, p_hi = self._lse_parts(l)
        fac = mu * p_hi * (1.0 - p_hi) / (-vals[:self.n_lse])
        i = np.arange(self.n_lse)
        np.add.at(H, (i, i), fac)
        np.add.at(H, (i + 2, i + 2), fac)
        np.add.at(H, (i, i + 2), -fac)
        np.add.at(H, (i + 2, i), -fac)
        for k in (0, 1):
            c = self.end_vecs[k]
            H += (2.0 * mu / (-vals[self.n_lse + self.n_aff + k])) * np.outer(c, c)
        return H

    def strictly_feasible(self, l: np.ndarray, margin: float = _START_MARGIN) -> bool:
        return (float(self.constraint_values(l).max()) < margin
                and float(self.log_args(l).min()) > 0.0)


def _compile(spec: ProblemSpec) -> _Compiled:
    return _Compiled(spec)


def _default_starts(spec: ProblemSpec) -> list[np.ndarray]:
    x = spec.partition.nodes
    eps = min(spec.beta, 1.0) / 100.0
    logs = [eps * (np.log(a + x) - math.log(a + 0.5)) for a in (1.0, 3.0, 0.5)]
    quads = [-eps * s * (x - 0.5) ** 2 for s in (1.0, 0.1)]
    return logs + quads if spec.monotone else quads + logs


def solve(spec: ProblemSpec, opts: SolverOptions | None = None) -> SolveReport:
    """Solve the discretized fit by the primal log-barrier method.

    Never infeasible: the zero vector is always in the constraint set, and it
    is returned exactly whenever it scores at least as well as the final
    barrier iterate.  On iteration exhaustion the last iterate is returned
    with converged=False.
    """
    opts = opts or SolverOptions()
    comp = _compile(spec)
    part = spec.partition

    if opts.x0 is not None:
        if opts.x0.partition != part:
            raise InputError("start vector must live on the problem partition")
        l = opts.x0.values.copy()
        if not comp.strictly_feasible(l):
            raise InputError("supplied start is not strictly feasible")
    else:
        for cand in _default_starts(spec):
            cand = cand - cand[part.half_index]
            if comp.strictly_feasible(cand):
                l = cand
                break
        else:  # pragma: no cover - the log start is feasible for any beta > 0
            raise NumericalError("no strictly feasible start found")

    free = comp.free
    m = comp.n_constraints
    tol = opts.tolerance
    mu = 1.0
    total_newton = 0
    trace = [] if opts.keep_trace else None
    converged = False
    grad_norm = math.inf

    def barrier_value(lv: np.ndarray, mu_: float) -> float:
        vals = comp.constraint_values(lv)
        if vals.max() >= 0.0 or comp.log_args(lv).min() <= 0.0:
            return math.inf
        return -comp.objective(lv) - mu_ * float(np.sum(np.log(-vals)))

    def newton_direction(Hf, gf):
        try:
            step_f = np.linalg.solve(Hf, -gf)
            # two rounds of iterative refinement: the barrier Hessian is
            # badly conditioned at small mu and the raw solve loses the
            # digits the final stage needs
            for _ in range(2):
                step_f -= np.linalg.solve(Hf, Hf @ step_f + gf)
        except np.linalg.LinAlgError:
            ridge = 1e-12 * max(1.0, float(np.trace(Hf)) / Hf.shape[0])
            step_f = np.linalg.solve(Hf + ridge * np.eye(Hf.shape[0]), -gf)
        return step_f

    def barrier_hessian(lv, vals, mu_):
        G = comp.constraint_grads(lv)
        return (-comp.objective_hess(lv)
                + (G.T * (mu_ / vals**2)) @ G
                + comp.barrier_curvature(lv, vals, mu_))

    for outer in range(opts.max_outer):
        final = m * mu <= tol
        for _ in range(opts.max_inner):
            vals = comp.constraint_values(l)
            grad_f = -comp.objective_grad(l) + comp.constraint_grads(l).T @ (mu / (-vals))
            grad_norm = float(np.linalg.norm(grad_f[free]))
            if final and grad_norm <= 0.5 * tol:
                break
            Hf = barrier_hessian(l, vals, mu)[np.ix_(free, free)]
            gf = grad_f[free]
            step_f = newton_direction(Hf, gf)
            decrement = float(-gf @ step_f)
            if final and 0.0 <= decrement <= (0.5 * tol) ** 2:
                # gradient norm in the local Hessian metric (Newton
                # decrement) is at target; float64 cannot do better when the
                # Euclidean norm is pinned by active-constraint stiffness
                break
            if not final and decrement / 2.0 <= 0.01 * mu:
                break
            if decrement <= 0.0:
                break
            step = np.zeros_like(l)
            step[free] = step_f
            f0 = barrier_value(l, mu)
            t = 1.0
            accepted = False
            while t >= 1e-14:
                l_new = l + t * step
                if barrier_value(l_new, mu) <= f0 - 1e-4 * t * decrement:
                    accepted = True
                    break
                t *= 0.5
            if not accepted and 1e-4 * decrement <= 1e-13 * (1.0 + abs(f0)):
                # the predicted decrease is below what float evaluation of the
                # merit can resolve; polish on the gradient norm instead
                l_new = l + step
                vals_new = comp.constraint_values(l_new)
                if vals_new.max() < 0.0 and comp.log_args(l_new).min() > 0.0:
                    g_new = (-comp.objective_grad(l_new)
                             + comp.constraint_grads(l_new).T @ (mu / (-vals_new)))
                    if np.linalg.norm(g_new[free]) < grad_norm:
                        accepted = True
            if not accepted:
                break
            l = l_new
            total_newton += 1
            if trace is not None:
                trace.append(l.copy())
        if final:
            converged = True
            break
        mu /= opts.barrier_decrease
    else:
        converged = False

    # residual at the final barrier iterate: the barrier gradient in
    # whichever norm is sharper (Euclidean, or the local Hessian metric via
    # the Newton decrement), plus the worst constraint violation
    vals = comp.constraint_values(l)
    grad_f = -comp.objective_grad(l) + comp.constraint_grads(l).T @ (mu / (-vals))
    gn = float(np.linalg.norm(grad_f[free]))
    Hf = barrier_hessian(l, vals, mu)[np.ix_(free, free)]
    dec = float(-grad_f[free] @ newton_direction(Hf, grad_f[free]))
    kkt = min(gn, math.sqrt(max(dec, 0.0))) + max(0.0, float(vals.max()))
    converged = converged and kkt <= tol

    # dominance polish: the zero vector is always feasible; when the barrier
    # center does not beat it (optimum at or within tolerance of the market
    # portfolio), return it exactly
    zero = np.zeros(comp.d)
    if comp.objective(zero) >= comp.objective(l):
        l = zero
    solution = GenVector(part, l)
    return SolveReport(
        solution=solution,
        objective=comp.objective(l),
        iterations=total_newton,
        kkt_residual=kkt,
        barrier_final=mu,
        feasibility=verify_membership(solution, spec.beta, spec.monotone),
        converged=converged and kkt <= tol,
        trace=tuple(trace) if trace is not None else None,
    )


def objective_value(g: GenVector, spec: ProblemSpec) -> float:
    """Evaluate the fit objective at a given generator on the same partition."""
    if g.partition != spec.partition:
        raise InputError("generator must live on the problem partition")
    return _compile(spec).objective(g.values)


def brute_force_oracle(spec: ProblemSpec, steps_per_node: int = 21) -> OracleResult:
    """Exhaustive scan over a node-value grid; the desk-scale verification
    oracle for the solver.

    The value at 1/2 stays pinned to 0; every other node ranges over a
    uniform bracket [-sqrt(beta)/2, log 2] (the guaranteed range of feasible
    node values) with 0 added so the zero vector is always scanned.
    Infeasible grid points are skipped and counted.
    """
    part = spec.partition
    if part.d > 5:
        raise InputError("oracle limited to partitions with at most 5 nodes")
    if not 2 <= steps_per_node <= 21:
        raise InputError("steps_per_node must be between 2 and 21")
    comp = _compile(spec)
    bracket = np.linspace(-math.sqrt(spec.beta) / 2.0, math.log(2.0), steps_per_node)
    bracket = np.unique(np.concatenate([bracket, [0.0]]))
    free_idx = [i for i in range(part.d) if i != part.half_index]
    grids = np.meshgrid(*[bracket] * len(free_idx), indexing="ij")
    N = grids[0].size
    L = np.zeros((N, part.d))
    for ax, i in enumerate(free_idx):
        L[:, i] = grids[ax].ravel()

    # vectorized feasibility over the whole batch
    hi = np.log(comp.lse_w)[None, :] + L[:, 2:]
    lo = np.log1p(-comp.lse_w)[None, :] + L[:, :-2]
    lse = np.logaddexp(hi, lo) - L[:, 1:-1]
    aff = L @ comp.G_aff.T + comp.off_aff[None, :]
    ends = (L @ comp.end_vecs.T) ** 2 - spec.beta
    feas = ((lse <= FEAS_TOL).all(axis=1)
            & (aff <= FEAS_TOL).all(axis=1)
            & (ends <= FEAS_TOL).all(axis=1))
    args = 1.0 + L @ comp.A.T
    feas &= (args > 0.0).all(axis=1)
    n_feasible = int(feas.sum())
    if n_feasible == 0:  # pragma: no cover - 0 is always on the grid
        raise NumericalError("oracle grid contains no feasible point")

    Lf = L[feas]
    obj = Lf @ comp.bbar + spec.eta1 * (np.log(1.0 + Lf @ comp.A.T) @ comp.w)
    if spec.lam > 0.0:
        quad = 0.5 * np.einsum("ij,jk,ik->i", Lf, comp.Q, Lf)
        obj -= spec.lam * (quad + Lf @ comp.qvec + comp.rconst)
    best = int(np.argmax(obj))
    return OracleResult(
        solution=GenVector(part, Lf[best]),
        objective=float(obj[best]),
        n_feasible=n_feasible,
        n_skipped=int(N - n_feasible),
    )


def solution_deviation(g: GenVector, ref: GenVector) -> float:
    """Max absolute slope gap between two generators on one partition (the
    discrete analogue of the sup-derivative metric)."""
    if g.partition != ref.partition:
        raise InputError("generators live on different partitions")
    return float(np.max(np.abs(g.slopes - ref.slopes)))
