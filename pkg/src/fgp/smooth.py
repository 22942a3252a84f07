"""Smoothing a feasible discrete solution into a certified generator.

A feasible node vector induces a concave piecewise affine interpolant f of
its exponential values.  Around each interior node, f is replaced by the
quadratic that matches value and slope at the window edges; adding a small
mesh-dependent constant before taking logs yields a C^1, exponentially
concave generator whose derivative stays within an O(min_mesh^alpha) band of
the discrete one.  certify_membership verifies the smoothness window
numerically; consistency_experiment measures the induced objective error
under mesh refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import InputError, NumericalError
from .genfun import FEAS_TOL, GenVector, Partition, constraint_residuals

C1_TOL = 1e-10
SECOND_DERIV_TOL = 1e-8


@dataclass(frozen=True)
class SmoothingConfig:
    alpha: float = 0.9
    big_m: float = 1.0
    sample_density: int = 64

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InputError("alpha must lie in (0, 1)")
        if self.big_m <= 0:
            raise InputError("big_m must be positive")
        if self.sample_density < 2:
            raise InputError("sample_density must be at least 2")


class CertifiedGenerator:
    """log(s(x) + min_mesh^alpha) + shift for a piecewise quadratic s.

    Pieces are stored as coefficient rows (A, B, C) around each piece's left
    edge; pieces are half-open on the right so evaluation is single-valued at
    junctions.
    """

    __slots__ = ("base", "alpha", "shift", "breaks", "coeffs", "lift")

    def __init__(self, base: GenVector, alpha: float, shift: float,
                 breaks: np.ndarray, coeffs: np.ndarray):
        breaks = np.asarray(breaks, dtype=float)
        coeffs = np.asarray(coeffs, dtype=float)
        breaks.setflags(write=False)
        coeffs.setflags(write=False)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "alpha", float(alpha))
        object.__setattr__(self, "shift", float(shift))
        object.__setattr__(self, "breaks", breaks)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "lift", base.partition.min_mesh ** alpha)

    def __setattr__(self, name, value):
        raise AttributeError("CertifiedGenerator is immutable")

    @property
    def n_pieces(self) -> int:
        return self.coeffs.shape[0]

    def piece_index(self, x):
        idx = np.searchsorted(self.breaks, x, side="right") - 1
        return np.clip(idx, 0, self.n_pieces - 1)

    def _s_parts(self, x, piece=None):
        x = np.asarray(x, dtype=float)
        k = self.piece_index(x) if piece is None else piece
        dx = x - self.breaks[k]
        a, b, c = self.coeffs[k, 0], self.coeffs[k, 1], self.coeffs[k, 2]
        s = a + b * dx + c * dx * dx
        sp = b + 2.0 * c * dx
        return s, sp, 2.0 * c

    def s(self, x):
        return self._s_parts(x)[0]

    def __call__(self, x):
        return np.log(self.s(x) + self.lift) + self.shift

    def deriv(self, x, piece=None):
        s, sp, _ = self._s_parts(x, piece)
        return sp / (s + self.lift)

    def second(self, x, piece=None):
        """Second derivative of the smoothed generator (per piece closed form)."""
        s, sp, spp = self._s_parts(x, piece)
        t = s + self.lift
        return (spp * t - sp * sp) / (t * t)


def build_smoother(g: GenVector, cfg: SmoothingConfig) -> CertifiedGenerator:
    """Construct the certified generator from a feasible node vector.

    Requires an almost-uniform partition (|mesh - min_mesh| <= M min_mesh^3)
    and exp-concave node values.
    """
    part = g.partition
    if not part.is_almost_uniform(cfg.big_m):
        raise InputError(
            f"partition is not almost uniform for M={cfg.big_m} "
            f"(mesh={part.mesh:.3e}, min_mesh={part.min_mesh:.3e})")
    res = constraint_residuals(g.values, part, beta=1.0, monotone=False)
    worst = float(np.max(res["exp_concave"]))
    if worst > FEAS_TOL:
        raise InputError(f"node values violate exp-concavity by {worst:.3e}")

    x = part.nodes
    f = np.exp(g.values)
    du = part.min_mesh
    h = du / 2.0

    def f_at(p):
        return float(np.interp(p, x, f))

    edges = [0.0]
    coeffs = []
    cursor = 0.0
    for i in range(1, part.d - 1):
        a, b = x[i] - h, x[i] + h
        if a - cursor > 1e-15:  # affine lead-in piece, f restricted to one segment
            seg = part.segment_index((cursor + a) / 2.0)
            slope = (f[seg + 1] - f[seg]) / (x[seg + 1] - x[seg])
            coeffs.append((f_at(cursor), slope, 0.0))
            edges.append(a)
        fm, f0, fp = f_at(x[i] - du), float(f[i]), f_at(x[i] + du)
        coeffs.append((
            (f0 + fm) / 2.0,
            (f0 - fm) / du,
            (fp - 2.0 * f0 + fm) / (2.0 * du * du),
        ))
        edges.append(b)
        cursor = b
    if 1.0 - cursor > 1e-15:
        seg = part.d - 2
        slope = (f[seg + 1] - f[seg]) / (x[seg + 1] - x[seg])
        coeffs.append((f_at(cursor), slope, 0.0))
        edges.append(1.0)
    else:
        edges[-1] = 1.0

    breaks = np.asarray(edges[:-1])
    coeffs = np.asarray(coeffs)
    lift = du ** cfg.alpha

    # pin the value at 1/2 to zero
    k = int(np.clip(np.searchsorted(breaks, 0.5, side="right") - 1, 0, len(coeffs) - 1))
    dx = 0.5 - breaks[k]
    s_half = coeffs[k, 0] + coeffs[k, 1] * dx + coeffs[k, 2] * dx * dx
    shift = -math.log(s_half + lift)
    return CertifiedGenerator(g, cfg.alpha, shift, breaks, coeffs)


@dataclass(frozen=True)
class CertificationReport:
    """Numerical verification of the smoothed generator's class membership."""

    beta: float
    second_min: float
    second_max: float
    worst_location: float
    worst_piece: tuple
    c1_gap_max: float
    c1_gap_location: float
    concavity_residual: float
    second_ok: bool
    c1_ok: bool
    exp_concave_ok: bool

    @property
    def passed(self) -> bool:
        return self.second_ok and self.c1_ok and self.exp_concave_ok

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "second_min": self.second_min,
            "second_max": self.second_max,
            "worst_location": self.worst_location,
            "worst_piece": list(self.worst_piece),
            "c1_gap_max": self.c1_gap_max,
            "c1_gap_location": self.c1_gap_location,
            "concavity_residual": self.concavity_residual,
            "second_ok": self.second_ok,
            "c1_ok": self.c1_ok,
            "exp_concave_ok": self.exp_concave_ok,
            "passed": self.passed,
        }


def _piece_edges(cert: CertifiedGenerator) -> np.ndarray:
    return np.append(cert.breaks, 1.0)


def certify_membership(cert: CertifiedGenerator, beta: float,
                       cfg: SmoothingConfig) -> CertificationReport:
    """Check the smoothed generator's second derivative against [-beta, 0]
    and its C^1 continuity at piece junctions.

    On each piece the second derivative's interior extrema sit where s' = 0;
    those points, the one-sided piece edges, and a dense sample (redundancy)
    are all evaluated in closed form.
    """
    if beta <= 0:
        raise InputError("beta must be positive")
    edges = _piece_edges(cert)
    second_min = math.inf
    second_max = -math.inf
    worst_x = 0.0
    worst_piece = (0.0, 1.0)
    for k in range(cert.n_pieces):
        a, b = edges[k], edges[k + 1]
        pts = [a, b]
        ck = cert.coeffs[k, 2]
        if ck != 0.0:
            vertex = cert.breaks[k] - cert.coeffs[k, 1] / (2.0 * ck)
            if a < vertex < b:
                pts.append(vertex)
        pts.extend(a + (b - a) * (np.arange(cfg.sample_density) + 0.5) / cfg.sample_density)
        xs = np.asarray(pts)
        vals = cert.second(xs, piece=np.full(xs.shape, k, dtype=int))
        k_min = int(np.argmin(vals))
        if vals[k_min] < second_min:
            second_min = float(vals[k_min])
            worst_x = float(xs[k_min])
            worst_piece = (float(a), float(b))
        second_max = max(second_max, float(vals.max()))

    # C^1 gaps at interior junctions (one-sided derivatives from both pieces)
    inner = cert.breaks[1:]
    left = cert.deriv(inner, piece=np.arange(cert.n_pieces - 1))
    right = cert.deriv(inner, piece=np.arange(1, cert.n_pieces))
    gaps = np.abs(left - right)
    c1_gap = float(gaps.max()) if gaps.size else 0.0
    c1_loc = float(inner[int(np.argmax(gaps))]) if gaps.size else 0.0

    # exponential concavity of s + lift: non-positive leading coefficients
    # plus non-increasing one-sided slopes across junctions
    lead = float(cert.coeffs[:, 2].max())
    sl_left = cert._s_parts(inner, piece=np.arange(cert.n_pieces - 1))[1]
    sl_right = cert._s_parts(inner, piece=np.arange(1, cert.n_pieces))[1]
    slope_jump = float(np.max(sl_right - sl_left)) if inner.size else 0.0
    concavity_residual = max(lead, slope_jump)

    return CertificationReport(
        beta=float(beta),
        second_min=second_min,
        second_max=second_max,
        worst_location=worst_x,
        worst_piece=worst_piece,
        c1_gap_max=c1_gap,
        c1_gap_location=c1_loc,
        concavity_residual=concavity_residual,
        second_ok=(second_min >= -beta - SECOND_DERIV_TOL
                   and second_max <= SECOND_DERIV_TOL),
        c1_ok=c1_gap <= C1_TOL,
        exp_concave_ok=concavity_residual <= SECOND_DERIV_TOL,
    )


def derivative_gap(cert: CertifiedGenerator, g: GenVector,
                   cfg: SmoothingConfig) -> float:
    """Sup over [0,1] of |smoothed derivative - piecewise affine derivative|.

    The smoothed derivative is monotone on every piece, so the sup against a
    per-segment constant is attained at sub-piece edges; interior samples are
    kept as a redundancy check.
    """
    if cert.base.partition != g.partition:
        raise InputError("certified generator was built from a different partition")
    cuts = np.unique(np.concatenate([_piece_edges(cert), g.partition.nodes]))
    gap = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a <= 1e-15:
            continue
        mid = 0.5 * (a + b)
        k = int(cert.piece_index(mid))
        slope = float(g.deriv(mid))
        xs = np.concatenate([[a, b],
                             a + (b - a) * (np.arange(cfg.sample_density) + 0.5)
                             / cfg.sample_density])
        d = cert.deriv(xs, piece=np.full(xs.shape, k, dtype=int))
        gap = max(gap, float(np.max(np.abs(d - slope))))
    return gap


@dataclass(frozen=True)
class MeshResult:
    d: int
    min_mesh: float
    objective: float
    gap_to_finest: float


@dataclass(frozen=True)
class ConsistencyResult:
    rows: tuple
    slope: float

    def to_dict(self) -> dict:
        return {
            "rows": [
                {"d": r.d, "min_mesh": r.min_mesh, "objective": r.objective,
                 "gap_to_finest": r.gap_to_finest}
                for r in self.rows
            ],
            "slope": self.slope,
        }


def consistency_experiment(template, mesh_sizes: Sequence[int],
                           opts=None) -> ConsistencyResult:
    """Solve the fit over uniform meshes of decreasing spacing and tabulate
    the optimal-value gap to the finest mesh.

    Regularization and the monotone constraint are switched off, matching the
    setting of the mesh-consistency guarantee.  The returned slope is the
    log-log regression coefficient of gap against min_mesh.
    """
    from .optimize import SolverOptions, solve

    sizes = sorted(set(int(d) for d in mesh_sizes))
    if len(sizes) < 3:
        raise InputError("need at least 3 mesh sizes")
    opts = opts or SolverOptions()
    results = []
    for d in sizes:
        part = Partition.uniform(d)
        spec_d = replace(template, partition=part, lam=0.0,
                         regularizer=template.regularizer.none(), monotone=False)
        rep = solve(spec_d, opts)
        if not rep.converged:
            raise NumericalError(f"mesh d={d} failed to converge")
        results.append((d, part.min_mesh, rep.objective))

    finest_obj = results[-1][2]
    rows = tuple(MeshResult(d, dm, obj, abs(obj - finest_obj))
                 for d, dm, obj in results)
    pts = [(math.log(r.min_mesh), math.log(r.gap_to_finest))
           for r in rows[:-1] if r.gap_to_finest > 1e-14]
    if len(pts) >= 2:
        lx, ly = np.array([p[0] for p in pts]), np.array([p[1] for p in pts])
        slope = float(np.polyfit(lx, ly, 1)[0])
    else:
        slope = math.nan
    return ConsistencyResult(rows=rows, slope=slope)
