"""Shared randomized builders for the test suite.

rand_smooth_generator draws true members of the beta-smooth exponentially
concave class (closed-form mixtures of concave building blocks, rescaled so
their measured curvature stays below 90% of the requested budget), so every
bound that holds for the class holds for these samples with real margin.
"""

from __future__ import annotations

import numpy as np

from fgp.genfun import AnalyticGenerator, GenVector, Partition
from fgp.measures import EmpiricalMeasure
from fgp.simplex import WeightVector

BETA_GRID = 4001
BETA_HEADROOM = 1.05
BETA_USE_FRACTION = 0.9


def _mixture(rng: np.random.Generator, beta_target: float):
    comps = []
    if rng.random() < 0.9:
        comps.append(("affine", float(rng.uniform(-1.5, 1.5))))
    if rng.random() < 0.9:
        c = float(rng.uniform(0.1, 1.0))
        t = float(rng.uniform(0.0, 1.0))
        c = min(c, 0.9 / max(t - 0.25, 0.75 - t, 0.05))
        comps.append(("parabola", c, t))
    if beta_target >= 25.0 or not comps:
        a = 1.0 / np.sqrt(rng.uniform(0.4, 0.9) * max(beta_target, 1.0))
        comps.append(("power", float(a), float(rng.uniform(0.5, 1.0))))
    w = rng.dirichlet(np.ones(len(comps)))
    return comps, w


def _mix_eval(comps, w, x):
    x = np.asarray(x, dtype=float)
    f = np.zeros_like(x)
    f1 = np.zeros_like(x)
    f2 = np.zeros_like(x)
    for wk, comp in zip(w, comps):
        kind = comp[0]
        if kind == "affine":
            b = comp[1]
            f += wk * (1.0 + b * (x - 0.5))
            f1 += wk * b
        elif kind == "parabola":
            c, t = comp[1], comp[2]
            f += wk * (1.0 - c * ((x - t) ** 2 - (0.5 - t) ** 2))
            f1 += wk * (-2.0 * c * (x - t))
            f2 += wk * (-2.0 * c)
        else:
            a, kappa = comp[1], comp[2]
            base = (a + x) / (a + 0.5)
            g = base ** kappa
            f += wk * g
            f1 += wk * kappa * g / (a + x)
            f2 += wk * kappa * (kappa - 1.0) * g / (a + x) ** 2
    return f, f1, f2


def rand_smooth_generator(rng: np.random.Generator, beta_target: float) -> AnalyticGenerator:
    """A random exponentially concave generator whose curvature stays within
    90% of beta_target, so it is feasible at beta_target with margin."""
    comps, w = _mixture(rng, beta_target)
    xs = np.linspace(0.0, 1.0, BETA_GRID)
    f, f1, f2 = _mix_eval(comps, w, xs)
    assert np.all(f > 0.0)
    neg_lpp = (f1**2 - f2 * f) / f**2
    beta_est = BETA_HEADROOM * float(neg_lpp.max())
    s = min(1.0, BETA_USE_FRACTION * beta_target / max(beta_est, 1e-30))

    def ev(x):
        return s * np.log(_mix_eval(comps, w, x)[0])

    def dv(x):
        fx, f1x, _ = _mix_eval(comps, w, x)
        return s * f1x / fx

    return AnalyticGenerator(eval=ev, deriv=dv, label=f"mix(s={s:.3g})")


def gen_vector_from(gen: AnalyticGenerator, partition: Partition) -> GenVector:
    """Node values of a true class member: feasible for the discrete
    constraint set by construction."""
    return GenVector(partition, gen(partition.nodes))


def rand_feasible_vector(rng: np.random.Generator, partition: Partition,
                         beta: float) -> GenVector:
    return gen_vector_from(rand_smooth_generator(rng, beta), partition)


def rand_weights(rng: np.random.Generator, n: int, conc: float = 5.0) -> WeightVector:
    return WeightVector(rng.dirichlet(np.full(n, conc)))


def rand_market(rng: np.random.Generator, n: int, steps: int,
                sigma: float = 0.05) -> list:
    """Mean-reverting log-weight walk: stays well inside the simplex."""
    logw = np.log(rng.dirichlet(np.full(n, 8.0)))
    out = []
    for _ in range(steps):
        centered = logw - logw.mean()
        logw = logw - 0.02 * centered + sigma * rng.standard_normal(n)
        w = np.exp(logw - logw.max())
        out.append(WeightVector(w / w.sum()))
    return out


def rand_measure(rng: np.random.Generator, n: int, m: int,
                 scale: float = 0.1, conc: float = 5.0) -> EmpiricalMeasure:
    u = np.sort(rng.dirichlet(np.full(n, conc), size=m), axis=1)[:, ::-1]
    r = np.exp(scale * rng.standard_normal((m, n)))
    r = r / r.sum(axis=1, keepdims=True)
    return EmpiricalMeasure(u, r)
