"""Simplex geometry: weight vectors, rank transforms, Aitchison operations, metrics.

Everything here is a pure function of immutable value objects, so all of it is
safe to call concurrently.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError

# Entries at or below this are treated as corrupt data, not rounding noise.
MIN_ENTRY = 1e-14
# Renormalizing may move each entry by at most this much.
RENORM_TOL = 1e-6


def _validate_weights(entries) -> np.ndarray:
    w = np.asarray(entries, dtype=float)
    if w.ndim != 1 or w.size < 2:
        raise InputError("weight vector must be 1-d with at least 2 entries")
    if not np.all(np.isfinite(w)):
        raise InputError("weight vector has non-finite entries")
    if np.any(w <= MIN_ENTRY):
        raise InputError(f"weight entries must be > {MIN_ENTRY}")
    s = float(w.sum())
    if np.max(np.abs(w / s - w)) > RENORM_TOL:
        raise InputError(
            f"entries sum to {s!r}; renormalization would move an entry by more "
            f"than {RENORM_TOL} (corrupt data?)"
        )
    if abs(s - 1.0) > 1e-13:  # skip when already normalized: keeps
        w = w / s             # construction idempotent bit-for-bit
    else:
        w = w.copy()
    w.setflags(write=False)
    return w


class WeightVector:
    """A point of the open unit simplex: entries in (0, 1) summing to 1.

    Inputs are renormalized on construction; they are rejected if any entry is
    <= 1e-14 or renormalization moves an entry by more than 1e-6.
    """

    __slots__ = ("entries",)

    def __init__(self, entries):
        object.__setattr__(self, "entries", _validate_weights(entries))

    def __setattr__(self, name, value):
        raise AttributeError(f"{type(self).__name__} is immutable")

    @property
    def n(self) -> int:
        return self.entries.size

    def __len__(self) -> int:
        return self.entries.size

    def __repr__(self) -> str:
        return f"{type(self).__name__}({np.array2string(self.entries, precision=6)})"


class OrderedWeightVector(WeightVector):
    """A WeightVector with non-increasing entries (a capital distribution)."""

    __slots__ = ()

    def __init__(self, entries):
        super().__init__(entries)
        e = self.entries
        if np.any(e[:-1] < e[1:]):
            raise InputError("entries must be non-increasing")


def equal_weights(n: int) -> WeightVector:
    """The barycenter (1/n, ..., 1/n), the zero element of Aitchison geometry."""
    return WeightVector(np.full(n, 1.0 / n))


class RankTransition:
    """One market step in rank coordinates.

    u is the ranked capital distribution, r the normalized per-rank relative
    returns, and sigma the permutation sending rank to original index
    (0-based: u[k] == p[sigma[k]]).
    """

    __slots__ = ("u", "r", "sigma")

    def __init__(self, u: OrderedWeightVector, r: WeightVector, sigma):
        sigma = tuple(int(k) for k in sigma)
        if u.n != r.n or len(sigma) != u.n:
            raise InputError("u, r and sigma must share one dimension")
        if sorted(sigma) != list(range(u.n)):
            raise InputError("sigma is not a permutation")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "sigma", sigma)

    def __setattr__(self, name, value):
        raise AttributeError("RankTransition is immutable")


def rank_transform(p: WeightVector, q: WeightVector) -> RankTransition:
    """Convert a name-based step (p -> q) into rank coordinates (u, r, sigma).

    Ranks are assigned by descending weight; ties go to the lower original
    index (stable sort), which keeps the transform deterministic and
    replayable.
    """
    if p.n != q.n:
        raise InputError(f"dimension mismatch: {p.n} vs {q.n}")
    sigma = np.argsort(-p.entries, kind="stable")
    u = p.entries[sigma]
    v = q.entries[sigma]
    ratio = v / u
    r = ratio / ratio.sum()
    return RankTransition(OrderedWeightVector(u), WeightVector(r), sigma)


def inverse_rank_transform(t: RankTransition) -> WeightVector:
    """Recover the name-based successor q from (u, r, sigma)."""
    u = t.u.entries
    r = t.r.entries
    v = u * r / np.dot(u, r)
    q = np.empty_like(v)
    q[np.asarray(t.sigma)] = v
    return WeightVector(q)


def aitchison_add(a: WeightVector, b: WeightVector) -> WeightVector:
    """Componentwise product renormalized: the simplex vector addition."""
    if a.n != b.n:
        raise InputError(f"dimension mismatch: {a.n} vs {b.n}")
    w = a.entries * b.entries
    return WeightVector(w / w.sum())


def aitchison_sub(a: WeightVector, b: WeightVector) -> WeightVector:
    """Componentwise quotient renormalized: inverse of aitchison_add."""
    if a.n != b.n:
        raise InputError(f"dimension mismatch: {a.n} vs {b.n}")
    w = a.entries / b.entries
    return WeightVector(w / w.sum())


def hilbert_metric(p: WeightVector, q: WeightVector) -> float:
    """Hilbert projective metric log(max_i p_i/q_i * max_j q_j/p_j).

    Computed as the spread of componentwise log ratios, which makes the
    symmetry exact in floating point.
    """
    if p.n != q.n:
        raise InputError(f"dimension mismatch: {p.n} vs {q.n}")
    diff = np.log(p.entries) - np.log(q.entries)
    return float(diff.max() - diff.min())


def _tilde_d(a: np.ndarray, b: np.ndarray) -> float:
    # max of Hilbert metric and l1 distance on raw weight arrays
    diff = np.log(a) - np.log(b)
    return float(max(diff.max() - diff.min(), np.abs(a - b).sum()))


def rho_metric(x, y) -> float:
    """Metric on (capital distribution, rank volatility) pairs.

    rho((u, r), (u', r')) = max{d_H(u,u'), |u-u'|_1} + max{d_H(r,r'), |r-r'|_1}.
    """
    (u, r), (u2, r2) = x, y
    if u.n != u2.n or r.n != r2.n:
        raise InputError("dimension mismatch between the pairs")
    return _tilde_d(u.entries, u2.entries) + _tilde_d(r.entries, r2.entries)
