"""File-based ingestion and serialization: market CSVs, measure CSVs,
generator/report JSON, plus a rank-based synthetic market generator."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .genfun import GenVector
from .market import MarketHistory
from .measures import EmpiricalMeasure


class DataError(InputError):
    """Malformed input file; messages carry 1-based line numbers."""


@dataclass(frozen=True)
class CapsCsvSchema:
    date: str = "date"
    asset_id: str = "asset_id"
    cap: str = "cap"
    total_return: str = "total_return"
    delist_return: str = "delist_return"


@dataclass(frozen=True)
class LoadReport:
    n_rows: int
    n_dates: int
    n_assets: int
    n_missing_returns: int
    n_delistings: int


def load_history(path, schema: CapsCsvSchema = CapsCsvSchema()):
    """Read a long-format market CSV into a MarketHistory.

    One row per (date, listed asset); dates must appear in chronological
    order.  Blank total_return cells are imputed from the cap ratio (0% if
    impossible) and counted in the report.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        required = [schema.date, schema.asset_id, schema.cap]
        for col in required:
            if col not in reader.fieldnames:
                raise DataError(f"{path}: missing column {col!r}")
        has_ret = schema.total_return in reader.fieldnames
        has_delist = schema.delist_return in reader.fieldnames

        dates: list = []
        date_pos: dict = {}
        assets: list = []
        asset_pos: dict = {}
        rows = []
        for lineno, row in enumerate(reader, start=2):
            date = row[schema.date]
            asset = row[schema.asset_id]
            if not date or not asset:
                raise DataError(f"{path} line {lineno}: missing date or asset_id")
            try:
                cap = float(row[schema.cap])
            except (TypeError, ValueError):
                raise DataError(f"{path} line {lineno}: bad cap {row[schema.cap]!r}")
            if not np.isfinite(cap) or cap <= 0:
                raise DataError(f"{path} line {lineno}: non-positive cap")
            ret = None
            if has_ret and row[schema.total_return] not in (None, ""):
                try:
                    ret = float(row[schema.total_return])
                except ValueError:
                    raise DataError(f"{path} line {lineno}: bad total_return")
            dl = None
            if has_delist and row.get(schema.delist_return) not in (None, ""):
                try:
                    dl = float(row[schema.delist_return])
                except ValueError:
                    raise DataError(f"{path} line {lineno}: bad delist_return")
            if date not in date_pos:
                date_pos[date] = len(dates)
                dates.append(date)
            elif date != dates[-1]:
                raise DataError(f"{path} line {lineno}: dates out of order")
            if asset not in asset_pos:
                asset_pos[asset] = len(assets)
                assets.append(asset)
            rows.append((lineno, date_pos[date], asset_pos[asset], cap, ret, dl))

    if not rows:
        raise DataError(f"{path}: no data rows")
    T, N = len(dates), len(assets)
    caps = np.full((T, N), np.nan)
    rets = np.full((T, N), np.nan)
    delistings = {}
    seen = set()
    for lineno, t, j, cap, ret, dl in rows:
        if (t, j) in seen:
            raise DataError(f"{path} line {lineno}: duplicate (date, asset) row")
        seen.add((t, j))
        caps[t, j] = cap
        if ret is not None:
            rets[t, j] = ret
        if dl is not None:
            delistings[(t, j)] = dl

    n_missing = 0
    for t in range(T - 1):
        listed = ~np.isnan(caps[t])
        for j in np.flatnonzero(listed):
            if (t, j) in delistings:
                continue
            if np.isnan(rets[t, j]):
                n_missing += 1
                if not np.isnan(caps[t + 1, j]):
                    rets[t, j] = caps[t + 1, j] / caps[t, j] - 1.0
                else:
                    rets[t, j] = 0.0

    history = MarketHistory(tuple(dates), tuple(assets), caps, rets, delistings)
    report = LoadReport(n_rows=len(rows), n_dates=T, n_assets=N,
                        n_missing_returns=n_missing, n_delistings=len(delistings))
    return history, report


def save_history(history: MarketHistory, path,
                 schema: CapsCsvSchema = CapsCsvSchema()) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([schema.date, schema.asset_id, schema.cap,
                         schema.total_return, schema.delist_return])
        for t, date in enumerate(history.dates):
            for j in np.flatnonzero(history.listed(t)):
                ret = history.total_returns[t, j]
                dl = history.delistings.get((t, j))
                writer.writerow([
                    date,
                    history.identifiers[j],
                    repr(float(history.caps[t, j])),
                    "" if np.isnan(ret) else repr(float(ret)),
                    "" if dl is None else repr(float(dl)),
                ])


@dataclass(frozen=True)
class SyntheticModelSpec:
    """Rank-based lognormal market: log X_i(t+1) = log X_i(t) + g_rank + s_rank Z.

    Drifts decreasing in capitalisation (favoring small stocks) produce the
    stable capital distribution that the rank-based pipeline exploits.
    """

    n: int
    periods: int
    rank_drifts: tuple
    rank_vols: tuple
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.periods < 2:
            raise InputError("need n >= 2 and periods >= 2")
        if len(self.rank_drifts) != self.n or len(self.rank_vols) != self.n:
            raise InputError("rank_drifts and rank_vols must have length n")
        if any(v <= 0 for v in self.rank_vols):
            raise InputError("rank volatilities must be positive")


def simulate_market(spec: SyntheticModelSpec) -> MarketHistory:
    """Deterministic (per seed) synthetic history; caps only, no dividends."""
    rng = np.random.default_rng(spec.seed)
    g = np.asarray(spec.rank_drifts, dtype=float)
    s = np.asarray(spec.rank_vols, dtype=float)
    logx = np.linspace(np.log(50.0), 0.0, spec.n)  # spread-out initial caps
    caps = np.empty((spec.periods, spec.n))
    caps[0] = np.exp(logx)
    for t in range(1, spec.periods):
        rank_of = np.empty(spec.n, dtype=int)
        rank_of[np.argsort(-caps[t - 1], kind="stable")] = np.arange(spec.n)
        z = rng.standard_normal(spec.n)
        logx = logx + g[rank_of] + s[rank_of] * z
        caps[t] = np.exp(logx)
    rets = np.full((spec.periods, spec.n), np.nan)
    rets[:-1] = caps[1:] / caps[:-1] - 1.0
    dates = tuple(f"{t:06d}" for t in range(spec.periods))
    ids = tuple(f"A{i:04d}" for i in range(spec.n))
    return MarketHistory(dates, ids, caps, rets, {})


# ---- measures ------------------------------------------------------------


def save_measures(measures, path) -> None:
    """Write one or more empirical measures as CSV rows
    (period_index, atom_index, weight, u_1..u_n, r_1..r_n)."""
    measures = list(measures)
    if not measures:
        raise InputError("no measures to save")
    n = measures[0].n
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = (["period_index", "atom_index", "weight"]
                  + [f"u_{i+1}" for i in range(n)] + [f"r_{i+1}" for i in range(n)])
        writer.writerow(header)
        for p, meas in enumerate(measures):
            if meas.n != n:
                raise InputError("measures have mismatched dimension")
            for k in range(meas.m):
                writer.writerow([p, k, repr(float(meas.weights[k]))]
                                + [repr(float(v)) for v in meas.u[k]]
                                + [repr(float(v)) for v in meas.r[k]])


def load_measures(path) -> list:
    """Read measure CSV back into a list of EmpiricalMeasure by period."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        u_cols = sorted((c for c in reader.fieldnames if c.startswith("u_")),
                        key=lambda c: int(c[2:]))
        r_cols = sorted((c for c in reader.fieldnames if c.startswith("r_")),
                        key=lambda c: int(c[2:]))
        if not u_cols or len(u_cols) != len(r_cols):
            raise DataError(f"{path}: missing or unbalanced u_/r_ columns")
        periods: dict = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                p = int(row["period_index"])
                w = float(row["weight"])
                u = [float(row[c]) for c in u_cols]
                r = [float(row[c]) for c in r_cols]
            except (KeyError, TypeError, ValueError):
                raise DataError(f"{path} line {lineno}: malformed measure row")
            periods.setdefault(p, []).append((w, u, r))
    if not periods:
        raise DataError(f"{path}: no data rows")
    out = []
    for p in sorted(periods):
        rows = periods[p]
        w = np.array([x[0] for x in rows])
        u = np.array([x[1] for x in rows])
        r = np.array([x[2] for x in rows])
        out.append(EmpiricalMeasure(u, r, w))
    return out


# ---- JSON artifacts ------------------------------------------------------


def _json_ready(obj):
    """Recursively convert to JSON-serializable types with lossless floats."""
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_json_ready(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(format(float(obj), ".17g"))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(_json_ready(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def save_generator(g: GenVector, path, beta: float | None = None) -> None:
    dump_json(g.to_dict(beta), path)


def load_generator(path):
    """Returns (GenVector, beta or None)."""
    obj = load_json(path)
    try:
        g = GenVector.from_dict(obj)
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a generator file ({exc})")
    return g, obj.get("beta")
