"""Command-line pipeline: fit, certify, backtest, stability, simulate, report.

Each run reads one declarative TOML config ([problem], [solver], [backtest],
[stability], [certify], [data] sections; flags override file keys), writes its
artifacts plus a MANIFEST.json into the output directory, and exits with 0 on
success, 1 on input errors, 2 on numerical non-convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import __version__
from .data_io import (SyntheticModelSpec, dump_json, load_generator,
                      load_history, load_json, load_measures, save_generator,
                      save_history, simulate_market)
from .errors import FgpError, InputError
from .genfun import Partition
from .market import BacktestConfig, MarketHistory, WeightRule, run_closed, run_open
from .measures import (EmpiricalMeasure, from_market_sequence,
                       stability_constants, wasserstein1_clouds)
from .optimize import (ProblemSpec, RegularizerSpec, SolverOptions,
                       brute_force_oracle, solve)
from .smooth import SmoothingConfig, build_smoother, certify_membership, derivative_gap

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERICAL = 2


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class _Run:
    """Common run context: config, output dir, manifest bookkeeping."""

    def __init__(self, args, command: str):
        self.command = command
        self.args = args
        if args.config is None:
            raise InputError("--config is required")
        self.config_path = Path(args.config)
        if not self.config_path.is_file():
            raise InputError(f"config file not found: {self.config_path}")
        with open(self.config_path, "rb") as fh:
            try:
                self.config = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise InputError(f"{self.config_path}: {exc}")
        self.base = self.config_path.parent
        self.out = Path(args.out) if args.out else Path(f"{command}_run")
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict = {}
        self.outputs: list = []

    def resolve(self, rel) -> Path:
        p = Path(rel)
        p = p if p.is_absolute() else self.base / p
        if not p.is_file():
            raise InputError(f"input file not found: {p}")
        self.inputs[str(p)] = _sha256(p)
        return p

    def emit(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def section(self, name: str, required: bool = True) -> dict:
        sec = self.config.get(name)
        if sec is None:
            if required:
                raise InputError(f"{self.config_path}: missing [{name}] section")
            return {}
        return dict(sec)

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "argv": (getattr(self.args, "argv_override", None)
                     or list(sys.argv[1:])),
            "config": str(self.config_path.resolve()),
            "config_sha256": _sha256(self.config_path),
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "seed": self.args.seed,
            "threads": self.args.threads,
            "versions": {
                "fgp": __version__,
                "python": sys.version.split()[0],
                "numpy": np.__version__,
            },
            "timestamp_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        dump_json(manifest, self.out / "MANIFEST.json")


# ---- shared config builders ------------------------------------------------


def _build_partition(sec: dict) -> Partition:
    kind = sec.get("kind", "clustered")
    if kind == "uniform":
        return Partition.uniform(int(sec.get("d", 33)))
    if kind == "clustered":
        return Partition.clustered(int(sec.get("n_assets", sec.get("n", 100))),
                                   int(sec.get("d", 33)))
    if kind == "explicit":
        return Partition(sec["nodes"])
    raise InputError(f"unknown partition kind {kind!r}")


def _target_rule(name: str, theta: float):
    rule = {"diversity": WeightRule.diversity(theta),
            "equal": WeightRule.equal(),
            "market": WeightRule.market()}.get(name)
    if rule is None:
        raise InputError(f"unknown regularizer target {name!r}")
    return rule.weights


def _build_regularizer(run: _Run, sec: dict) -> RegularizerSpec:
    kind = sec.get("kind", "none")
    if kind == "none":
        return RegularizerSpec.none()
    if kind == "l2_derivative":
        return RegularizerSpec.l2_derivative()
    if kind == "reference_deviation":
        ref, _ = load_generator(run.resolve(sec["reference"]))
        return RegularizerSpec.reference_deviation(ref)
    if kind == "portfolio_distance":
        return RegularizerSpec.portfolio_distance(
            _target_rule(sec.get("target", "diversity"), float(sec.get("theta", 0.5))))
    raise InputError(f"unknown regularizer kind {kind!r}")


def _load_problem_measure(run: _Run, sec: dict) -> EmpiricalMeasure:
    if "measure" in sec:
        measures = load_measures(run.resolve(sec["measure"]))
        period = int(sec.get("measure_period", 0))
        if period >= len(measures):
            raise InputError(f"measure_period {period} out of range")
        return measures[period]
    if "history" in sec:
        history, _ = load_history(run.resolve(sec["history"]))
        market = history.closed_weight_sequence(sec.get("n_top"))
        return from_market_sequence(market)
    raise InputError("[problem] needs either 'measure' or 'history'")


def _build_problem(run: _Run, measure: EmpiricalMeasure | None = None) -> ProblemSpec:
    sec = run.section("problem")
    if measure is None:
        measure = _load_problem_measure(run, sec)
    if "w0" in sec or "w1" in sec:
        from .optimize import eta_from_weights
        eta0, eta1 = eta_from_weights(float(sec.get("w0", 1.0)), float(sec.get("w1", 1.0)))
    else:
        eta0, eta1 = float(sec.get("eta0", 0.0)), float(sec.get("eta1", 1.0))
    return ProblemSpec(
        measure=measure,
        partition=_build_partition(sec.get("partition", {})),
        beta=float(sec["beta"]),
        eta0=eta0,
        eta1=eta1,
        lam=float(sec.get("lambda", 0.0)),
        regularizer=_build_regularizer(run, sec.get("regularizer", {})),
        monotone=bool(sec.get("monotone", False)),
    )


def _build_solver_options(run: _Run) -> SolverOptions:
    sec = run.section("solver", required=False)
    x0 = None
    if "start" in sec:
        x0, _ = load_generator(run.resolve(sec["start"]))
    return SolverOptions(
        tolerance=float(sec.get("tolerance", 1e-8)),
        max_outer=int(sec.get("max_outer", 60)),
        max_inner=int(sec.get("max_inner", 200)),
        barrier_decrease=float(sec.get("barrier_decrease", 10.0)),
        x0=x0,
    )


# ---- commands ----------------------------------------------------------------


def cmd_fit(args) -> int:
    run = _Run(args, "fit")
    spec = _build_problem(run)
    opts = _build_solver_options(run)
    report = solve(spec, opts)
    save_generator(report.solution, run.emit("solution.json"), beta=spec.beta)
    dump_json(report.to_dict(spec.beta), run.emit("solve_report.json"))
    if args.oracle:
        oracle = brute_force_oracle(spec)
        dump_json({
            "oracle_objective": oracle.objective,
            "solver_objective": report.objective,
            "gap": report.objective - oracle.objective,
            "n_feasible": oracle.n_feasible,
            "n_skipped": oracle.n_skipped,
        }, run.emit("oracle.json"))
    run.finish()
    if not report.converged:
        print("fit: solver did not converge "
              f"(kkt residual {report.kkt_residual:.3e})", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"fit: objective {report.objective:.10g}, "
          f"kkt {report.kkt_residual:.3e}, {report.iterations} Newton steps")
    return EXIT_OK


def cmd_certify(args) -> int:
    run = _Run(args, "certify")
    sec = run.section("certify")
    gen, file_beta = load_generator(run.resolve(sec["generator"]))
    beta = float(sec.get("beta", file_beta if file_beta is not None else 0.0))
    if beta <= 0:
        raise InputError("certify needs a positive beta (in config or generator file)")
    cfg = SmoothingConfig(
        alpha=float(sec.get("alpha", 0.9)),
        big_m=float(sec.get("big_m", 1.0)),
        sample_density=int(sec.get("sample_density", 64)),
    )
    cert = build_smoother(gen, cfg)
    membership = certify_membership(cert, beta, cfg)
    gap = derivative_gap(cert, gen, cfg)
    payload = membership.to_dict()
    payload.update({
        "derivative_gap": gap,
        "alpha": cfg.alpha,
        "lift": cert.lift,
        "shift": cert.shift,
        "min_mesh": gen.partition.min_mesh,
    })
    dump_json(payload, run.emit("certification.json"))
    run.finish()
    if not membership.passed:
        print(f"certify: FAILED (second derivative in "
              f"[{membership.second_min:.6g}, {membership.second_max:.3g}] "
              f"vs beta={beta})", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"certify: passed at beta={beta}, derivative gap {gap:.6g}")
    return EXIT_OK


def _rule_from_name(name: str, sec: dict, run: _Run) -> WeightRule:
    if name == "generated":
        gen, _ = load_generator(run.resolve(sec["generator"]))
        return WeightRule.generated(gen)
    if name == "diversity":
        return WeightRule.diversity(float(sec.get("theta", 0.5)))
    if name in ("market", "equal", "index_tracking"):
        return WeightRule(name)
    raise InputError(f"unknown backtest rule {name!r}")


def _tc_label(tc: float) -> str:
    return f"{tc * 10000:.0f}bp"


def cmd_backtest(args) -> int:
    run = _Run(args, "backtest")
    sec = run.section("backtest")
    history, _ = load_history(run.resolve(sec["history"]))
    mode = sec.get("mode", "closed")
    tcs = sec.get("tc", 0.0)
    if not isinstance(tcs, list):
        tcs = [tcs]
    rules = sec.get("rules", ["market"])
    if not isinstance(rules, list):
        rules = [rules]
    base_cfg = BacktestConfig(
        rebalance_every=int(sec.get("rebalance_every", 5)),
        mode=mode,
        n_top=int(sec["n_top"]) if "n_top" in sec else None,
        renewal_every=int(sec.get("renewal_every", 126)),
        diversity_theta=float(sec.get("diversity_theta", 0.5)),
    )
    rolling = "train" in sec and "test" in sec

    closed_market = None
    if mode == "closed":
        closed_market = history.closed_weight_sequence(sec.get("n_top"))

    meta = {}
    for name in rules:
        rule = _rule_from_name(name, sec, run)
        for tc in tcs:
            cfg = replace(base_cfg, tc=float(tc))
            if rolling and name == "generated":
                raise InputError("rolling fits use rule name 'rolling', not "
                                 "'generated' with a fixed generator")
            result = (run_closed(rule, closed_market, cfg) if mode == "closed"
                      else run_open(rule, history, cfg))
            out_name = f"backtest_{name}_tc{_tc_label(float(tc))}.csv"
            result.to_csv(run.emit(out_name))
            meta[out_name] = result.metadata
    if rolling:
        spec_template = _build_problem(
            run, measure=_placeholder_measure(history))
        opts = _build_solver_options(run)
        for tc in tcs:
            cfg = replace(base_cfg, tc=float(tc))
            result, windows = _rolling_backtest(history, run, spec_template, opts,
                                                int(sec["train"]), int(sec["test"]), cfg)
            out_name = f"backtest_rolling_tc{_tc_label(float(tc))}.csv"
            result.to_csv(run.emit(out_name))
            meta[out_name] = {"windows": windows, **result.metadata}
    dump_json(meta, run.emit("backtest_meta.json"))
    run.finish()
    print(f"backtest: wrote {len(meta)} result files to {run.out}")
    return EXIT_OK


def _placeholder_measure(history: MarketHistory) -> EmpiricalMeasure:
    # template only; rolling windows refit on their own training slices
    market = history.closed_weight_sequence()[:3]
    return from_market_sequence(market)


def _slice_history(history: MarketHistory, t0: int, t1: int) -> MarketHistory:
    delist = {(t - t0, j): r for (t, j), r in history.delistings.items()
              if t0 <= t < t1}
    return MarketHistory(history.dates[t0:t1], history.identifiers,
                         history.caps[t0:t1], history.total_returns[t0:t1], delist)


def _rolling_backtest(history, run, spec_template, opts, train, test, cfg):
    """Fit on each training window (closed top-n universe), trade the fitted
    generator over the following test window in the open market, and chain
    the segments multiplicatively."""
    if cfg.mode != "open":
        raise InputError("rolling backtests run in open mode")
    T = history.T
    if train + test + 1 > T:
        raise InputError("history shorter than one train+test window")
    value, rel, turnover, costs, diversity, dates = [], [], [], [], [], []
    level_v = level_r = 1.0
    cost_base = 0.0
    windows = []
    start = 0
    while start + train + 1 < T:
        t_end = min(start + train + test, T)
        fit_slice = _slice_history(history, start, start + train)
        market = fit_slice.closed_weight_sequence(cfg.n_top)
        measure = from_market_sequence(market)
        spec = replace(spec_template, measure=measure)
        fit = solve(spec, opts)
        windows.append({"train_start": history.dates[start],
                        "test_start": history.dates[start + train],
                        "objective": fit.objective,
                        "converged": fit.converged})
        seg = run_open(WeightRule.generated(fit.solution),
                       _slice_history(history, start + train, t_end), cfg)
        skip = 1 if value else 0  # the window's first period repeats the level
        for k in range(skip, len(seg.dates)):
            dates.append(seg.dates[k])
            value.append(level_v * seg.value[k])
            rel.append(level_r * seg.relative_value[k])
            turnover.append(seg.turnover[k])
            costs.append(cost_base + level_v * seg.costs_paid[k])
            diversity.append(seg.diversity[k])
        level_v = value[-1]
        level_r = rel[-1]
        cost_base = costs[-1]
        start += test
    from .market import BacktestResult
    result = BacktestResult(
        dates=tuple(dates),
        value=np.asarray(value),
        relative_value=np.asarray(rel),
        turnover=np.asarray(turnover),
        costs_paid=np.asarray(costs),
        diversity=np.asarray(diversity),
        holdings={},
        metadata={"mode": "open", "tc": cfg.tc, "rule": "rolling-generated",
                  "n_top": cfg.n_top, "train": train, "test": test},
    )
    return result, windows


def _measures_from_history(history: MarketHistory, periods: int, n_top):
    """Split a history into equal disjoint windows; return per-window rank
    measures and name-based atom clouds (survivor universe, as in the
    stability study)."""
    market = history.closed_weight_sequence(n_top)
    T = len(market)
    width = T // periods
    if width < 2:
        raise InputError("history too short for the requested period count")
    rank_measures, name_clouds = [], []
    for k in range(periods):
        seg = market[k * width: (k + 1) * width]
        rank_measures.append(from_market_sequence(seg))
        p = np.stack([w.entries for w in seg[:-1]])
        q = np.stack([w.entries for w in seg[1:]])
        m = p.shape[0]
        name_clouds.append((p, q, np.full(m, 1.0 / m)))
    return rank_measures, name_clouds


def _pairwise_matrix(clouds, max_support, threads):
    k = len(clouds)
    W = np.zeros((k, k))
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]

    def dist(pair):
        i, j = pair
        a, b = clouds[i], clouds[j]
        return i, j, wasserstein1_clouds(a[0], a[1], a[2], b[0], b[1], b[2],
                                         max_support=max_support)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(dist, pairs))
    else:
        results = [dist(p) for p in pairs]
    for i, j, w in results:
        W[i, j] = W[j, i] = w
    return W


def _write_matrix(path, W, label):
    k = W.shape[0]
    with open(path, "w", newline="") as fh:
        fh.write("," + ",".join(f"{label}{i+1}" for i in range(k)) + "\n")
        for i in range(k):
            fh.write(f"{label}{i+1}," + ",".join(repr(float(x)) for x in W[i]) + "\n")


def cmd_stability(args) -> int:
    run = _Run(args, "stability")
    sec = run.section("stability")
    max_support = int(sec.get("max_support", 2000))
    name_clouds = None
    if "measures" in sec:
        rank_measures = load_measures(run.resolve(sec["measures"]))
    elif "history" in sec:
        history, _ = load_history(run.resolve(sec["history"]))
        rank_measures, name_clouds = _measures_from_history(
            history, int(sec.get("periods", 5)), sec.get("n_top"))
    else:
        raise InputError("[stability] needs 'measures' or 'history'")
    if len(rank_measures) < 2:
        raise InputError("stability needs at least 2 period measures")
    n = rank_measures[0].n
    for m in rank_measures:
        if m.n != n:
            raise InputError("period measures have mismatched dimension")

    rank_clouds = [(m.u, m.r, m.weights) for m in rank_measures]
    W_rank = _pairwise_matrix(rank_clouds, max_support, args.threads)
    _write_matrix(run.emit("w_rank.csv"), W_rank, "g")
    summary = {"rank_mean_offdiag": float(W_rank.sum() / (len(rank_measures)**2
                                                          - len(rank_measures)))}
    if name_clouds is not None:
        W_name = _pairwise_matrix(name_clouds, max_support, args.threads)
        _write_matrix(run.emit("w_name.csv"), W_name, "t")
        summary["name_mean_offdiag"] = float(W_name.sum() / (len(name_clouds)**2
                                                             - len(name_clouds)))

    if "problem" in run.config:
        spec = _build_problem(run, measure=rank_measures[0])
        opts = _build_solver_options(run)
        reports = [solve(replace(spec, measure=m), opts) for m in rank_measures]
        consts = stability_constants(spec.beta, n, spec.eta0, spec.eta1,
                                     float(sec.get("k2", 0.0)))
        with open(run.emit("margins.csv"), "w", newline="") as fh:
            fh.write("i,j,w_distance,objective_gap,K,margin\n")
            for i in range(len(rank_measures)):
                for j in range(i + 1, len(rank_measures)):
                    gap = abs(reports[i].objective - reports[j].objective)
                    margin = float(consts.K * W_rank[i, j] + 2 * opts.tolerance - gap)
                    fh.write(f"{i+1},{j+1},{float(W_rank[i, j])!r},{gap!r},"
                             f"{consts.K!r},{margin!r}\n")
        summary["K"] = consts.K
    dump_json(summary, run.emit("stability_summary.json"))
    run.finish()
    print(f"stability: wrote matrices for {len(rank_measures)} periods to {run.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    run = _Run(args, "simulate")
    sec = run.section("data")
    n = int(sec["n"])
    if "drifts" in sec:
        drifts = tuple(float(x) for x in sec["drifts"])
    else:
        spread = float(sec.get("drift_spread", 0.0))
        drifts = tuple(np.linspace(-spread / 2.0, spread / 2.0, n))
    if "vols" in sec:
        vols = tuple(float(x) for x in sec["vols"])
    else:
        vols = (float(sec.get("vol", 0.02)),) * n
    seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
    spec = SyntheticModelSpec(n=n, periods=int(sec["periods"]),
                              rank_drifts=drifts, rank_vols=vols, seed=seed)
    history = simulate_market(spec)
    save_history(history, run.emit(sec.get("out_name", "history.csv")))
    run.finish()
    print(f"simulate: {spec.n} assets x {spec.periods} periods (seed {seed})")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out) if args.out else None
    if out is None or not (out / "MANIFEST.json").is_file():
        raise InputError("report needs --out pointing at a finished run directory")
    manifest = load_json(out / "MANIFEST.json")
    lines = [f"run: {manifest['command']} ({manifest['timestamp_utc']})",
             f"config: {manifest['config']}",
             f"seed: {manifest['seed']}"]
    for name in manifest["outputs"]:
        p = out / name
        if not p.is_file():
            lines.append(f"  {name}: MISSING")
            continue
        if name == "solve_report.json":
            rep = load_json(p)
            lines.append(f"  {name}: objective={rep['objective']:.10g} "
                         f"kkt={rep['kkt_residual']:.3e} converged={rep['converged']}")
        elif name == "certification.json":
            rep = load_json(p)
            lines.append(f"  {name}: passed={rep['passed']} "
                         f"second=[{rep['second_min']:.4g},{rep['second_max']:.3g}] "
                         f"gap={rep['derivative_gap']:.4g}")
        elif name.endswith(".csv") and name.startswith("backtest_"):
            rows = p.read_text().strip().splitlines()
            if len(rows) > 1:
                last = rows[-1].split(",")
                lines.append(f"  {name}: final value={last[1]} relative={last[2]}")
        elif name == "stability_summary.json":
            rep = load_json(p)
            lines.append(f"  {name}: {rep}")
        else:
            lines.append(f"  {name}")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "certify": cmd_certify,
    "backtest": cmd_backtest,
    "stability": cmd_stability,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fgp",
        description="Rank-based functionally generated portfolios: fit, "
                    "certify, backtest, stability, simulate, report.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--out", help="output directory (default <command>_run)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="parallel workers for sweeps/pairwise distances")
    parser.add_argument("--oracle", action="store_true",
                        help="fit: also run the brute-force oracle (tiny grids)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.argv_override = list(argv) if argv is not None else None
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return COMMANDS[args.command](args)
    except (FgpError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
