"""Rank-based functionally generated portfolios: fitting, certification,
stability analysis, and backtesting."""

from .errors import FgpError, InputError, NumericalError
from .simplex import (OrderedWeightVector, RankTransition, WeightVector,
                      aitchison_add, aitchison_sub, equal_weights,
                      hilbert_metric, inverse_rank_transform, rank_transform,
                      rho_metric)
from .genfun import (AnalyticGenerator, FeasibilityReport, GenVector,
                     Partition, deviation_bounds, diversity_contribution,
                     l_divergence, log_blend, neg_quadratic,
                     pathwise_decomposition, portfolio_map, relative_log_return,
                     shifted_log, verify_membership, zero_generator)
from .optimize import (OracleResult, ProblemSpec, RegularizerSpec, SolveReport,
                       SolverOptions, brute_force_oracle, eta_from_weights,
                       objective_value, solution_deviation, solve)
from .smooth import (CertificationReport, CertifiedGenerator, ConsistencyResult,
                     SmoothingConfig, build_smoother, certify_membership,
                     consistency_experiment, derivative_gap)
from .measures import (EmpiricalMeasure, StabilityConstants, StabilityReport,
                       check_stability, from_market_sequence,
                       stability_constants, wasserstein1, wasserstein1_clouds)
from .market import (BacktestConfig, BacktestResult, MarketHistory, WeightRule,
                     apply_transaction_costs, diversity_series, dividend_split,
                     run_closed, run_open)
from .data_io import (CapsCsvSchema, DataError, LoadReport, SyntheticModelSpec,
                      load_generator, load_history, load_measures,
                      save_generator, save_history, save_measures,
                      simulate_market)

__version__ = "0.1.0"
