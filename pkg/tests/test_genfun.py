import math

import numpy as np
import pytest

from fgp.errors import InputError, NumericalError
from fgp.genfun import (GenVector, Partition, deviation_bounds,
                        diversity_contribution, l_divergence, log_blend,
                        neg_quadratic, pathwise_decomposition, portfolio_map,
                        portfolio_weights, relative_log_return, shifted_log,
                        verify_membership, zero_generator)
from fgp.simplex import (OrderedWeightVector, WeightVector, aitchison_add,
                         equal_weights, rank_transform)

from support import (rand_feasible_vector, rand_market, rand_smooth_generator,
                     rand_weights)


def test_partition_validation():
    with pytest.raises(InputError):
        Partition([0.0, 0.3, 1.0])  # no 1/2
    with pytest.raises(InputError):
        Partition([0.0, 0.5, 0.5, 1.0])
    with pytest.raises(InputError):
        Partition([0.1, 0.5, 1.0])
    p = Partition([0.0, 0.25, 0.5, 1.0])
    assert p.d == 4 and p.mesh == 0.5 and p.min_mesh == 0.25
    assert Partition.uniform(9).is_almost_uniform(1.0)
    with pytest.raises(InputError):
        Partition.uniform(8)


def test_partition_clustered_contains_anchors():
    p = Partition.clustered(100, 40)
    for x in (0.0, 0.01, 0.5, 1.0):
        assert np.any(np.abs(p.nodes - x) <= 1e-12)


def test_segment_index_right_derivative_convention():
    p = Partition([0.0, 0.25, 0.5, 1.0])
    assert p.segment_index(0.0) == 0
    assert p.segment_index(0.25) == 1   # right segment at interior nodes
    assert p.segment_index(0.3) == 1
    assert p.segment_index(1.0) == 2    # left segment at the last node


def test_gen_vector_pins_half_to_zero():
    part = Partition([0.0, 0.25, 0.5, 1.0])
    with pytest.raises(InputError):
        GenVector(part, [0.1, 0.0, 0.5, 0.0])
    g = GenVector(part, [0.1, 0.05, 0.0, -0.2])
    assert g(0.5) == 0.0
    assert g.deriv(0.6) == pytest.approx(-0.2 / 0.5)


def test_portfolio_map_zero_is_market():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rand_weights(rng, int(rng.integers(2, 9)))
        pi = portfolio_map(zero_generator(), p)
        assert np.allclose(pi.entries, p.entries, atol=1e-15)


def test_portfolio_map_log_blend():
    p = WeightVector([0.5, 0.3, 0.2])
    pi = portfolio_map(log_blend(0.5), p)
    expected = 0.5 * p.entries + 0.5 / 3.0
    assert np.allclose(pi.entries, expected, atol=1e-12)
    assert np.allclose(pi.entries, [0.416667, 0.316667, 0.266667], atol=1e-6)


def test_portfolio_map_quadratic_closed_form():
    p = WeightVector([0.6, 0.4])
    pi = portfolio_map(neg_quadratic(), p)
    # closed form pi_i = p_i (1 - p_i/n + sum_j p_j^2 / n) at n = 2:
    # (0.6*(1 - 0.3 + 0.26), 0.4*(1 - 0.2 + 0.26)) = (0.576, 0.424)
    assert np.allclose(pi.entries, [0.576, 0.424], atol=1e-12)


def test_portfolio_map_sums_to_one():
    rng = np.random.default_rng(1)
    for beta in (1.0, 100.0):
        g = rand_smooth_generator(rng, beta)
        for _ in range(50):
            p = rand_weights(rng, int(rng.integers(2, 30)))
            pi = portfolio_map(g, p)
            assert abs(pi.entries.sum() - 1.0) <= 1e-12


def test_portfolio_map_weight_ratio_monotone():
    rng = np.random.default_rng(2)
    g = rand_smooth_generator(rng, 10.0)
    for _ in range(50):
        p = rand_weights(rng, 6)
        pi = portfolio_weights(g, p.entries)
        ratio = pi / p.entries
        order = np.argsort(-p.entries, kind="stable")
        assert np.all(np.diff(ratio[order]) >= -1e-12)


def test_portfolio_map_rejects_infeasible_generator():
    # steep quadratic (not exponentially concave) drives a weight negative;
    # the map errors instead of clipping
    from fgp.genfun import AnalyticGenerator
    bad = AnalyticGenerator(eval=lambda x: -150.0 * np.asarray(x, dtype=float) ** 2 + 37.5,
                            deriv=lambda x: -300.0 * np.asarray(x, dtype=float),
                            label="bad")
    with pytest.raises(NumericalError):
        portfolio_map(bad, WeightVector([0.9, 0.1]))


def test_relative_log_return_trivial_cases():
    rng = np.random.default_rng(3)
    g = rand_smooth_generator(rng, 4.0)
    u = OrderedWeightVector([0.5, 0.3, 0.2])
    assert relative_log_return(u, equal_weights(3), g) == pytest.approx(0.0, abs=1e-15)
    r = rand_weights(rng, 3)
    assert relative_log_return(u, r, zero_generator()) == pytest.approx(0.0, abs=1e-15)


def test_relative_log_return_name_rank_consistency():
    rng = np.random.default_rng(4)
    g = rand_smooth_generator(rng, 4.0)
    for _ in range(50):
        n = int(rng.integers(2, 8))
        p, q = rand_weights(rng, n), rand_weights(rng, n)
        t = rank_transform(p, q)
        pi = portfolio_weights(g, p.entries)
        name_based = math.log(float(np.sum(pi * q.entries / p.entries)))
        assert relative_log_return(t.u, t.r, g) == pytest.approx(name_based, abs=1e-12)


def test_l_divergence_properties():
    rng = np.random.default_rng(5)
    g = rand_smooth_generator(rng, 4.0)
    p = rand_weights(rng, 5)
    assert l_divergence(g, p, p) == pytest.approx(0.0, abs=1e-15)
    q = rand_weights(rng, 5)
    assert l_divergence(zero_generator(), q, p) == pytest.approx(0.0, abs=1e-15)
    for _ in range(100):
        p, q = rand_weights(rng, 4), rand_weights(rng, 4)
        assert l_divergence(g, q, p) >= -1e-12


def test_decomposition_identity_of_one_step():
    rng = np.random.default_rng(6)
    g = rand_smooth_generator(rng, 4.0)
    for _ in range(50):
        n = int(rng.integers(2, 8))
        p, q = rand_weights(rng, n), rand_weights(rng, n)
        t = rank_transform(p, q)
        v = aitchison_add(t.u, t.r)
        lhs = relative_log_return(t.u, t.r, g)
        rhs = diversity_contribution(g, v, t.u) + l_divergence(g, v, t.u)
        assert lhs == pytest.approx(rhs, abs=1e-10)


def test_diversity_contribution_lipschitz_bound():
    rng = np.random.default_rng(7)
    beta = 9.0
    g = rand_smooth_generator(rng, beta)
    for _ in range(100):
        n = int(rng.integers(2, 8))
        u = OrderedWeightVector(np.sort(rng.dirichlet(np.full(n, 5.0)))[::-1])
        v = rand_weights(rng, n)
        bound = math.sqrt(beta) / n * np.abs(v.entries - u.entries).sum()
        assert abs(diversity_contribution(g, v, u)) <= bound + 1e-12


def test_pathwise_decomposition_matches_product():
    rng = np.random.default_rng(8)
    market = rand_market(rng, 5, 300, sigma=0.05)
    g = rand_smooth_generator(rng, 25.0)
    log_v, div, vol = pathwise_decomposition(g, market)
    assert log_v[0] == 0.0
    assert np.allclose(log_v, div + vol, atol=1e-14)
    M = np.stack([m.entries for m in market])
    pi = portfolio_weights(g, M[:-1])
    step = np.log(np.sum(pi * M[1:] / M[:-1], axis=1))
    direct = np.concatenate([[0.0], np.cumsum(step)])
    assert np.max(np.abs(log_v - direct)) <= 1e-10
    assert np.all(vol >= -1e-12)  # accumulated divergence is non-decreasing


def test_pathwise_decomposition_constant_market():
    market = [WeightVector([0.5, 0.3, 0.2])] * 10
    rng = np.random.default_rng(9)
    g = rand_smooth_generator(rng, 4.0)
    log_v, div, vol = pathwise_decomposition(g, market)
    assert np.allclose(log_v, 0.0, atol=1e-14)
    assert np.allclose(div, 0.0, atol=1e-14)
    market2 = rand_market(rng, 4, 50)
    log_v2, _, _ = pathwise_decomposition(zero_generator(), market2)
    assert np.allclose(log_v2, 0.0, atol=1e-14)


def test_verify_membership_zero_and_feasible_samples():
    part = Partition.uniform(17)
    for beta in (0.1, 1.0, 100.0):
        rep = verify_membership(GenVector.zero(part), beta)
        assert rep.passed
    rng = np.random.default_rng(10)
    for beta in (0.5, 4.0, 1e4):
        g = rand_feasible_vector(rng, part, beta)
        rep = verify_membership(g, beta, monotone=False)
        assert rep.passed, rep.violations


def test_verify_membership_flags_violations():
    part = Partition([0.0, 0.25, 0.5, 1.0])
    bump = GenVector(part, [0.0, 0.6, 0.0, 0.0])  # convex kink in exp space
    rep = verify_membership(bump, beta=100.0)
    assert not rep.exp_concave_ok
    steep = GenVector(part, [0.8, 0.4, 0.0, -0.4])
    rep2 = verify_membership(steep, beta=1.0)
    assert not rep2.endpoint_ok
    down = GenVector(part, [0.2, 0.1, 0.0, -0.1])
    rep3 = verify_membership(down, beta=10.0, monotone=True)
    assert not rep3.monotone_ok and rep3.monotone_checked


def test_slope_envelope_for_feasible_vectors():
    # slopes of feasible vectors respect +-sqrt(beta) and the hyperbolic
    # envelope 1/x at the left node, -1/(1-x) at the right node
    rng = np.random.default_rng(11)
    part = Partition.clustered(10, 25)
    for beta in (1.0, 25.0):
        for _ in range(10):
            g = rand_feasible_vector(rng, part, beta)
            s = g.slopes
            assert np.all(np.abs(s) <= math.sqrt(beta) + 1e-12)
            x = part.nodes
            left, right = x[:-1], x[1:]
            with np.errstate(divide="ignore"):
                assert np.all(s[left > 0] <= 1.0 / left[left > 0] + 1e-9)
                assert np.all(s[right < 1] >= -1.0 / (1.0 - right[right < 1]) - 1e-9)


def test_deviation_bounds_formula():
    lo, hi = deviation_bounds(1.0, 2)
    assert lo == pytest.approx(math.exp(-1.0) - 1.0, abs=1e-12)
    assert hi == pytest.approx(0.25, abs=1e-15)
    lo_small, hi_small = deviation_bounds(1e-8, 2)
    assert abs(lo_small) < 1e-4 and hi_small < 1e-8


def test_deviation_envelope_monte_carlo():
    # guaranteed range of pi_i/p_i - 1: lower bound e^{-2 sqrt(beta)/n} - 1,
    # upper envelope (beta/n)(sum_j p_j^2 - p_min)
    rng = np.random.default_rng(20)
    for beta, n in ((1.0, 2), (1.0, 10), (100.0, 3), (1e4, 50)):
        lo, _ = deviation_bounds(beta, n)
        for _ in range(25):
            g = rand_smooth_generator(rng, beta)
            P = rng.dirichlet(np.full(n, rng.uniform(0.3, 5.0)), size=40)
            dev = portfolio_weights(g, P) / P - 1.0
            env = beta / n * (np.sum(P**2, axis=1) - P.min(axis=1))
            assert np.all(dev >= lo)
            assert np.all(dev <= env[:, None] + 1e-12)


def test_relative_return_exponential_envelope():
    # exp(L) in [e^{-2 sqrt(beta)/n}, 1 + beta/n * (sum u^2 - u_min)]
    rng = np.random.default_rng(21)
    for beta, n in ((1.0, 2), (4.0, 5), (100.0, 10)):
        lo = math.exp(-2.0 * math.sqrt(beta) / n)
        for _ in range(50):
            g = rand_smooth_generator(rng, beta)
            u = OrderedWeightVector(np.sort(rng.dirichlet(np.full(n, 2.0)))[::-1])
            r = rand_weights(rng, n, conc=1.0)
            w = math.exp(relative_log_return(u, r, g))
            env = beta / n * (float(np.sum(u.entries**2)) - float(u.entries.min()))
            assert lo - 1e-12 <= w <= 1.0 + env + 1e-12


def test_concavity_in_generator():
    rng = np.random.default_rng(12)
    part = Partition.uniform(17)
    for _ in range(50):
        g1 = rand_feasible_vector(rng, part, 4.0)
        g2 = rand_feasible_vector(rng, part, 4.0)
        t = float(rng.uniform(0.1, 0.9))
        mid = GenVector(part, t * g1.values + (1 - t) * g2.values)
        n = int(rng.integers(2, 6))
        u = OrderedWeightVector(np.sort(rng.dirichlet(np.full(n, 5.0)))[::-1])
        r = rand_weights(rng, n)
        lhs = relative_log_return(u, r, mid)
        rhs = (t * relative_log_return(u, r, g1)
               + (1 - t) * relative_log_return(u, r, g2))
        assert lhs >= rhs - 1e-10


def test_shifted_log_family():
    g = shifted_log(0.5)
    assert abs(g(np.asarray(0.5))) <= 1e-15
    p = rand_weights(np.random.default_rng(13), 4)
    pi = portfolio_map(g, p)
    # closed form: pi_i = (1/n) p_i/(a+p_i) + p_i sum_j (1/n) a/(a+p_j)
    a, n = 0.5, 4
    expect = (p.entries / (a + p.entries)) / n + p.entries * np.sum(
        a / (a + p.entries)) / n
    assert np.allclose(pi.entries, expect, atol=1e-12)
