import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from rwre.auxwalk import build_params, gamblers_ruin_bound, log_step_mgf
from rwre.envlaw import Environment, VisitCounts, log_annealed_xi_weight, make_tilt_mixture, zero_disorder
from rwre.errors import ValidationError
from rwre.regen import (
    CENSORED,
    azuma_tail_check,
    bootstrap_counts,
    estimate_c_bar,
    estimate_exp_moment_tau,
    exp_moment,
    h_star_a0,
    lag1_autocorrelation,
    phi_n_moments,
    psi,
    renewal_hitting,
    root_from_terms,
    root_with_derivatives,
    sample_cycle,
    sample_cycles,
    scan_gamma0,
    solve_lambda_bar_a,
    tilted_step_law,
    two_walk_sample,
    two_walk_sigma_rate,
)
from rwre.seeding import seed_stream

ALPHA = np.full(4, 0.25)


def test_cycles_are_regeneration_blocks(ref_params, ref_cycles):
    c = ref_cycles
    assert len(c) == 200000 and c.violations == 0
    assert np.all(c.tau >= 1) and np.all(c.level_gain >= 1)
    assert c.ends[-1] == c.steps.size
    # each block ends at a strict new maximum that the block never undershoots from its start
    vecs = np.array([1, -1, 0, 0])
    for i in range(200):
        lv = np.cumsum(vecs[c.cycle_steps(i)])
        assert lv.min() >= 0 or i == 0
        assert lv[-1] == lv.max() and np.sum(lv == lv[-1]) == 1 or lv[-1] > lv[:-1].max()


def test_lln_velocity(ref_params, ref_cycles):
    v = ref_cycles.displacement.sum(axis=0) / ref_cycles.tau.sum()
    se = np.std(ref_cycles.displacement - np.outer(ref_cycles.tau, v), axis=0) / math.sqrt(len(ref_cycles))
    se /= ref_cycles.tau.mean()
    assert np.all(np.abs(v - ref_params.y) < 4 * se)


def test_cycles_independent(ref_cycles):
    r, se = lag1_autocorrelation(ref_cycles.tau)
    assert abs(r) < 4 * se


def test_sampling_deterministic_and_worker_invariant(ref_params):
    law = make_tilt_mixture(ALPHA, 0.2)
    a = sample_cycles(ref_params, law, 30000, seed=3, unit_size=7000)
    b = sample_cycles(ref_params, law, 30000, seed=3, unit_size=7000)
    np.testing.assert_array_equal(a.steps, b.steps)
    with ProcessPoolExecutor(2) as pool:
        c = sample_cycles(ref_params, law, 30000, seed=3, unit_size=7000, map_fn=pool.map)
    np.testing.assert_array_equal(a.steps, c.steps)
    np.testing.assert_array_equal(a.log_xi, c.log_xi)
    d = sample_cycles(ref_params, law, 30000, seed=4, unit_size=7000)
    assert not np.array_equal(a.tau[:100], d.tau[:100])


def test_annealed_weights_match_visit_counts(ref_params):
    law = make_tilt_mixture(ALPHA, 0.3, 4, 2)
    cyc = sample_cycles(ref_params, law, 300, seed=5)
    for i in range(0, 300, 37):
        vc = VisitCounts.from_steps(cyc.cycle_steps(i), 2)
        assert cyc.log_xi[i] == pytest.approx(log_annealed_xi_weight(law, vc), abs=1e-12)
        assert cyc.cycle(i).tau == cyc.tau[i]
    re = cyc.reweighted(zero_disorder(ALPHA))
    np.testing.assert_array_equal(re.log_xi, 0.0)
    np.testing.assert_allclose(re.reweighted(law).log_xi, cyc.log_xi, atol=0)


def test_reweighting_rejects_other_mean(ref_params, ref_cycles):
    with pytest.raises(ValidationError):
        ref_cycles.reweighted(zero_disorder([0.4, 0.1, 0.25, 0.25]))


def test_quenched_cycle_weights(ref_params):
    law = make_tilt_mixture(ALPHA, 0.3)
    env = Environment(law, 99)
    cyc = sample_cycles(ref_params, env, 50, seed=1, unit_size=50)
    vecs = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]])
    x = np.zeros(2, dtype=int)
    for i in range(50):
        s = 0.0
        for k in cyc.cycle_steps(i):
            s += math.log(env.weights(x)[k] / 0.25)
            x = x + vecs[k]
        assert cyc.log_xi_quenched[i] == pytest.approx(s, abs=1e-12)


def test_split_and_single_cycle(ref_params, ref_cycles):
    a, b = ref_cycles.split(1000)
    assert len(a) == 1000 and len(b) == len(ref_cycles) - 1000
    np.testing.assert_array_equal(b.cycle_steps(0), ref_cycles.cycle_steps(1000))
    one = sample_cycle(ref_params, None, seed_stream(0, 0, 99))
    assert one.tau >= 1 and one.counts.total == one.tau
    with pytest.raises(ValidationError):
        ref_cycles.split(0)


def test_root_zero_disorder_matches_closed_form(ref_params, ref_cycles):
    for theta in ([0.1, 0.0], [-0.15, 0.1], [0.0, 0.2]):
        est = solve_lambda_bar_a(ref_params, None, theta, ref_cycles, n_boot=100)
        closed = log_step_mgf(ref_params, np.array(theta))
        assert abs(est.value - closed) < 4 * est.stderr
        assert psi(ref_params, None, theta, est.value, ref_cycles) == pytest.approx(1.0, abs=1e-12)


def test_root_solver_properties():
    rng = np.random.default_rng(0)
    tau = rng.integers(1, 6, 500).astype(float)
    a = rng.normal(0, 0.3, 500)
    r = root_from_terms(a, tau)
    assert np.mean(np.exp(a - r * tau)) == pytest.approx(1.0, abs=1e-13)
    assert root_from_terms(np.zeros(5), np.ones(5)) == 0.0
    c = np.bincount(rng.integers(0, 500, 500), minlength=500).astype(float)
    rc = root_from_terms(a, tau, c)
    assert np.sum(c * np.exp(a - rc * tau)) / c.sum() == pytest.approx(1.0, abs=1e-13)


def test_exact_derivatives_vs_finite_differences(ref_params):
    law = make_tilt_mixture(ALPHA, 0.2)
    cyc = sample_cycles(ref_params, law, 50000, seed=8)
    theta, h = np.array([0.05, -0.03]), 1e-4
    r = root_with_derivatives(cyc, theta)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        rp, rm = root_with_derivatives(cyc, theta + e), root_with_derivatives(cyc, theta - e)
        assert (rp.value - rm.value) / (2 * h) == pytest.approx(r.gradient[i], abs=1e-7)
        np.testing.assert_allclose((rp.gradient - rm.gradient) / (2 * h), r.hessian[i], atol=1e-6)


def test_gradient_at_zero_is_velocity(ref_params, ref_cycles):
    est = solve_lambda_bar_a(ref_params, None, np.zeros(2), ref_cycles, n_boot=100)
    assert abs(est.value) < 1e-12
    assert np.all(np.abs(est.gradient - ref_params.y) < 4 * est.gradient_stderr)
    assert est.min_eigenvalue > 4 * est.min_eigenvalue_stderr
    np.testing.assert_allclose(est.hessian, est.hessian.T, atol=1e-15)


def test_hessian_at_zero_is_h_star(ref_cycles):
    r = root_with_derivatives(ref_cycles, np.zeros(2))
    tau = ref_cycles.tau.astype(float)
    v = ref_cycles.displacement.sum(axis=0) / tau.sum()
    dev = ref_cycles.displacement - np.outer(tau, v)
    np.testing.assert_allclose(r.hessian, dev.T @ dev / tau.sum(), rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(h_star_a0(ref_cycles), r.hessian, atol=5e-3)


def test_tilted_law_total_mass(ref_params, ref_cycles):
    theta = np.array([0.1, 0.05])
    lam = root_with_derivatives(ref_cycles, theta).value
    tl = tilted_step_law(ref_params, None, theta, lam, ref_cycles)
    assert tl.total_mass == pytest.approx(1.0, abs=1e-10)
    assert tl.weights.sum() == pytest.approx(1.0, abs=1e-10)
    assert tl.level_masses.sum() == pytest.approx(1.0, abs=1e-10)


def test_renewal_hitting_geometric():
    # gain 1 w.p. p, gain 2 w.p. 1-p: h(m) -> 1/(2-p)
    p = 0.3
    h = renewal_hitting(np.array([0.0, p, 1 - p]), 150)
    assert h[0] == 1.0 and h[1] == pytest.approx(p) and h[2] == pytest.approx(p * p + 1 - p)
    assert h[150] == pytest.approx(1 / (2 - p), rel=1e-12)


def test_c_bar_and_azuma(ref_params):
    est = estimate_c_bar(ref_params, 20000, seed=1)
    assert est.p_hat >= gamblers_ruin_bound(ref_params) - 4 * est.stderr
    assert abs(est.p_hat - est.reference) < 4 * est.stderr + 1e-9
    for chk in azuma_tail_check(ref_params, n_walks=100000, seed=2):
        assert chk.passed


def test_exponential_moments(ref_params):
    ests = estimate_exp_moment_tau(ref_params, [0.02, 0.05, 0.1], 20000, seed=4)
    assert [e.gamma for e in ests] == [0.02, 0.05, 0.1]
    assert all(e.mean > 1 for e in ests)
    assert scan_gamma0(ests) >= 0.05
    assert exp_moment(np.array([1, 1, 1]), 0.5).mean == pytest.approx(math.exp(0.5))
    with pytest.raises(ValidationError):
        exp_moment(np.array([1, 2]), -1.0)


def test_bootstrap_counts_deterministic():
    a = bootstrap_counts(50, 3, seed=5)
    b = bootstrap_counts(50, 3, seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert all(x.sum() == 50 for x in a)


def test_phi_routes_agree(ref_params):
    law = make_tilt_mixture(ALPHA, 0.1)
    m = phi_n_moments(ref_params, law, np.array([0.05, 0.0]), [5, 20], 5000, seed=2, fit_cycles=50000)
    z = (m.mean_phi - m.renewal_phi) / np.hypot(m.stderr_phi, m.renewal_stderr)
    assert np.all(np.abs(z) < 4)


def test_phi_at_zero_disorder_hits_renewal_density(ref_params):
    m = phi_n_moments(ref_params, None, np.zeros(2), [30], 4000, seed=6, fit_cycles=40000)
    assert m.lam == 0.0
    assert m.mean_phi[0] <= 1.0


def test_two_walk_bookkeeping(ref_params):
    rng = seed_stream(0, 0, 77)
    st = two_walk_sample(ref_params, None, np.array([0, 0]), 30, rng)
    # the shared start is excluded, so zeta is the level of the lowest later common site
    assert 0 < st.zeta <= 30
    assert st.sigma == CENSORED or st.sigma > st.zeta
    assert st.intersection_count_at(30) >= 1
    assert np.all(np.diff(st.intersection_counts) >= 0)
    far = two_walk_sigma_rate(ref_params, np.array([0, 60]), 40, 50, seed=1)
    assert far.p_hat == 0.0
    with pytest.raises(ValidationError):
        two_walk_sample(ref_params, None, np.array([1, 0]), 10, rng)
    assert CENSORED == float("inf")
