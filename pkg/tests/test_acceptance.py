"""Acceptance criteria 1-14.  Each test prints one PASS/FAIL line at the stated tolerance."""

import math
import os
import time

import numpy as np
import pytest

from rwre.auxwalk import (
    azuma_tail,
    build_params,
    f_of_C,
    gamblers_ruin_bound,
    log_step_mgf,
    qu_path_log_prob,
)
from rwre.envlaw import Environment, direction_vectors, make_tilt_mixture, zero_disorder
from rwre.harness.cli import main
from rwre.harness.persist import read_body
from rwre.ldp import (
    AnnealedLogMGF,
    QuenchedLogMGF,
    circle_grid,
    max_gap_by_epsilon,
    rate_gap_grid,
)
from rwre.pathexact import verify_identity_P3
from rwre.regen import (
    azuma_tail_check,
    estimate_c_bar,
    estimate_exp_moment_tau,
    phi_n_moments,
    psi,
    root_with_derivatives,
    sample_cycles,
    sample_first_renewal_times,
    scan_gamma0,
    solve_lambda_bar_a,
    tilted_step_law,
)

Y = np.array([0.5, 0.0])
ALPHA = np.full(4, 0.25)
C_BAR = 0.552786  # 1 - q/p for the projected walk at <y,ell> = 1/2
I_Y = 0.261624    # log(0.75) + 0.5 log 3


@pytest.fixture
def report(capsys):
    def _report(number, passed, text):
        with capsys.disabled():
            print(f"\ncriterion {number:2d} [{'PASS' if passed else 'FAIL'}] {text}")
        assert passed, text
    return _report


def random_y_alpha(rng, d, kappa=0.02):
    alpha = kappa + (1 - 2 * d * kappa) * rng.dirichlet(np.ones(2 * d))
    alpha /= alpha.sum()
    v = rng.standard_normal(d)
    y = rng.uniform(0.01, 0.95) * v / np.abs(v).sum()
    return y, alpha


def test_criterion_01_construction_exactness(report):
    rng = np.random.default_rng(2024)
    cases = [random_y_alpha(rng, d) for d in rng.choice([2, 3, 4], 200)]
    t0 = time.perf_counter()
    worst = np.zeros(4)
    for y, alpha in cases:
        p = build_params(y, alpha)
        d = y.size
        worst = np.maximum(worst, [
            abs(p.u.sum() - 1),
            np.abs(direction_vectors(d).T @ p.u - y).max(),
            np.abs(p.u[0::2] * p.u[1::2] - p.C * alpha[0::2] * alpha[1::2]).max(),
            abs(f_of_C(y, alpha, p.C) - 1),
        ])
    elapsed = time.perf_counter() - t0
    ok = worst[0] <= 1e-12 and worst[1] <= 1e-12 and worst[2] <= 1e-10 and worst[3] <= 1e-12 and elapsed < 1
    report(1, ok, f"construction exactness on 200 points: max errors sum={worst[0]:.1e} drift={worst[1]:.1e} "
                  f"product={worst[2]:.1e} f(C)={worst[3]:.1e}; {elapsed:.3f} s")


def test_criterion_02_reference_point(report):
    build_params(Y, ALPHA)
    t0 = time.perf_counter()
    p = build_params(Y, ALPHA)
    elapsed = time.perf_counter() - t0
    err = max(abs(p.C - 0.5625), np.abs(p.u - [0.5625, 0.0625, 0.1875, 0.1875]).max(),
              np.abs(p.theta_tilt - [math.log(3), 0]).max(), abs(p.c_norm - 0.25))
    report(2, err <= 1e-12 and elapsed < 1e-3,
           f"reference point C={p.C:.12g} c_norm={p.c_norm:.12g}, max error {err:.1e}; {elapsed * 1e3:.3f} ms")


def test_criterion_03_change_of_measure_identity(report):
    rng = np.random.default_rng(33)
    t0 = time.perf_counter()
    worst, n_fail = 0.0, 0
    for trial in range(50):
        y, alpha = random_y_alpha(rng, 2)
        params = build_params(y, alpha)
        law = make_tilt_mixture(alpha, rng.uniform(0, 0.9), int(rng.choice([2, 4])), int(rng.integers(1000)))
        env = Environment(law, int(rng.integers(2**62)))
        theta = -params.theta_tilt if trial < 2 else rng.uniform(-0.6, 0.6, 2)
        rep = verify_identity_P3(params, env, law, theta, int(rng.integers(1, 7)) if trial else 6)
        worst = max(worst, rep.max_rel_err)
        n_fail += not rep.passed
    elapsed = time.perf_counter() - t0
    report(3, n_fail == 0 and worst < 1e-9 and elapsed < 30,
           f"identity on 50 tuples (incl. theta=-theta_tilt): max rel err {worst:.1e}; {elapsed:.1f} s")


def test_criterion_04_path_probability_identity(report):
    rng = np.random.default_rng(44)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        y, alpha = random_y_alpha(rng, int(rng.integers(2, 5)))
        p = build_params(y, alpha)
        path = rng.integers(0, 2 * y.size, int(rng.integers(0, 13)))
        direct, closed = qu_path_log_prob(p, path)
        worst = max(worst, abs(direct - closed))
    elapsed = time.perf_counter() - t0
    report(4, worst <= 1e-10 and elapsed < 1, f"path probability on 1000 paths: max |diff| {worst:.1e}; {elapsed:.2f} s")


def test_criterion_05_gamblers_ruin(report):
    params = build_params(Y, ALPHA)
    t0 = time.perf_counter()
    est = estimate_c_bar(params, 100000, seed=5)
    elapsed = time.perf_counter() - t0
    bound = gamblers_ruin_bound(params)
    ok = abs(bound - C_BAR) < 1e-6 and est.p_hat >= C_BAR - 4 * est.stderr and elapsed < 60
    report(5, ok, f"P(no backtrack) = {est.p_hat:.4f} +- {est.stderr:.4f} >= {bound:.6f}; {elapsed:.1f} s")


def test_criterion_06_azuma_tail(report):
    params = build_params(Y, ALPHA)
    t0 = time.perf_counter()
    checks = azuma_tail_check(params, (5, 10, 20), 10**6, seed=6)
    elapsed = time.perf_counter() - t0
    text = ", ".join(f"k={c.k}: {c.p_hat:.2e} <= {c.bound:.3f}" for c in checks)
    report(6, all(c.passed for c in checks) and elapsed < 60, f"Azuma tail {text}; {elapsed:.1f} s")


def test_criterion_07_exponential_moments(report):
    params = build_params(Y, ALPHA)
    t0 = time.perf_counter()
    taus = sample_first_renewal_times(params, 100000, seed=7)
    ests = estimate_exp_moment_tau(params, np.linspace(0.01, 0.4, 40), taus=taus)
    gamma0 = scan_gamma0(ests)
    below = [e for e in ests if e.gamma <= gamma0]
    elapsed = time.perf_counter() - t0
    ok = gamma0 > 0 and all(e.mean < 2 for e in below) and elapsed < 120
    report(7, ok, f"gamma0_hat = {gamma0:.2f} (E exp(gamma0 tau) = {below[-1].mean:.3f}); {elapsed:.1f} s")


@pytest.fixture(scope="module")
def zero_cycles():
    params = build_params(Y, ALPHA)
    return sample_cycles(params, zero_disorder(ALPHA), 200000, seed=8)


def test_criterion_08_root_characterization(report, zero_cycles):
    params = zero_cycles.params
    t0 = time.perf_counter()
    rng = np.random.default_rng(88)
    worst_z, worst_psi, worst_mass = 0.0, 0.0, 0.0
    for _ in range(10):
        v = rng.standard_normal(2)
        theta = v / np.linalg.norm(v) * rng.uniform(0.02, 0.2)
        est = solve_lambda_bar_a(params, None, theta, zero_cycles, n_boot=200, seed=1)
        worst_z = max(worst_z, abs(est.value - log_step_mgf(params, theta)) / est.stderr)
        worst_psi = max(worst_psi, abs(psi(params, None, theta, est.value, zero_cycles) - 1))
        tl = tilted_step_law(params, None, theta, est.value, zero_cycles)
        worst_mass = max(worst_mass, abs(tl.total_mass - 1) / max(tl.total_mass_stderr, 1e-300))
    elapsed = time.perf_counter() - t0
    ok = worst_z < 4 and worst_psi < 1e-10 and worst_mass < 4 and elapsed < 120
    report(8, ok, f"root vs closed form at 10 theta: max |z| {worst_z:.2f}; |Psi-1| {worst_psi:.1e}; "
                  f"mass within {worst_mass:.1e} sigma; {elapsed:.1f} s")


def test_criterion_09_gradient_identities(report, zero_cycles):
    params = zero_cycles.params
    t0 = time.perf_counter()
    est0 = solve_lambda_bar_a(params, None, np.zeros(2), zero_cycles, n_boot=200, seed=2)
    z_grad0 = np.max(np.abs(est0.gradient - Y) / est0.gradient_stderr)
    law = make_tilt_mixture(ALPHA, 0.1)
    cycles = zero_cycles.reweighted(law)
    h = 1e-3
    worst_g, worst_h = 0.0, 0.0
    for theta in (np.zeros(2), np.array([0.1, -0.05])):
        est = solve_lambda_bar_a(params, None, theta, cycles, n_boot=200, seed=3)
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            rp, rm = root_with_derivatives(cycles, theta + e), root_with_derivatives(cycles, theta - e)
            fd_g = (rp.value - rm.value) / (2 * h)
            fd_h = (rp.gradient - rm.gradient) / (2 * h)
            worst_g = max(worst_g, abs(fd_g - est.gradient[i]) / est.gradient_stderr[i])
            worst_h = max(worst_h, np.max(np.abs(fd_h - est.hessian[i]) / est.hessian_stderr[i]))
    eig_z = est0.min_eigenvalue / est0.min_eigenvalue_stderr
    elapsed = time.perf_counter() - t0
    ok = z_grad0 < 4 and worst_g < 4 and worst_h < 4 and eig_z > 4 and elapsed < 300
    report(9, ok, f"grad(0) = ({est0.gradient[0]:.4f}, {est0.gradient[1]:.4f}) within {z_grad0:.2f} sigma of y; "
                  f"FD gradient {worst_g:.1e} sigma, FD Hessian {worst_h:.1e} sigma; min eig {est0.min_eigenvalue:.3f} "
                  f"({eig_z:.0f} sigma); {elapsed:.1f} s")


def test_criterion_10_jensen_and_lipschitz(report, zero_cycles):
    t0 = time.perf_counter()
    law = make_tilt_mixture(ALPHA, 0.1)
    annealed = AnnealedLogMGF(y=tuple(Y), n_boot=200, seed=10).fit(law, cycles=zero_cycles)
    quenched = QuenchedLogMGF(y=tuple(Y), n=300, n_envs=5, seed=10).fit(law)
    rng = np.random.default_rng(1010)
    worst_jensen = -np.inf
    for _ in range(10):
        theta = rng.uniform(-0.3, 0.3, 2)
        a = annealed.log_mgf(theta)
        q = quenched.log_mgf(theta)
        worst_jensen = max(worst_jensen, (q.value - a.value) / math.hypot(a.stderr, q.stderr))
    worst_lip = -np.inf
    for _ in range(20):
        t1, t2 = rng.uniform(-0.5, 0.5, 2), rng.uniform(-0.5, 0.5, 2)
        a1, a2 = annealed.log_mgf(t1), annealed.log_mgf(t2)
        slack = abs(a1.value - a2.value) - np.abs(t1 - t2).max()
        worst_lip = max(worst_lip, slack / math.hypot(a1.stderr, a2.stderr))
    elapsed = time.perf_counter() - t0
    ok = worst_jensen <= 4 and worst_lip <= 4 and elapsed < 600
    report(10, ok, f"Jensen max (q-a)/sigma = {worst_jensen:.2f}; Lipschitz max excess/sigma = {worst_lip:.1f}; "
                   f"{elapsed:.1f} s")


def _slope_ci(n, values, stderr):
    X = np.column_stack([np.ones(n.size), n.astype(float)])
    W = 1.0 / stderr**2
    cov = np.linalg.inv(X.T @ (X * W[:, None]))
    beta = cov @ X.T @ (W * values)
    half = 1.96 * math.sqrt(cov[1, 1])
    return beta[1] - half, beta[1] + half


def test_criterion_11_phi_dual_route(report):
    t0 = time.perf_counter()
    params = build_params(Y, ALPHA)
    worst_z, worst_mean = 0.0, 0.0
    for law in (zero_disorder(ALPHA), make_tilt_mixture(ALPHA, 0.05)):
        m = phi_n_moments(params, law, np.zeros(2), [10, 25, 50], 20000, seed=11, fit_cycles=200000)
        worst_z = max(worst_z, np.max(np.abs(m.mean_phi - m.renewal_phi) / np.hypot(m.stderr_phi, m.renewal_stderr)))
        worst_mean = max(worst_mean, np.max(m.mean_phi - 4 * m.stderr_phi))
    # second moment: d = 4, where the transverse difference of two walks is transient
    a4 = np.full(8, 1 / 8)
    p4 = build_params((0.5, 0, 0, 0), a4)
    ns = np.arange(10, 201, 10)
    sq = phi_n_moments(p4, make_tilt_mixture(a4, 0.05), np.zeros(4), ns, 2000, seed=12, fit_cycles=100000,
                       second_moment=True, n_pairs=2000)
    lo, hi = _slope_ci(ns, sq.mean_phi_sq, sq.stderr_phi_sq)
    elapsed = time.perf_counter() - t0
    ok = worst_z < 4 and worst_mean <= 1 and lo <= 0 and elapsed < 600
    report(11, ok, f"Phi_n routes agree within {worst_z:.2f} sigma at n=10,25,50; E Phi_n <= 1; "
                   f"E Phi_n^2 slope 95% CI [{lo:.1e}, {hi:.1e}] (d=4, n=10..200); {elapsed:.1f} s")


def test_criterion_12_rate_reconstruction(report, zero_cycles):
    t0 = time.perf_counter()
    law = zero_disorder(ALPHA)
    I_a, se_a, _ = AnnealedLogMGF(y=tuple(Y), n_boot=200, seed=12).fit(law, cycles=zero_cycles).rate_point(Y)
    I_q, se_q, _ = QuenchedLogMGF(y=tuple(Y), n=300, n_envs=5, seed=12).fit(law).rate_point(Y)
    elapsed = time.perf_counter() - t0
    ok = abs(I_a - I_Y) <= max(4 * se_a, 1e-3) and abs(I_q - I_Y) <= max(4 * se_q, 1e-3) and elapsed < 300
    report(12, ok, f"I(y): annealed {I_a:.6f} +- {se_a:.1e}, quenched {I_q:.6f}, Cramér {I_Y}; {elapsed:.1f} s")


def test_criterion_13_rate_gap_trend(report):
    t0 = time.perf_counter()
    epsilons = [0.3, 0.15, 0.05, 0.0]
    records = rate_gap_grid(tuple(Y), ALPHA, epsilons, circle_grid(Y, 0.05, 8),
                            AnnealedLogMGF(y=tuple(Y), n_cycles=200000, n_boot=200, seed=13),
                            QuenchedLogMGF(y=tuple(Y), n=300, n_envs=5, seed=13))
    elapsed = time.perf_counter() - t0
    ok_status = all(r.status == "ok" for r in records) and len(records) == 36
    jensen = min(r.gap / r.gap_stderr for r in records if r.status == "ok")
    zero_row = max(abs(r.gap) / r.gap_stderr for r in records if r.epsilon == 0.0)
    best = max_gap_by_epsilon(records)
    monotone = all(best[b][0] <= best[a][0] + 4 * math.hypot(best[a][1], best[b][1])
                   for a, b in zip(epsilons[:-1], epsilons[1:]))
    summary = ", ".join(f"eps={e}: {best[e][0]:.1e}+-{best[e][1]:.0e}" for e in epsilons)
    ok = ok_status and jensen >= -4 and zero_row <= 4 and monotone and elapsed < 3600
    report(13, ok, f"rate gap (d=2 mechanism evidence, not the d>=4 theorem): min gap/sigma {jensen:.2f}, "
                   f"eps=0 max |gap|/sigma {zero_row:.2f}, max gap {summary}; {elapsed:.0f} s")


SMALL_RUNS = [
    ["construct"],
    ["verify-identity", "--trials", "10"],
    ["mgf", "--samples", "20000", "--n-list", "20,40", "--n", "40"],
    ["regen", "--samples", "20000", "--gamma-scan", "0.05,0.1"],
    ["rate", "--samples", "20000", "--bootstrap", "20", "--n", "40", "--envs", "2"],
    ["sweep", "--samples", "20000", "--bootstrap", "20", "--n", "40", "--envs", "2", "--count", "2",
     "--epsilons", "0.1,0"],
]


def test_criterion_14_determinism(report, tmp_path, monkeypatch):
    cfg = os.path.join(os.path.dirname(__file__), "golden", "reference.cfg")
    mismatched = []
    for argv in SMALL_RUNS:
        bodies = []
        for run in range(2):
            out = tmp_path / f"{argv[0]}-{run}"
            monkeypatch.setenv("RWRE_OUTPUT_DIR", str(out))
            code = main(argv[:1] + ["--config", cfg] + argv[1:])
            bodies.append((code, {p: read_body(out / p) for p in sorted(os.listdir(out))}))
        if bodies[0] != bodies[1] or bodies[0][0] != 0:
            mismatched.append(argv[0])
    report(14, not mismatched, f"byte-identical CSV bodies on rerun for {len(SMALL_RUNS)} subcommands"
                               + (f"; mismatched: {mismatched}" if mismatched else ""))
