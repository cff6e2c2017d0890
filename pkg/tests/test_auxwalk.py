import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rwre.auxwalk import (
    azuma_tail,
    build_params,
    choose_ell,
    confirmation_bias_bound,
    default_confirm_window,
    f_of_C,
    gamblers_ruin_bound,
    log_step_mgf,
    q_step_sample,
    qu_path_log_prob,
    solve_C,
)
from rwre.envlaw import Direction, direction_vectors
from rwre.errors import ValidationError

import oracles

# frozen from the high-precision oracle (tests/oracles.py: aux_walk_mp)
REF2_Y = (0.3, -0.2)
REF2_ALPHA = (0.1, 0.2, 0.3, 0.4)
REF2_C = 0.7095240525773497645629
REF2_U = (0.34154759474226502, 0.041547594742265024, 0.20845240525773498, 0.40845240525773498)
REF2_THETA = (1.3998972940882798, -0.19249129051385899)
REF2_CNORM = 0.18729445773107357
# log of c_norm^2 u(e1) u(-e1) / alpha(e1) alpha(-e1) = log(0.25^2 * 0.5625 * 0.0625 / 0.25^2)
REF_PATH_LOGPROB = -3.347952867143343
# exp(-600/32) / (1 - exp(-1/32))
BIAS_K600 = 2.338280579020881e-07


def velocity_alpha(seed, d, kappa=0.02):
    rng = np.random.default_rng(seed)
    a = kappa + (1 - 2 * d * kappa) * rng.dirichlet(np.ones(2 * d))
    a /= a.sum()
    v = rng.standard_normal(d)
    y = rng.uniform(0.01, 0.95) * v / np.abs(v).sum()
    return y, a


def test_reference_point(ref_params):
    p = ref_params
    assert p.C == pytest.approx(0.5625, abs=1e-12)
    np.testing.assert_allclose(p.u, [0.5625, 0.0625, 0.1875, 0.1875], atol=1e-12, rtol=0)
    np.testing.assert_allclose(p.theta_tilt, [math.log(3), 0.0], atol=1e-12, rtol=0)
    assert p.c_norm == pytest.approx(0.25, abs=1e-12)
    assert p.ell == Direction(1, 1)


def test_second_reference_point_matches_oracle():
    p = build_params(REF2_Y, REF2_ALPHA)
    assert p.C == pytest.approx(REF2_C, abs=1e-13)
    np.testing.assert_allclose(p.u, REF2_U, atol=1e-13, rtol=0)
    np.testing.assert_allclose(p.theta_tilt, REF2_THETA, atol=1e-12, rtol=0)
    assert p.c_norm == pytest.approx(REF2_CNORM, abs=1e-13)
    assert p.ell == Direction(1, 1)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**7), d=st.integers(1, 4))
def test_construction_properties(seed, d):
    y, a = velocity_alpha(seed, d)
    p = build_params(y, a)
    assert abs(p.u.sum() - 1) < 1e-12
    np.testing.assert_allclose(direction_vectors(d).T @ p.u, y, atol=1e-12, rtol=0)
    np.testing.assert_allclose(p.u[0::2] * p.u[1::2], p.C * a[0::2] * a[1::2], atol=1e-10, rtol=0)
    assert abs(f_of_C(y, a, p.C) - 1) < 1e-12
    np.testing.assert_allclose(p.u, math.sqrt(p.C) * a * np.exp(direction_vectors(d) @ p.theta_tilt),
                               rtol=1e-12, atol=1e-15)


def test_matches_mp_oracle_random():
    for seed in range(5):
        y, a = velocity_alpha(seed, 3)
        C, u, theta, cn = oracles.aux_walk_mp(y, a)
        p = build_params(y, a)
        assert p.C == pytest.approx(C, rel=1e-13)
        np.testing.assert_allclose(p.u, u, rtol=1e-12)
        assert p.c_norm == pytest.approx(cn, rel=1e-12)


def test_zero_velocity_root():
    a = np.array([0.1, 0.2, 0.3, 0.4])
    C = solve_C((0.0, 0.0), a)
    expected = 1.0 / (2 * (math.sqrt(0.02) + math.sqrt(0.12))) ** 2
    assert C == pytest.approx(expected, rel=1e-14)
    with pytest.raises(ValidationError):
        build_params((0.0, 0.0), a)


def test_rejects_bad_inputs():
    with pytest.raises(ValidationError):
        build_params((0.7, 0.4), np.full(4, 0.25))
    with pytest.raises(ValidationError):
        build_params((0.5, 0.0), [0.5, 0.5, 0.1, 0.1])
    with pytest.raises(ValidationError):
        build_params((0.5, 0.0), np.full(6, 1 / 6))


def test_choose_ell_ties():
    assert choose_ell((0.2, -0.2)) == Direction(1, 1)
    assert choose_ell((-0.1, -0.3)) == Direction(2, -1)


def test_reference_path_probability(ref_params):
    direct, closed = qu_path_log_prob(ref_params, [0, 1])
    assert direct == pytest.approx(REF_PATH_LOGPROB, abs=1e-12)
    assert closed == pytest.approx(REF_PATH_LOGPROB, abs=1e-12)
    pos = np.array([[0, 0], [1, 0], [0, 0]])
    assert qu_path_log_prob(ref_params, pos)[0] == pytest.approx(direct, abs=1e-15)


def test_path_probability_rejects_origin_shift(ref_params):
    with pytest.raises(ValidationError):
        qu_path_log_prob(ref_params, np.array([[1, 0], [2, 0]]))
    with pytest.raises(ValidationError):
        qu_path_log_prob(ref_params, np.array([[0, 0], [2, 0]]))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 10**7), n=st.integers(0, 12))
def test_path_probability_identity(seed, n):
    y, a = velocity_alpha(seed, 2)
    p = build_params(y, a)
    path = np.random.default_rng(seed).integers(0, 4, n)
    direct, closed = qu_path_log_prob(p, path)
    assert abs(direct - closed) <= 1e-10 * max(1.0, abs(direct))


def test_step_sampling_law(ref_params):
    rng = np.random.default_rng(0)
    draws = q_step_sample(ref_params, rng, 200000)
    freq = np.bincount(draws, minlength=4) / draws.size
    se = np.sqrt(ref_params.u * (1 - ref_params.u) / draws.size)
    assert np.all(np.abs(freq - ref_params.u) < 4 * se)
    assert isinstance(q_step_sample(ref_params, rng), int)


def test_step_mgf(ref_params):
    assert log_step_mgf(ref_params, np.zeros(2)) == pytest.approx(0.0, abs=1e-15)
    t = np.array([0.1, -0.2])
    expected = math.log(0.5625 * math.exp(0.1) + 0.0625 * math.exp(-0.1) + 0.1875 * (math.exp(-0.2) + math.exp(0.2)))
    assert log_step_mgf(ref_params, t) == pytest.approx(expected, rel=1e-14)


def test_renewal_bounds(ref_params):
    assert gamblers_ruin_bound(ref_params) == pytest.approx(0.5527864045000421, abs=1e-12)
    assert azuma_tail(ref_params, 8) == pytest.approx(math.exp(-0.25), rel=1e-14)
    assert confirmation_bias_bound(ref_params, 600) == pytest.approx(BIAS_K600, rel=1e-10)
    K = default_confirm_window(ref_params)
    assert K == 775
    assert confirmation_bias_bound(ref_params, K) < 1e-9 <= confirmation_bias_bound(ref_params, K - 1)


def test_record_format(ref_params):
    rec = ref_params.to_record()
    assert rec.splitlines()[2] == "C = 0.5625"
    assert "ell = +e1" in rec
