"""Log-MGF estimators, tilt matching and Legendre reconstruction of rate functions.

Annealed quantities come from regeneration cycles: the log-MGF is the root
of the empirical cycle equation and its gradient and Hessian are exact
derivatives of that root.  Quenched quantities come from the forward lattice
DP in a handful of sampled environments, each giving a finite-horizon window
estimate ``(log Z_n - log Z_m) / (n - m)``; the median over environments is
reported.

Both estimators follow the scikit-learn estimator conventions: constructor
arguments are hyperparameters, ``fit(law)`` does the sampling, and
``predict(X)`` returns rate-function values at the rows of ``X``.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .auxwalk import build_params, log_step_mgf
from .envlaw import Environment, make_tilt_mixture, zero_disorder
from .errors import ConvergenceError, ValidationError
from .pathexact import DEFAULT_MEMORY_CAP, forward_tilted_dp, lambda_q_estimate_dp, perturbed_q_log_dp
from .regen import (
    DEFAULT_BOOTSTRAP,
    bootstrap_counts,
    root_with_derivatives,
    sample_cycles,
    solve_lambda_bar_a,
)
from .seeding import STREAM_ENV, derive_seed
from ._validation import check_vector

ROOT_PSI = "root-psi"
DP_INCREMENT = "dp-increment"
EXACT_SMALL_N = "exact-small-n"

MEDIAN_SE_FACTOR = math.sqrt(math.pi / 2.0)


@dataclass
class MgfEstimate:
    theta: np.ndarray
    value: float
    stderr: float
    method: str
    n_or_cycles: int
    seed: int
    spread: float = 0.0


@dataclass
class TiltSolution:
    """Result of matching the log-MGF gradient to a target point ``x``."""

    x: np.ndarray
    theta_x: np.ndarray
    lambda_at: float
    gradient_residual: float
    hessian: np.ndarray
    min_eigenvalue: float
    iterations: int
    converged: bool


@dataclass
class RateGapRecord:
    epsilon: float
    x: np.ndarray
    I_q_hat: float
    I_q_err: float
    I_a_hat: float
    I_a_err: float
    theta_q: np.ndarray
    theta_a: np.ndarray
    seeds: str
    status: str = "ok"
    gap: float = field(init=False)
    gap_stderr: float = field(init=False)

    def __post_init__(self):
        self.gap = self.I_q_hat - self.I_a_hat
        self.gap_stderr = math.sqrt(self.I_q_err**2 + self.I_a_err**2)

    @property
    def jensen_ok(self):
        return self.gap + 4 * self.gap_stderr >= 0


def check_rate_point(x, d):
    x = check_vector(x, d, "x")
    if np.abs(x).sum() >= 1.0:
        raise ValidationError(f"rate point must satisfy |x|_1 < 1, got {np.abs(x).sum():.6g}")
    return x


def newton_tilt(objective, x, theta0, tol=1e-3, max_iter=50, max_halvings=30):
    """Damped Newton iteration for ``grad(theta) = x``.

    ``objective(theta)`` returns ``(value, gradient, hessian)``.  A step is
    halved until the l1 residual decreases.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    value, grad, hess = objective(theta)
    resid = float(np.abs(grad - x).sum())
    it = 0
    while resid >= tol and it < max_iter:
        it += 1
        try:
            step = np.linalg.solve(hess, x - grad)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("singular Hessian in tilt matching", residual=resid) from exc
        t = 1.0
        for _ in range(max_halvings):
            cand = theta + t * step
            v2, g2, h2 = objective(cand)
            r2 = float(np.abs(g2 - x).sum())
            if r2 < resid:
                break
            t *= 0.5
        else:
            break
        theta, value, grad, hess, resid = cand, v2, g2, h2, r2
    eig = float(np.linalg.eigvalsh(0.5 * (hess + hess.T))[0])
    return TiltSolution(np.asarray(x, dtype=float), theta, float(value), resid, hess, eig, it, resid < tol)


def legendre_rate(params, solution):
    """``<theta_x, x> - value + log sqrt(C) + <theta_tilt, x>``."""
    x = solution.x
    return float(solution.theta_x @ x - solution.lambda_at + params.log_sqrt_C + params.theta_tilt @ x)


# -- annealed ------------------------------------------------------------------

class AnnealedLogMGF(BaseEstimator):
    """Annealed perturbed log-MGF from regeneration cycles.

    Parameters
    ----------
    y : array-like
        Target velocity of the auxiliary walk.
    n_cycles : int
        Number of regeneration cycles to sample in ``fit``.
    seed : int
        Master seed for the cycle streams and the bootstrap.
    confirm_window : int or None
        Levels a candidate must be cleared by; ``None`` picks the smallest
        window with confirmation bias below ``1e-9``.
    n_boot : int
        Bootstrap replicates for standard errors.
    tol, max_iter : float, int
        Newton tolerance on the l1 gradient residual and iteration cap.
    """

    def __init__(self, y=(0.5, 0.0), n_cycles=200000, seed=0, confirm_window=None,
                 n_boot=DEFAULT_BOOTSTRAP, tol=1e-3, max_iter=50, unit_size=20000):
        self.y = y
        self.n_cycles = n_cycles
        self.seed = seed
        self.confirm_window = confirm_window
        self.n_boot = n_boot
        self.tol = tol
        self.max_iter = max_iter
        self.unit_size = unit_size

    def fit(self, law, cycles=None, map_fn=map):
        """Sample cycles for ``law`` (or reweight a supplied cycle set)."""
        self.law_ = law
        self.params_ = build_params(self.y, law.alpha)
        if cycles is None:
            cycles = sample_cycles(self.params_, law, self.n_cycles, self.seed, self.confirm_window,
                                   self.unit_size, map_fn=map_fn)
        elif cycles.law != law:
            cycles = cycles.reweighted(law)
        self.cycles_ = cycles
        self._boot = None
        return self

    def _bootstrap(self):
        if self._boot is None:
            self._boot = bootstrap_counts(len(self.cycles_), self.n_boot, self.seed) if self.n_boot else []
        return self._boot

    def derivatives(self, theta, r0=None):
        check_is_fitted(self, "cycles_")
        return root_with_derivatives(self.cycles_, check_vector(theta, self.params_.d, "theta"), r0=r0)

    def estimate(self, theta):
        """Root, gradient and Hessian at ``theta`` with bootstrap standard errors."""
        check_is_fitted(self, "cycles_")
        return solve_lambda_bar_a(self.params_, None, theta, self.cycles_, boot=self._bootstrap())

    def log_mgf(self, theta):
        est = self.estimate(theta)
        return MgfEstimate(est.theta, est.value, est.stderr, ROOT_PSI, len(self.cycles_), self.seed)

    def value_stderr(self, theta, value=None):
        """Bootstrap standard error of the root alone (cheaper than :meth:`estimate`)."""
        check_is_fitted(self, "cycles_")
        theta = check_vector(theta, self.params_.d, "theta")
        if value is None:
            value = self.derivatives(theta).value
        from .regen import cycle_exponents, root_from_terms
        a = cycle_exponents(self.cycles_, theta)
        vals = [root_from_terms(a, self.cycles_.tau, c, value) for c in self._bootstrap()]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else float("inf")

    def gradient(self, theta):
        est = self.estimate(theta)
        return est.gradient, est.gradient_stderr

    def hessian(self, theta):
        est = self.estimate(theta)
        return est.hessian, est.min_eigenvalue, est.min_eigenvalue_stderr

    def _objective(self, theta):
        r = self.derivatives(theta)
        return r.value, r.gradient, r.hessian

    def solve_tilt(self, x, theta0=None, tol=None):
        check_is_fitted(self, "cycles_")
        x = check_rate_point(x, self.params_.d)
        theta0 = np.zeros(self.params_.d) if theta0 is None else theta0
        sol = newton_tilt(self._objective, x, theta0, self.tol if tol is None else tol, self.max_iter)
        if not sol.converged:
            raise ConvergenceError(
                f"annealed tilt matching stopped at residual {sol.gradient_residual:.3g}",
                residual=sol.gradient_residual,
            )
        return sol

    def rate_point(self, x, theta0=None):
        """``(I_a(x), stderr, TiltSolution)``; the error is the root's bootstrap error at ``theta_x``."""
        sol = self.solve_tilt(x, theta0)
        se = self.value_stderr(sol.theta_x, sol.lambda_at)
        return legendre_rate(self.params_, sol), se, sol

    def predict(self, X):
        check_is_fitted(self, "cycles_")
        X = check_array(X, ensure_2d=True)
        return np.array([self.rate_point(row)[0] for row in X])


# -- quenched ------------------------------------------------------------------

class QuenchedLogMGF(BaseEstimator):
    """Quenched perturbed log-MGF from the forward lattice DP.

    Each of ``n_envs`` environments gives the window estimate
    ``log sqrt(C) + (log Z_n - log Z_m) / (n - m)`` of the shifted log-MGF
    with ``m = window_start`` (default ``n // 2``), together with its exact
    gradient and Hessian from the tilted endpoint moments.
    """

    def __init__(self, y=(0.5, 0.0), n=300, n_envs=5, seed=0, window_start=None,
                 memory_cap=DEFAULT_MEMORY_CAP, tol=1e-3, max_iter=50):
        self.y = y
        self.n = n
        self.n_envs = n_envs
        self.seed = seed
        self.window_start = window_start
        self.memory_cap = memory_cap
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, law):
        self.law_ = law
        self.params_ = build_params(self.y, law.alpha)
        self.env_seeds_ = [derive_seed(self.seed, STREAM_ENV, k) for k in range(self.n_envs)]
        self.envs_ = [Environment(law, s) for s in self.env_seeds_]
        m = self.n // 2 if self.window_start is None else int(self.window_start)
        if not 0 <= m < self.n:
            raise ValidationError("window_start must lie in [0, n)")
        self.m_ = m
        return self

    def env_objective(self, k, theta):
        """``(value, gradient, hessian)`` of the window estimate in environment ``k``."""
        check_is_fitted(self, "envs_")
        p = self.params_
        theta = check_vector(theta, p.d, "theta")
        res = forward_tilted_dp(self.envs_[k], theta + p.theta_tilt, self.n, (self.m_, self.n),
                                self.memory_cap)
        span = self.n - self.m_
        mean_n, cov_n = res.moments_at(self.n)
        mean_m, cov_m = res.moments_at(self.m_)
        value = p.log_sqrt_C + (res.log_z[self.n] - res.log_z[self.m_]) / span
        return float(value), (mean_n - mean_m) / span, (cov_n - cov_m) / span

    def env_values(self, theta):
        return np.array([self.env_objective(k, theta)[0] for k in range(self.n_envs)])

    def log_mgf(self, theta):
        vals = self.env_values(theta)
        return MgfEstimate(np.asarray(theta, dtype=float), float(np.median(vals)), _median_se(vals),
                           DP_INCREMENT, self.n, self.seed, float(vals.max() - vals.min()))

    def solve_tilt_env(self, k, x, theta0=None):
        x = check_rate_point(x, self.params_.d)
        theta0 = np.zeros(self.params_.d) if theta0 is None else theta0
        sol = newton_tilt(lambda t: self.env_objective(k, t), x, theta0, self.tol, self.max_iter)
        if not sol.converged:
            raise ConvergenceError(
                f"quenched tilt matching stopped at residual {sol.gradient_residual:.3g}",
                residual=sol.gradient_residual,
            )
        return sol

    def rate_point(self, x, theta0=None):
        """Median over environments of the per-environment Legendre value.

        Returns ``(I_q(x), stderr, solutions)``.
        """
        check_is_fitted(self, "envs_")
        sols = [self.solve_tilt_env(k, x, theta0) for k in range(self.n_envs)]
        rates = np.array([legendre_rate(self.params_, s) for s in sols])
        return float(np.median(rates)), _median_se(rates), sols

    def predict(self, X):
        check_is_fitted(self, "envs_")
        X = check_array(X, ensure_2d=True)
        return np.array([self.rate_point(row)[0] for row in X])


def _median_se(vals):
    vals = np.asarray(vals, dtype=float)
    if vals.size < 2:
        return 0.0
    return float(MEDIAN_SE_FACTOR * vals.std(ddof=1) / math.sqrt(vals.size))


# -- module-level operations ---------------------------------------------------

def grad_lambda_bar_a(params, law, theta, cycles):
    """Ratio estimator of the annealed gradient with bootstrap errors."""
    est = solve_lambda_bar_a(params, law, theta, cycles)
    return est.gradient, est.gradient_stderr


def hessian_lambda_bar_a(params, law, theta, cycles):
    """Symmetrized ratio estimator of the annealed Hessian, with eigenvalues."""
    est = solve_lambda_bar_a(params, law, theta, cycles)
    return est.hessian, np.linalg.eigvalsh(est.hessian)


def lambda_bar_q(params, env, theta, n_list):
    """Quenched perturbed log-MGF at ``theta`` by two DP routes.

    The shift route runs the DP for the walk in ``env`` at ``theta +
    theta_tilt`` and adds ``log sqrt(C)``; the direct route runs the DP with
    the auxiliary weights ``u * xi``.  Both report the window estimate at
    the last ``n`` of ``n_list``.  Returns ``(shift, direct)`` estimates.
    """
    theta = check_vector(theta, params.d, "theta")
    n_list = np.asarray(n_list, dtype=np.int64)
    n = int(n_list[-1])
    est = lambda_q_estimate_dp(env, theta + params.theta_tilt, n_list)
    shift = params.log_sqrt_C + est.window[-1]
    m = n // 2
    direct = (perturbed_q_log_dp(params, env, theta, n) - perturbed_q_log_dp(params, env, theta, m)) / (n - m)
    spread = est.oscillation(min(50, n_list.size))
    return (MgfEstimate(theta, float(shift), 0.0, DP_INCREMENT, n, env.seed, spread),
            MgfEstimate(theta, float(direct), 0.0, DP_INCREMENT, n, env.seed, spread))


def solve_tilt(params, source, x, mode="annealed", **config):
    """Match the gradient of the annealed or quenched log-MGF to ``x``.

    ``source`` is a fitted :class:`AnnealedLogMGF` / :class:`QuenchedLogMGF`
    or a law, in which case an estimator is fitted with ``config``.
    """
    est = _estimator(params, source, mode, config)
    if isinstance(est, AnnealedLogMGF):
        return est.solve_tilt(x)
    return est.solve_tilt_env(0, x)


def rate_point(params, source, x, mode="annealed", **config):
    """``(I(x), stderr)`` for the annealed or quenched rate function."""
    est = _estimator(params, source, mode, config)
    value, se, _ = est.rate_point(x)
    return value, se


def _estimator(params, source, mode, config):
    if isinstance(source, (AnnealedLogMGF, QuenchedLogMGF)):
        return source
    law = source.law if isinstance(source, Environment) else source
    if mode == "annealed":
        return AnnealedLogMGF(y=params.y, **config).fit(law)
    if mode == "quenched":
        return QuenchedLogMGF(y=params.y, **config).fit(law)
    raise ValidationError(f"unknown mode {mode!r}")


def circle_grid(center, radius, count=8):
    """``center`` followed by ``count`` points on a circle of ``radius`` in the first two axes."""
    center = np.asarray(center, dtype=float)
    pts = [center.copy()]
    for k in range(count):
        a = 2 * math.pi * k / count
        p = center.copy()
        p[0] += radius * math.cos(a)
        if p.size > 1:
            p[1] += radius * math.sin(a)
        pts.append(p)
    return np.array(pts)


def _seed_text(annealed, quenched):
    return f"mc={annealed.seed};env=" + "|".join(str(s) for s in quenched.env_seeds_)


def rate_gap_grid(y, alpha, epsilons, x_points, annealed=None, quenched=None, num_atoms=2, law_seed=0,
                  map_fn=map):
    """Quenched and annealed rates on ``x_points`` for each disorder in ``epsilons``.

    The auxiliary walk depends only on ``(y, alpha)``, so one cycle set is
    sampled and reweighted for every law.  Per-point failures are recorded
    in ``status`` and the sweep continues.
    """
    epsilons = [float(e) for e in epsilons]
    if not epsilons:
        raise ValidationError("epsilon list must be nonempty")
    annealed = AnnealedLogMGF(y=y) if annealed is None else annealed
    quenched = QuenchedLogMGF(y=y) if quenched is None else quenched
    base = zero_disorder(alpha)
    annealed.fit(base, map_fn=map_fn)
    cycles = annealed.cycles_
    records = []
    for eps in epsilons:
        law = make_tilt_mixture(alpha, eps, num_atoms, law_seed)
        annealed.fit(law, cycles=cycles)
        quenched.fit(law)
        for x in x_points:
            x = np.asarray(x, dtype=float)
            try:
                I_a, se_a, sol_a = annealed.rate_point(x)
                I_q, se_q, sols_q = quenched.rate_point(x, sol_a.theta_x)
                theta_q = np.median([s.theta_x for s in sols_q], axis=0)
                records.append(RateGapRecord(eps, x, I_q, se_q, I_a, se_a, theta_q, sol_a.theta_x,
                                             _seed_text(annealed, quenched)))
            except ConvergenceError as exc:
                nan = float("nan")
                records.append(RateGapRecord(eps, x, nan, nan, nan, nan, np.full(x.size, nan),
                                             np.full(x.size, nan), _seed_text(annealed, quenched),
                                             f"failed: {exc}"))
    return records


def max_gap_by_epsilon(records):
    """``{epsilon: (max gap, its stderr)}`` over successful records."""
    out = {}
    for r in records:
        if r.status != "ok":
            continue
        best = out.get(r.epsilon)
        if best is None or r.gap > best[0]:
            out[r.epsilon] = (r.gap, r.gap_stderr)
    return out


@dataclass
class HessianDiagnostics:
    inverse_norm: float          # ||H(0)^{-1}|| in the operator 1-norm
    max_deviation: float         # max over the grid of ||H(theta) - H(0)||
    min_eigenvalue: float
    singular: bool
    hessian0: np.ndarray


def operator_1norm(A):
    return float(np.abs(A).sum(axis=0).max())


def hessian_diagnostics(params, law, theta_grid, cycles):
    """Inverse-function-theorem diagnostics of the annealed Hessian around ``theta = 0``."""
    if law is not None and law != cycles.law:
        cycles = cycles.reweighted(law)
    H0 = root_with_derivatives(cycles, np.zeros(params.d)).hessian
    eig = np.linalg.eigvalsh(H0)
    singular = bool(eig[0] <= 1e-12 * max(1.0, abs(eig[-1])))
    inv = float("inf") if singular else operator_1norm(np.linalg.inv(H0))
    dev = 0.0
    for th in theta_grid:
        H = root_with_derivatives(cycles, np.asarray(th, dtype=float)).hessian
        dev = max(dev, operator_1norm(H - H0))
    return HessianDiagnostics(inv, dev, float(eig[0]), singular, H0)


def zero_disorder_rate(y, alpha, x):
    """Cramér rate of the homogeneous walk with weights ``alpha`` at ``x`` (closed-form oracle).

    The optimizer is found by Newton on the log-MGF of one step.
    """
    alpha = np.asarray(alpha, dtype=float)
    x = np.asarray(x, dtype=float)
    d = x.size
    signs = np.tile([1.0, -1.0], d)

    def obj(t):
        tt = np.repeat(t, 2) * signs
        w = alpha * np.exp(tt)
        z = w.sum()
        p = w / z
        mean = np.array([p[2 * i] - p[2 * i + 1] for i in range(d)])
        sec = np.diag([p[2 * i] + p[2 * i + 1] for i in range(d)])
        return math.log(z), mean, sec - np.outer(mean, mean)

    sol = newton_tilt(obj, x, np.zeros(d), tol=1e-14, max_iter=100)
    return float(sol.theta_x @ x - sol.lambda_at)
