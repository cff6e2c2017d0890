"""Regeneration structure of the auxiliary walk and the cycle functionals built on it.

A regeneration time is a time at which the walk reaches a strictly new level
along ``ell`` and never goes below that level afterwards.  Between
consecutive regeneration times the walk visits disjoint sets of sites, so the
blocks ``(tau, X_tau, visit counts)`` are i.i.d. and annealed weights factor
over blocks.

The event "never goes below" is not observable in finite time.  A candidate is
accepted once the walk stands ``confirm_window`` levels above it; the chance
that an accepted level is later undershot is bounded by
:func:`rwre.auxwalk.confirmation_bias_bound`, stored on every cycle set.

Cycles come from long walks split into fixed work units.  Unit ``i`` draws
from ``seed_stream(seed, i, stream)``, and units are concatenated in index
order, so a cycle set depends only on ``(seed, stream, n_cycles, unit_size)``
and never on how many processes ran the units.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from . import _cyclekernels as ck
from .auxwalk import (
    AuxWalkParams,
    confirmation_bias_bound,
    default_confirm_window,
    gamblers_ruin_bound,
    azuma_tail,
)
from .envlaw import Environment, EnvironmentalLaw, VisitCounts, zero_disorder
from .errors import ConvergenceError, ValidationError
from .seeding import (
    STREAM_AZUMA,
    STREAM_BOOTSTRAP,
    STREAM_CBAR,
    STREAM_CYCLES,
    STREAM_MISC,
    STREAM_PHI,
    STREAM_TWO_WALK,
    seed_stream,
)
from ._validation import check_positive_int, check_vector

DEFAULT_UNIT_SIZE = 20000
DEFAULT_BOOTSTRAP = 200
CENSORED = math.inf


@dataclass
class RegenerationCycle:
    """One block between consecutive regeneration times."""

    tau: int
    displacement: np.ndarray
    counts: VisitCounts
    log_xi_annealed: float
    log_xi_quenched: float = float("nan")
    confirmed_bias_bound: float = 0.0


def _ell_index(params):
    return params.ell.index


def _resolve_window(params, confirm_window):
    if confirm_window is None:
        return default_confirm_window(params)
    return check_positive_int(confirm_window, "confirm_window")


def _run_unit(task):
    """Simulate one work unit; module-level so process pools can pickle it."""
    cdf, ell_index, K, n_cycles, seed, unit, stream = task
    rng = seed_stream(seed, unit, stream)
    max_steps = 400 * n_cycles + 200 * K + 10**6
    steps, ends, violations, n_steps = ck.walk_cycles(cdf, ell_index, K, n_cycles, rng, max_steps)
    if ends.size < n_cycles:
        raise ConvergenceError(
            f"work unit {unit} confirmed only {ends.size} of {n_cycles} cycles in {n_steps} steps"
        )
    return steps, ends, violations, n_steps


@dataclass
class CycleSet:
    """Arrays describing ``n`` i.i.d. regeneration cycles.

    ``log_xi`` holds ``log E prod xi`` under ``law``; ``log_xi_quenched``
    holds ``log prod xi`` in ``env`` at the unit walks' absolute positions
    when an environment was supplied.
    """

    params: AuxWalkParams
    law: EnvironmentalLaw
    confirm_window: int
    tau: np.ndarray
    displacement: np.ndarray
    log_xi: np.ndarray
    steps: np.ndarray
    ends: np.ndarray
    violations: int = 0
    n_steps_simulated: int = 0
    seed: int = 0
    log_xi_quenched: np.ndarray = None
    level_gain: np.ndarray = field(init=False)

    def __post_init__(self):
        ax = self.params.ell.axis - 1
        self.level_gain = self.displacement[:, ax] * self.params.ell.sign

    def __len__(self):
        return self.tau.size

    @property
    def bias_bound(self):
        return confirmation_bias_bound(self.params, self.confirm_window)

    def cycle_steps(self, i):
        start = 0 if i == 0 else self.ends[i - 1]
        return self.steps[start:self.ends[i]]

    def cycle(self, i):
        steps = self.cycle_steps(i)
        q = float("nan") if self.log_xi_quenched is None else float(self.log_xi_quenched[i])
        return RegenerationCycle(
            int(self.tau[i]),
            self.displacement[i].copy(),
            VisitCounts.from_steps(steps, self.params.d),
            float(self.log_xi[i]),
            q,
            self.bias_bound,
        )

    def reweighted(self, law):
        """Same cycles with annealed weights recomputed under another law with the same mean."""
        if np.max(np.abs(law.alpha - self.params.alpha)) > 1e-12:
            raise ValidationError("reweighting needs a law with the walk's mean weights")
        logw = _annealed_log_weights(self.steps, self.ends, self.params, law)
        return CycleSet(self.params, law, self.confirm_window, self.tau, self.displacement, logw,
                        self.steps, self.ends, self.violations, self.n_steps_simulated, self.seed)

    def split(self, n_first):
        """Two disjoint cycle sets: the first ``n_first`` cycles and the rest."""
        if not 0 < n_first < len(self):
            raise ValidationError("split point must leave both parts nonempty")
        cut = self.ends[n_first - 1]
        first = CycleSet(self.params, self.law, self.confirm_window, self.tau[:n_first],
                         self.displacement[:n_first], self.log_xi[:n_first], self.steps[:cut],
                         self.ends[:n_first], self.violations, self.n_steps_simulated, self.seed)
        second = CycleSet(self.params, self.law, self.confirm_window, self.tau[n_first:],
                          self.displacement[n_first:], self.log_xi[n_first:], self.steps[cut:],
                          self.ends[n_first:] - cut, self.violations, self.n_steps_simulated, self.seed)
        return first, second


def _annealed_log_weights(steps, ends, params, law):
    d = params.d
    if law.n_atoms == 1:
        return np.zeros(ends.size)
    if d > ck.MAX_KEY_DIM:
        raise ValidationError(f"cycle weights are implemented for d <= {ck.MAX_KEY_DIM}")
    _, _, logw = ck.cycle_summaries(steps, ends, d, _ell_index(params), law.log_xi_atoms,
                                    np.log(law.probs), True)
    return logw


def sample_cycles(params, source=None, n_cycles=10000, seed=0, confirm_window=None,
                  unit_size=DEFAULT_UNIT_SIZE, stream=STREAM_CYCLES, map_fn=map):
    """Sample ``n_cycles`` i.i.d. regeneration cycles of the auxiliary walk.

    ``source`` is an :class:`EnvironmentalLaw` (annealed weights), an
    :class:`Environment` (also quenched weights) or ``None`` (zero disorder
    around the walk's own ``alpha``).  ``map_fn`` runs the work units; pass
    an executor's ``map`` to parallelize.
    """
    n_cycles = check_positive_int(n_cycles, "n_cycles")
    unit_size = check_positive_int(unit_size, "unit_size")
    K = _resolve_window(params, confirm_window)
    env = source if isinstance(source, Environment) else None
    law = env.law if env is not None else (source if source is not None else zero_disorder(params.alpha))
    if np.max(np.abs(law.alpha - params.alpha)) > 1e-12:
        raise ValidationError("law mean weights differ from the auxiliary walk's alpha")
    if params.d > ck.MAX_KEY_DIM:
        raise ValidationError(f"cycle sampling is implemented for d <= {ck.MAX_KEY_DIM}")
    cdf = np.cumsum(params.u)
    cdf[-1] = 1.0
    n_units = -(-n_cycles // unit_size)
    tasks = []
    for unit in range(n_units):
        size = min(unit_size, n_cycles - unit * unit_size)
        tasks.append((cdf, _ell_index(params), K, size, int(seed), unit, int(stream)))
    results = list(map_fn(_run_unit, tasks))
    offsets = np.cumsum([0] + [r[0].size for r in results])
    steps = np.concatenate([r[0] for r in results])
    ends = np.concatenate([r[1] + offsets[i] for i, r in enumerate(results)])
    violations = int(sum(r[2] for r in results))
    n_steps = int(sum(r[3] for r in results))
    tau, disp, _ = ck.cycle_summaries(steps, ends, params.d, _ell_index(params),
                                      law.log_xi_atoms, np.log(law.probs), False)
    logw = _annealed_log_weights(steps, ends, params, law)
    quenched = None
    if env is not None:
        quenched = ck.quenched_cycle_weights(steps, ends, params.d, np.uint64(env.seed), law.cdf,
                                             law.log_xi_atoms)
    return CycleSet(params, law, K, tau, disp, logw, steps, ends, violations, n_steps, int(seed), quenched)


def sample_cycle(params, source=None, rng=None, confirm_window=None):
    """Sample a single regeneration cycle with the caller's generator."""
    K = _resolve_window(params, confirm_window)
    rng = np.random.default_rng() if rng is None else rng
    cdf = np.cumsum(params.u)
    cdf[-1] = 1.0
    steps, ends, violations, n_steps = ck.walk_cycles(cdf, _ell_index(params), K, 1, rng, 10**8)
    if ends.size < 1:
        raise ConvergenceError("no regeneration confirmed within the step budget")
    env = source if isinstance(source, Environment) else None
    law = env.law if env is not None else (source if source is not None else zero_disorder(params.alpha))
    logw = _annealed_log_weights(steps, ends, params, law)
    counts = VisitCounts.from_steps(steps, params.d)
    q = float("nan")
    if env is not None:
        q = float(ck.quenched_cycle_weights(steps, ends, params.d, np.uint64(env.seed), law.cdf,
                                            law.log_xi_atoms)[0])
    _, disp, _ = ck.cycle_summaries(steps, ends, params.d, _ell_index(params), law.log_xi_atoms,
                                    np.log(law.probs), False)
    return RegenerationCycle(int(ends[0]), disp[0], counts, float(logw[0]), q,
                             confirmation_bias_bound(params, K))


# -- constants of the renewal structure ----------------------------------------

@dataclass
class ProportionEstimate:
    p_hat: float
    stderr: float
    n_samples: int
    lower_bound: float = float("nan")
    reference: float = float("nan")


def _projected_probs(params):
    k = params.ell.index
    return float(params.u[k]), float(params.u[k ^ 1])


def estimate_c_bar(params, n_samples=100000, seed=0, confirm_window=None):
    """Estimate the probability that the walk never drops below its starting level.

    A trial succeeds when the walk gains ``confirm_window`` levels before
    going below 0.  ``lower_bound`` is the gambler's-ruin constant and
    ``reference`` the exact value ``1 - u(-ell)/u(ell)`` for the projected
    lazy walk.
    """
    n_samples = check_positive_int(n_samples, "n_samples")
    K = _resolve_window(params, confirm_window)
    up, down = _projected_probs(params)
    rng = seed_stream(seed, 0, STREAM_CBAR)
    ok = ck.no_backtrack_trials(up, down, K, n_samples, rng, 10**9)
    p = ok / n_samples
    return ProportionEstimate(p, math.sqrt(max(p * (1 - p), 0.0) / n_samples), n_samples,
                              gamblers_ruin_bound(params), 1.0 - down / up)


@dataclass
class TailCheck:
    k: int
    p_hat: float
    stderr: float
    bound: float

    @property
    def passed(self):
        return self.p_hat <= self.bound + 4 * self.stderr


def azuma_tail_check(params, ks=(5, 10, 20), n_walks=10**6, seed=0):
    """Empirical ``Q(<X_k, ell> < 0)`` against ``exp(-k <y,ell>^2 / 8)``."""
    ks = np.asarray(sorted(ks), dtype=np.int64)
    up, down = _projected_probs(params)
    rng = seed_stream(seed, 0, STREAM_AZUMA)
    levels = ck.projected_levels(up, down, ks, int(n_walks), rng)
    out = []
    for j, k in enumerate(ks):
        p = float(np.mean(levels[:, j] < 0))
        out.append(TailCheck(int(k), p, math.sqrt(max(p * (1 - p), 1.0 / n_walks) / n_walks),
                             azuma_tail(params, int(k))))
    return out


@dataclass
class ExpMomentEstimate:
    gamma: float
    mean: float
    stderr: float
    n_samples: int


def sample_first_renewal_times(params, n_samples, seed=0, confirm_window=None):
    """First regeneration times of independent walks started at the origin (no conditioning)."""
    K = _resolve_window(params, confirm_window)
    up, down = _projected_probs(params)
    rng = seed_stream(seed, 0, STREAM_MISC)
    cdf_level = np.array([up, up + down])
    taus = ck.first_renewal_times(cdf_level, K, int(n_samples), rng, 200 * K + 10**5)
    if np.any(taus < 0):
        raise ConvergenceError("a walk did not regenerate within its step budget")
    return taus


def exp_moment(taus, gamma):
    """Mean of ``exp(gamma * tau)`` and its standard error, accumulated in log space."""
    taus = np.asarray(taus, dtype=float)
    if gamma < 0:
        raise ValidationError("gamma must be nonnegative")
    a = gamma * taus
    m = a.max()
    w = np.exp(a - m)
    mean = float(np.exp(m) * w.mean())
    se = float(np.exp(m) * w.std(ddof=1) / math.sqrt(w.size)) if w.size > 1 else float("inf")
    return ExpMomentEstimate(float(gamma), mean, se, w.size)


def estimate_exp_moment_tau(params, gamma, n_samples=100000, seed=0, confirm_window=None, taus=None):
    """Empirical ``E exp(gamma * tau_1)`` for one or several ``gamma`` on a common sample."""
    if taus is None:
        taus = sample_first_renewal_times(params, n_samples, seed, confirm_window)
    gammas = np.atleast_1d(np.asarray(gamma, dtype=float))
    out = [exp_moment(taus, g) for g in gammas]
    return out[0] if np.ndim(gamma) == 0 else out


def scan_gamma0(estimates, threshold=2.0, n_sigma=4.0):
    """Largest scanned ``gamma`` such that every ``gamma' <= gamma`` has ``mean + n_sigma*se < threshold``.

    Returns 0.0 when even the smallest positive ``gamma`` fails.
    """
    best = 0.0
    for est in sorted(estimates, key=lambda e: e.gamma):
        if est.mean + n_sigma * est.stderr < threshold:
            best = est.gamma
        else:
            break
    return best


def lag1_autocorrelation(x):
    """Sample lag-1 autocorrelation and its standard error ``1/sqrt(n)`` under independence."""
    x = np.asarray(x, dtype=float)
    x = x - x.mean()
    r = float(np.dot(x[:-1], x[1:]) / np.dot(x, x))
    return r, 1.0 / math.sqrt(x.size)


# -- the root equation and its derivatives --------------------------------------

def _theta(params, theta):
    return check_vector(theta, params.d, "theta")


def cycle_exponents(cycles, theta):
    """``<theta, X_tau> + log E prod xi`` per cycle."""
    return cycles.displacement @ np.asarray(theta, dtype=float) + cycles.log_xi


def _lse(v, c=None):
    m = v.max()
    s = np.exp(v - m)
    if c is not None:
        s = s * c
    return m + math.log(s.sum())


def log_psi_terms(a, tau, r, counts=None):
    n = a.size if counts is None else counts.sum()
    return _lse(a - r * tau, counts) - math.log(n)


def psi(params, law, theta, r, cycles):
    """Empirical ``E[exp(<theta, X_tau> - r tau) E prod xi]`` over ``cycles`` under ``law``."""
    if law is not None and law != cycles.law:
        cycles = cycles.reweighted(law)
    a = cycle_exponents(cycles, _theta(params, theta))
    return float(math.exp(log_psi_terms(a, cycles.tau, float(r))))


def root_from_terms(a, tau, counts=None, r0=None, tol=1e-15, max_iter=200):
    """Root in ``r`` of ``sum c_i exp(a_i - r tau_i) = sum c_i``.

    The left side is strictly decreasing and convex in ``r``.  A bracket
    ``[lo, hi]`` is found first; Newton steps that leave the bracket are
    replaced by bisection.
    """
    tau = np.asarray(tau, dtype=float)
    n_total = a.size if counts is None else float(counts.sum())
    log_n = math.log(n_total)

    def g_and_slope(r):
        v = a - r * tau
        m = v.max()
        p = np.exp(v - m)
        if counts is not None:
            p = p * counts
        s = p.sum()
        return m + math.log(s) - log_n, -float(np.dot(p, tau) / s)

    r = 0.0 if r0 is None else float(r0)
    g, slope = g_and_slope(r)
    # bracket: g is decreasing with slope in [-max tau, -min tau]
    step = max(abs(g), 1e-3)
    lo, hi = (r, None) if g > 0 else (None, r)
    width = step
    while lo is None or hi is None:
        probe = (hi - width) if lo is None else (lo + width)
        gp, _ = g_and_slope(probe)
        if gp > 0:
            lo = probe
        else:
            hi = probe
        width *= 2.0
        if width > 1e6:
            raise ConvergenceError("could not bracket the root of the cycle equation")
    for _ in range(max_iter):
        if g == 0.0:
            return r
        new = r - g / slope
        if not (lo < new < hi):
            new = 0.5 * (lo + hi)
        if abs(new - r) <= tol * max(1.0, abs(r)):
            return new
        r = new
        g, slope = g_and_slope(r)
        if g > 0:
            lo = r
        else:
            hi = r
        if hi - lo <= tol * max(1.0, abs(r)):
            return r
    raise ConvergenceError("root iteration did not converge", residual=g)


@dataclass
class RootDerivatives:
    """Root of the cycle equation and its exact derivatives on the same sample."""

    theta: np.ndarray
    value: float
    gradient: np.ndarray
    hessian: np.ndarray
    total_weight: float


def root_with_derivatives(cycles, theta, counts=None, r0=None):
    """Empirical root ``r(theta)``, its gradient ``sum X w / sum tau w`` and Hessian.

    The Hessian ``sum (X - g tau)(X - g tau)^T w / sum tau w`` is the exact
    second derivative of the empirical root, so finite differences of
    ``value`` agree with ``gradient`` and ``hessian`` up to ``O(h^2)``.
    """
    theta = np.asarray(theta, dtype=float)
    a = cycle_exponents(cycles, theta)
    r = root_from_terms(a, cycles.tau, counts, r0)
    v = a - r * cycles.tau
    m = v.max()
    w = np.exp(v - m)
    if counts is not None:
        w = w * counts
    tau = cycles.tau.astype(float)
    X = cycles.displacement.astype(float)
    denom = float(np.dot(w, tau))
    grad = (w @ X) / denom
    dev = X - np.outer(tau, grad)
    hess = (dev * w[:, None]).T @ dev / denom
    hess = 0.5 * (hess + hess.T)
    total = float(np.exp(m) * w.sum() / (cycles.tau.size if counts is None else counts.sum()))
    return RootDerivatives(theta, r, grad, hess, total)


@dataclass
class RootEstimate:
    """Annealed log-MGF estimate from the cycle root, with bootstrap errors."""

    theta: np.ndarray
    value: float
    stderr: float
    gradient: np.ndarray
    gradient_stderr: np.ndarray
    hessian: np.ndarray
    hessian_stderr: np.ndarray
    min_eigenvalue: float
    min_eigenvalue_stderr: float
    n_cycles: int
    boot_values: np.ndarray = None


def bootstrap_counts(n, n_boot, seed=0):
    """Multinomial resampling counts, one row per bootstrap replicate."""
    rng = seed_stream(seed, 0, STREAM_BOOTSTRAP)
    return [np.bincount(rng.integers(0, n, n), minlength=n).astype(float) for _ in range(n_boot)]


def solve_lambda_bar_a(params, law, theta, cycles, n_boot=DEFAULT_BOOTSTRAP, seed=0, boot=None):
    """Root of the empirical cycle equation with cycle-level bootstrap errors.

    Gradient, Hessian and minimum eigenvalue come with their own bootstrap
    standard errors.  ``boot`` may carry precomputed bootstrap counts so that
    several ``theta`` values share replicates.
    """
    theta = _theta(params, theta)
    if law is not None and law != cycles.law:
        cycles = cycles.reweighted(law)
    full = root_with_derivatives(cycles, theta)
    if boot is None:
        boot = bootstrap_counts(len(cycles), n_boot, seed) if n_boot else []
    vals, grads, hesses, eigs = [], [], [], []
    for c in boot:
        b = root_with_derivatives(cycles, theta, c, full.value)
        vals.append(b.value)
        grads.append(b.gradient)
        hesses.append(b.hessian)
        eigs.append(np.linalg.eigvalsh(b.hessian)[0])
    def sd(x, shape):
        return np.std(np.asarray(x), axis=0, ddof=1) if len(x) > 1 else np.full(shape, np.inf)
    return RootEstimate(
        theta, full.value, float(sd(vals, ())), full.gradient, sd(grads, params.d),
        full.hessian, sd(hesses, (params.d, params.d)), float(np.linalg.eigvalsh(full.hessian)[0]),
        float(sd(eigs, ())), len(cycles), np.asarray(vals),
    )


def h_star_a0(cycles):
    """``sum (X - y tau)(X - y tau)^T / sum tau`` on unweighted cycles."""
    y = cycles.params.y
    tau = cycles.tau.astype(float)
    dev = cycles.displacement - np.outer(tau, y)
    return dev.T @ dev / tau.sum()


# -- tilted step law and renewal hitting probabilities ----------------------------

@dataclass
class TiltedStepLaw:
    """Empirical tilted displacement law of one cycle."""

    support: np.ndarray        # (m, d) distinct displacements
    weights: np.ndarray        # (m,) mass at each displacement
    total_mass: float
    total_mass_stderr: float
    ell_mean: float            # mean level gain under the (unnormalized) law
    ell_mean_stderr: float
    level_masses: np.ndarray   # level_masses[j] = mass of displacements with level gain j

    def hitting_probabilities(self, n_max):
        return renewal_hitting(self.level_masses, n_max)


def _cycle_weights(cycles, theta, lam):
    return np.exp(cycle_exponents(cycles, theta) - lam * cycles.tau)


def tilted_step_law(params, law, theta, lam, cycles):
    """Mass ``mean(w * 1{X = x})`` with ``w = exp(<theta,X> - lam tau) E prod xi``."""
    theta = _theta(params, theta)
    if law is not None and law != cycles.law:
        cycles = cycles.reweighted(law)
    w = _cycle_weights(cycles, theta, float(lam))
    n = w.size
    support, inverse = np.unique(cycles.displacement, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    weights = np.bincount(inverse, weights=w, minlength=len(support)) / n
    gains = cycles.level_gain
    level_masses = np.bincount(gains, weights=w) / n
    lw = gains * w
    return TiltedStepLaw(
        support, weights, float(w.mean()), float(w.std(ddof=1) / math.sqrt(n)),
        float(lw.mean()), float(lw.std(ddof=1) / math.sqrt(n)), level_masses,
    )


def renewal_hitting(level_masses, n_max):
    """``h[m]`` = mass of renewal sequences landing exactly on level ``m``, ``m = 0..n_max``.

    ``h[0] = 1`` and ``h[m] = sum_j level_masses[j] h[m - j]``.
    """
    h = np.zeros(n_max + 1)
    h[0] = 1.0
    f = np.zeros(n_max + 1)
    k = min(len(level_masses), n_max + 1)
    f[:k] = level_masses[:k]
    f[0] = 0.0
    for m in range(1, n_max + 1):
        h[m] = np.dot(f[1:m + 1], h[m - 1::-1][:m])
    return h


@dataclass
class PhiMoments:
    """First (and optionally second) moments of the discounted renewal weight at levels ``n``."""

    n: np.ndarray
    lam: float
    mean_phi: np.ndarray
    stderr_phi: np.ndarray
    renewal_phi: np.ndarray
    renewal_stderr: np.ndarray
    n_chains: int
    mean_phi_sq: np.ndarray = None
    stderr_phi_sq: np.ndarray = None
    n_pairs: int = 0


def phi_direct(cycles, theta, lam, n_values, n_chains):
    """Per-chain values of the weight at each level for chains of consecutive cycles."""
    n_values = np.asarray(n_values, dtype=np.int64)
    log_terms = cycle_exponents(cycles, theta) - lam * cycles.tau
    vals, nxt = ck.chain_phi(cycles.level_gain.astype(np.int64), log_terms, n_values, int(n_chains), 0)
    if nxt < 0:
        raise ConvergenceError("cycle pool exhausted while building renewal chains")
    return vals


def phi_second_moment(cycles, theta, lam, n, n_pairs):
    """Per-pair values of the two-chain weight at level ``n`` (both chains start at the origin)."""
    d = cycles.params.d
    law = cycles.law
    vals = np.zeros(int(n_pairs))
    c = 0
    gains = cycles.level_gain.astype(np.int64)
    theta = np.asarray(theta, dtype=float)
    vecs = np.zeros((2 * d, d))
    for k in range(2 * d):
        vecs[k, k // 2] = 1.0 if k % 2 == 0 else -1.0
    origin = np.zeros(d, dtype=np.int64)
    log_table, log_probs = law.log_xi_atoms, np.log(law.probs)
    for p in range(int(n_pairs)):
        sa, ha, c = ck.chain_path(cycles.steps, cycles.ends, gains, c, int(n), d)
        if c < 0:
            raise ConvergenceError("cycle pool exhausted while building chain pairs")
        sb, hb, c = ck.chain_path(cycles.steps, cycles.ends, gains, c, int(n), d)
        if c < 0:
            raise ConvergenceError("cycle pool exhausted while building chain pairs")
        if ha < 0 or hb < 0:
            continue
        xa = vecs[sa.astype(np.int64)].sum(axis=0)
        xb = vecs[sb.astype(np.int64)].sum(axis=0)
        lw = 0.0 if law.n_atoms == 1 else ck.joint_log_weight(sa, sb, origin, d, log_table, log_probs)
        vals[p] = math.exp(float(theta @ (xa + xb)) - lam * (ha + hb) + lw)
    return vals


def phi_n_moments(params, law, theta, n_values, n_samples, seed=0, confirm_window=None, lam=None,
                  fit_cycles=None, n_boot=100, second_moment=False, n_pairs=None, map_fn=map):
    """Moments of the discounted renewal weight by two independent routes.

    A fitting set of ``fit_cycles`` cycles fixes ``lam`` (the empirical root at
    ``theta`` unless given) and the tilted step law, whose renewal recursion
    gives the renewal-route value.  An independent pool of cycles is cut
    into ``n_samples`` chains for the direct route.  Both routes use the same
    ``lam``; the claimed identity holds for any fixed ``lam``.

    With ``second_moment`` each level gets its own independent pool of
    ``n_pairs`` chain pairs.
    """
    theta = _theta(params, theta)
    n_values = np.asarray(sorted(n_values), dtype=np.int64)
    n_max = int(n_values[-1])
    n_samples = check_positive_int(n_samples, "n_samples")
    fit_n = n_samples if fit_cycles is None else int(fit_cycles)
    fit = sample_cycles(params, law, fit_n, seed, confirm_window, stream=STREAM_PHI * 100, map_fn=map_fn)
    if lam is None:
        lam = root_with_derivatives(fit, theta).value
    lam = float(lam)
    step_law = tilted_step_law(params, None, theta, lam, fit)
    renewal = step_law.hitting_probabilities(n_max)[n_values]
    boot_h = []
    w = _cycle_weights(fit, theta, lam)
    gains = fit.level_gain
    for c in bootstrap_counts(len(fit), n_boot, seed + 1):
        masses = np.bincount(gains, weights=w * c) / c.sum()
        boot_h.append(renewal_hitting(masses, n_max)[n_values])
    renewal_se = np.std(np.asarray(boot_h), axis=0, ddof=1) if len(boot_h) > 1 else np.full(n_values.size, np.inf)

    mean_gain = max(float(np.mean(fit.level_gain)), 1.0)
    pool_size = int(n_samples * (n_max / mean_gain + 4 * math.sqrt(n_max) + 10))
    pool = sample_cycles(params, law, pool_size, seed, confirm_window, stream=STREAM_PHI * 100 + 1,
                         map_fn=map_fn)
    vals = phi_direct(pool, theta, lam, n_values, n_samples)
    out = PhiMoments(n_values, lam, vals.mean(axis=0), vals.std(axis=0, ddof=1) / math.sqrt(n_samples),
                     renewal, renewal_se, n_samples)
    if second_moment:
        n_pairs = n_samples if n_pairs is None else int(n_pairs)
        sq_mean, sq_se = [], []
        for i, n in enumerate(n_values):
            size = int(2 * n_pairs * (n / mean_gain + 4 * math.sqrt(n) + 10))
            pool_i = sample_cycles(params, law, size, seed, confirm_window,
                                   stream=STREAM_PHI * 100 + 2 + i, map_fn=map_fn)
            v = phi_second_moment(pool_i, theta, lam, int(n), n_pairs)
            sq_mean.append(v.mean())
            sq_se.append(v.std(ddof=1) / math.sqrt(n_pairs))
        out.mean_phi_sq = np.asarray(sq_mean)
        out.stderr_phi_sq = np.asarray(sq_se)
        out.n_pairs = n_pairs
    return out


# -- two walks -----------------------------------------------------------------

@dataclass
class TwoWalkStats:
    """Intersection bookkeeping for two independent conditioned walks from ``0`` and ``z``.

    ``zeta`` and ``sigma`` are :data:`CENSORED` (infinity) when not
    observed within ``horizon`` levels.
    """

    z: np.ndarray
    horizon: int
    zeta: float
    sigma: float
    n_query: np.ndarray
    intersection_counts: np.ndarray
    common_levels: np.ndarray

    def intersection_count_at(self, n):
        j = np.flatnonzero(self.n_query == n)
        if j.size == 0:
            raise ValidationError(f"level {n} was not queried")
        return int(self.intersection_counts[j[0]])


def _conditioned_path(params, K, horizon, rng):
    cdf = np.cumsum(params.u)
    cdf[-1] = 1.0
    steps, ends, _, _ = ck.walk_cycles(cdf, _ell_index(params), K, int(horizon) + 1, rng, 10**9)
    if ends.size < horizon + 1:
        raise ConvergenceError("two-walk sample did not regenerate often enough")
    _, disp, _ = ck.cycle_summaries(steps, ends, params.d, _ell_index(params),
                                    np.zeros((1, 2 * params.d)), np.zeros(1), False)
    gains = disp[:, params.ell.axis - 1] * params.ell.sign
    levels = np.concatenate([[0], np.cumsum(gains)])
    # keep everything up to the first regeneration strictly above the horizon
    cut = int(np.searchsorted(levels, horizon, side="right"))
    steps = steps[: (ends[cut - 1] if cut > 0 else 0)]
    flags = np.zeros(horizon + 1, dtype=np.bool_)
    lv = levels[: cut + 1]
    flags[lv[lv <= horizon]] = True
    return steps, flags


def two_walk_sample(params, law, z, horizon, rng, n_query=None, confirm_window=None):
    """Run two independent conditioned walks from ``0`` and ``z`` up to level ``horizon``.

    ``law`` is accepted for interface symmetry; the statistics depend only on
    the walks.
    """
    z = np.asarray(z, dtype=np.int64).reshape(-1)
    if z.size != params.d:
        raise ValidationError("z must have d components")
    if int(z[params.ell.axis - 1]) != 0:
        raise ValidationError("z must be orthogonal to ell")
    horizon = check_positive_int(horizon, "horizon")
    K = _resolve_window(params, confirm_window)
    n_query = np.arange(1, horizon + 1) if n_query is None else np.asarray(n_query, dtype=np.int64)
    sa, fa = _conditioned_path(params, K, horizon, rng)
    sb, fb = _conditioned_path(params, K, horizon, rng)
    pa = ck.positions_of(sa, np.zeros(params.d, dtype=np.int64), params.d)
    pb = ck.positions_of(sb, z, params.d)
    zeta, sigma, common, I = ck.two_walk_kernel(pa, pb, params.ell.axis - 1, params.ell.sign,
                                                horizon, fa, fb, n_query)
    return TwoWalkStats(
        z, horizon,
        CENSORED if zeta < 0 else float(zeta),
        CENSORED if sigma < 0 else float(sigma),
        n_query, I, np.flatnonzero(common),
    )


def two_walk_sigma_rate(params, z, horizon, n_samples, seed=0, confirm_window=None):
    """Fraction of sampled pairs with a common renewal level after an intersection, with stderr."""
    rng = seed_stream(seed, 0, STREAM_TWO_WALK)
    hits = 0
    for _ in range(int(n_samples)):
        st = two_walk_sample(params, None, z, horizon, rng, np.array([horizon]), confirm_window)
        hits += st.sigma < CENSORED
    p = hits / n_samples
    return ProportionEstimate(p, math.sqrt(max(p * (1 - p), 0.0) / n_samples), int(n_samples))
