"""Auxiliary homogeneous walk with drift exactly ``y``.

Given a target velocity ``y`` and mean weights ``alpha``, the walk jumps along
direction ``e`` with probability ``u(e)``, where ``u`` is built from the unique
root ``C`` of ``f(C) = 1``.  The construction satisfies

* ``sum_e u(e) = 1`` and ``sum_e e * u(e) = y``;
* ``u(e_i) * u(-e_i) = C * alpha(e_i) * alpha(-e_i)`` on every axis;
* ``u(e) = sqrt(C) * alpha(e) * exp(<theta_tilt, e>)``, which turns path
  probabilities into a closed form in the endpoint.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_prob_vector, check_velocity
from .envlaw import Direction, direction_vectors
from .errors import ConvergenceError, ValidationError

MAX_BISECTION_ITER = 200


def _split_alpha(alpha):
    return alpha[0::2], alpha[1::2]


def f_of_C(y, alpha, C):
    """``sum_i sqrt(y_i^2 + 4 C alpha(e_i) alpha(-e_i))``."""
    alpha = check_prob_vector(alpha, strictly_positive=True, name="alpha")
    y = np.asarray(y, dtype=float)
    plus, minus = _split_alpha(alpha)
    return float(np.sum(np.sqrt(y * y + 4.0 * C * plus * minus)))


def solve_C(y, alpha):
    """Root of ``f(C) = 1`` by bracketing bisection.

    ``y = 0`` is accepted; the root is then ``1 / (2 sum_i sqrt(alpha(e_i) alpha(-e_i)))^2``.
    """
    alpha = check_prob_vector(alpha, strictly_positive=True, name="alpha")
    y = check_velocity(y, alpha.size // 2, allow_zero=True)
    plus, minus = _split_alpha(alpha)
    y2 = y * y
    prod4 = 4.0 * plus * minus

    def f(c):
        return np.sum(np.sqrt(y2 + c * prod4))

    lo, hi = 0.0, 1.0
    while f(hi) <= 1.0:
        hi *= 2.0
        if hi > 1e300:
            raise ConvergenceError("could not bracket the root of f(C) = 1")
    for _ in range(MAX_BISECTION_ITER):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if f(mid) > 1.0:
            hi = mid
        else:
            lo = mid
    # pick whichever endpoint has the smaller residual
    return float(lo if abs(f(lo) - 1.0) <= abs(f(hi) - 1.0) else hi)


def choose_ell(y):
    """Coordinate direction maximizing ``<y, ell>``.

    Ties go to the smallest axis, then to the positive sign.
    """
    y = np.asarray(y, dtype=float)
    if not np.any(y):
        raise ValidationError("y must be nonzero to choose a regeneration direction")
    mags = np.abs(y)
    axis = int(np.flatnonzero(mags == mags.max())[0])
    return Direction(axis + 1, 1 if y[axis] > 0 else -1)


@dataclass(frozen=True, eq=False)
class AuxWalkParams:
    """Derived constants of the auxiliary walk for velocity ``y`` and means ``alpha``."""

    y: np.ndarray
    alpha: np.ndarray
    C: float
    u: np.ndarray
    c_norm: float
    theta_tilt: np.ndarray
    ell: Direction

    @property
    def d(self):
        return self.y.size

    @property
    def drift_ell(self):
        """``<y, ell>``."""
        return float(self.y[self.ell.axis - 1] * self.ell.sign)

    @property
    def log_sqrt_C(self):
        return 0.5 * float(np.log(self.C))

    def to_record(self):
        """Structured-text record with keys ``C, u, c_norm, theta_tilt, ell``."""
        fmt = lambda v: ", ".join(f"{x:.12g}" for x in v)
        return "\n".join(
            [
                f"y = {fmt(self.y)}",
                f"alpha = {fmt(self.alpha)}",
                f"C = {self.C:.12g}",
                f"u = {fmt(self.u)}",
                f"c_norm = {self.c_norm:.12g}",
                f"theta_tilt = {fmt(self.theta_tilt)}",
                f"ell = {self.ell}",
            ]
        )


def build_params(y, alpha):
    """Build :class:`AuxWalkParams` for a nonzero velocity ``y``."""
    alpha = check_prob_vector(alpha, strictly_positive=True, name="alpha")
    d = alpha.size // 2
    y = check_velocity(y, d)
    C = solve_C(y, alpha)
    plus, minus = _split_alpha(alpha)
    root = np.sqrt(y * y + 4.0 * C * plus * minus)
    u = np.empty(2 * d)
    u[0::2] = 0.5 * y + 0.5 * root
    u[1::2] = -0.5 * y + 0.5 * root
    theta = np.log(u[0::2] / (plus * np.sqrt(C)))
    c_norm = 1.0 / float(np.sum(u / alpha))
    for arr in (y, alpha, u, theta):
        arr.setflags(write=False)
    return AuxWalkParams(y, alpha, C, u, c_norm, theta, choose_ell(y))


def q_step_sample(params, rng, size=None):
    """Draw direction indices with law ``u`` (CDF inversion on ``rng.random``)."""
    cdf = np.cumsum(params.u)
    cdf[-1] = 1.0
    draws = rng.random(size)
    out = np.searchsorted(cdf, draws, side="right")
    return int(out) if size is None else out.astype(np.int64)


def path_from_vectors(steps_xy):
    """Convert an ``(n, d)`` array of unit steps to direction indices; rejects other jumps."""
    steps_xy = np.atleast_2d(np.asarray(steps_xy))
    if steps_xy.size == 0:
        return np.zeros(0, dtype=np.int64)
    if np.any(np.abs(steps_xy).sum(axis=1) != 1):
        raise ValidationError("path has a non-nearest-neighbor step")
    axis = np.argmax(np.abs(steps_xy), axis=1)
    sign = steps_xy[np.arange(len(axis)), axis]
    return (2 * axis + (sign < 0)).astype(np.int64)


def qu_path_log_prob(params, path):
    """Log-probability of a path under the normalized measure ``c_norm * u / alpha``.

    ``path`` is a sequence of direction indices, or an ``(n+1, d)`` array of
    positions starting at the origin.  Returns ``(direct, closed_form)``:
    the per-step sum of logs and ``n log(c_norm sqrt(C)) + <theta_tilt, x_n>``.
    """
    steps = np.asarray(path)
    if steps.ndim == 2:
        if steps.shape[0] == 0 or np.any(steps[0] != 0):
            raise ValidationError("position path must start at the origin")
        steps = path_from_vectors(np.diff(steps, axis=0))
    steps = steps.astype(np.int64).reshape(-1)
    if np.any((steps < 0) | (steps >= 2 * params.d)):
        raise ValidationError("direction index out of range")
    n = steps.size
    log_ratio = np.log(params.c_norm * params.u / params.alpha)
    direct = float(np.sum(log_ratio[steps]))
    endpoint = direction_vectors(params.d)[steps].sum(axis=0) if n else np.zeros(params.d)
    closed = n * (np.log(params.c_norm) + params.log_sqrt_C) + float(params.theta_tilt @ endpoint)
    return direct, float(closed)


def log_step_mgf(params, theta):
    """``log sum_e u(e) exp(<theta, e>)``: the log-MGF of one auxiliary step."""
    theta = np.asarray(theta, dtype=float)
    t = np.repeat(theta, 2) * np.tile([1.0, -1.0], params.d)
    m = t.max()
    return float(m + np.log(np.sum(params.u * np.exp(t - m))))


def gamblers_ruin_bound(params):
    """Closed-form lower bound ``1 - q/p`` on the probability of never backtracking."""
    v = params.drift_ell
    q = -0.5 * v + 0.5 * np.sqrt(v * v + 1.0)
    return float(1.0 - q / (1.0 - q))


def azuma_tail(params, k):
    """``exp(-k <y,ell>^2 / 8)``."""
    return float(np.exp(-k * params.drift_ell**2 / 8.0))


def confirmation_bias_bound(params, K):
    """Bound on the chance a level confirmed after ``K`` further levels is later undershot."""
    a = params.drift_ell**2 / 8.0
    return float(np.exp(-K * a) / -np.expm1(-a))


def default_confirm_window(params, target=1e-9):
    """Smallest ``K`` whose confirmation bias bound is below ``target``."""
    a = params.drift_ell**2 / 8.0
    K = int(np.ceil((-np.log(target) - np.log(-np.expm1(-a))) / a))
    K = max(K, 1)
    while K > 1 and confirmation_bias_bound(params, K - 1) < target:
        K -= 1
    while confirmation_bias_bound(params, K) >= target:
        K += 1
    return K
