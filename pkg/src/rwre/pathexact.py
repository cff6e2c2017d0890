"""Exact engines for small horizons: path enumeration and lattice dynamic programming.

Two independent code paths compute the same expectations:

* :func:`enumerate_paths_mgf` visits all ``(2d)^n`` paths depth first and
  carries log-weights and visit counts incrementally;
* the dynamic programs sweep a dense box around the origin, either backward
  (:func:`quenched_mgf_dp`) or forward (:func:`forward_tilted_dp`, which also
  yields tilted means and covariances).

Sites of the box are visited in order of increasing l1 norm, so step ``k``
of a sweep touches only the sites reachable in ``k`` (or ``n - k``) steps.
"""

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .auxwalk import AuxWalkParams
from .envlaw import (
    Environment,
    EnvironmentalLaw,
    VisitCounts,
    atoms_for_sites,
    direction_vectors,
    site_atom,
)
from .errors import ResourceError, ValidationError
from ._validation import check_vector

ENUMERATION_GUARD = 10**8
DEFAULT_MEMORY_CAP = 10**9

QUENCHED = "quenched"
ANNEALED = "annealed"

_HOMOGENEOUS, _QUENCHED, _ANNEALED = 0, 1, 2


@dataclass
class LatticePath:
    """Nearest-neighbor path from the origin given by direction indices."""

    steps: np.ndarray
    d: int

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.int64).reshape(-1)
        if np.any((self.steps < 0) | (self.steps >= 2 * self.d)):
            raise ValidationError("direction index out of range")

    @property
    def length(self):
        return self.steps.size

    @property
    def positions(self):
        pos = np.zeros((self.length + 1, self.d), dtype=np.int64)
        if self.length:
            pos[1:] = np.cumsum(direction_vectors(self.d)[self.steps], axis=0)
        return pos

    @property
    def endpoint(self):
        return self.positions[-1]

    @property
    def counts(self):
        return VisitCounts.from_steps(self.steps, self.d)


def _theta_by_direction(theta, d):
    theta = check_vector(theta, d, "theta")
    out = np.empty(2 * d)
    out[0::2] = theta
    out[1::2] = -theta
    return out


# -- enumeration ---------------------------------------------------------------

@njit(cache=True)
def _moment_log(counts_row, log_table, log_probs):
    m = -np.inf
    K = log_table.shape[0]
    vals = np.empty(K)
    for k in range(K):
        s = log_probs[k]
        for e in range(counts_row.shape[0]):
            if counts_row[e]:
                s += counts_row[e] * log_table[k, e]
        vals[k] = s
        if s > m:
            m = s
    acc = 0.0
    for k in range(K):
        acc += np.exp(vals[k] - m)
    return m + np.log(acc)


@njit(cache=True)
def _enumerate_kernel(d, n, step_log, mode, seed, cdf, log_table, log_probs):
    """Sum over all paths of exp(sum step_log[e] + path weight); see enumerate_paths_mgf."""
    m = 2 * d
    if n == 0:
        return 1.0
    pos = np.zeros((n + 1, d), dtype=np.int64)
    slot = np.zeros(n, dtype=np.int64)          # site slot of step j
    site_count = np.zeros((n, m), dtype=np.int64)
    slot_sites = np.zeros((n, d), dtype=np.int64)
    slot_used = 0
    logw = np.zeros(n + 1)
    choice = np.full(n, -1, dtype=np.int64)
    new_slot = np.zeros(n, dtype=np.bool_)
    total = 0.0
    depth = 0
    while depth >= 0:
        # undo previous choice at this depth
        if choice[depth] >= 0:
            site_count[slot[depth], choice[depth]] -= 1
            if new_slot[depth]:
                slot_used -= 1
        choice[depth] += 1
        if choice[depth] >= m:
            choice[depth] = -1
            depth -= 1
            continue
        e = choice[depth]
        x = pos[depth]
        # locate or create the slot for site x
        s = -1
        for t in range(slot_used):
            same = True
            for a in range(d):
                if slot_sites[t, a] != x[a]:
                    same = False
                    break
            if same:
                s = t
                break
        if s < 0:
            s = slot_used
            for a in range(d):
                slot_sites[s, a] = x[a]
            slot_used += 1
            new_slot[depth] = True
        else:
            new_slot[depth] = False
        slot[depth] = s
        w = step_log[e]
        if mode == 1:
            w += log_table[site_atom(seed, x, cdf), e]
        elif mode == 2:
            before = _moment_log(site_count[s], log_table, log_probs)
            site_count[s, e] += 1
            w += _moment_log(site_count[s], log_table, log_probs) - before
            site_count[s, e] -= 1
        site_count[s, e] += 1
        logw[depth + 1] = logw[depth] + w
        for a in range(d):
            pos[depth + 1, a] = x[a]
        pos[depth + 1, e // 2] += 1 if e % 2 == 0 else -1
        if depth + 1 == n:
            total += np.exp(logw[n])
        else:
            depth += 1
            choice[depth] = -1
            # keep the loop invariant: nothing to undo at a fresh depth
            continue
    return total


def _check_guard(d, n, guard=ENUMERATION_GUARD):
    if n < 0:
        raise ValidationError("n must be nonnegative")
    if (2 * d) ** n > guard:
        raise ResourceError(f"(2d)^n = {(2 * d) ** n} paths exceeds the enumeration guard {guard}")


def enumerate_paths_mgf(d, n, step_log, mode=_HOMOGENEOUS, env=None, log_table=None, law=None):
    """Exact sum over all length-``n`` paths from the origin.

    Each path contributes ``exp(sum_j step_log[e_j])`` times a path weight:
    nothing (``mode=0``), ``prod_j exp(log_table[atom(x_{j-1}), e_j])`` in the
    environment ``env`` (``mode=1``), or the exact mixture moment
    ``prod_x sum_k p_k exp(sum_e N_{x,e} log_table[k, e])`` (``mode=2``).
    """
    _check_guard(d, n)
    step_log = np.asarray(step_log, dtype=float)
    if mode == _QUENCHED:
        seed, cdf = np.uint64(env.seed), env.law.cdf
        probs = env.law.probs
    elif mode == _ANNEALED:
        seed, cdf, probs = np.uint64(0), law.cdf, law.probs
    else:
        seed, cdf, probs = np.uint64(0), np.ones(1), np.ones(1)
        log_table = np.zeros((1, 2 * d))
    return float(
        _enumerate_kernel(d, n, step_log, mode, seed, cdf, np.asarray(log_table, dtype=float), np.log(probs))
    )


def quenched_mgf_enum(env, theta, n):
    """``E_{0,omega} exp(<theta, X_n>)`` by full enumeration."""
    d = env.law.d
    return enumerate_paths_mgf(d, n, _theta_by_direction(theta, d), _QUENCHED, env=env,
                               log_table=np.log(env.law.atoms))


def annealed_mgf_exact(law, theta, n):
    """``E_0 exp(<theta, X_n>)`` under the averaged law, by enumeration with exact moments."""
    d = law.d
    return enumerate_paths_mgf(d, n, _theta_by_direction(theta, d), _ANNEALED, law=law,
                               log_table=np.log(law.atoms))


def perturbed_q_expectation(params, source, theta, n, mode=QUENCHED):
    """``E^Q[exp(<theta, X_n>) * W]`` by enumeration of auxiliary-walk paths.

    ``W`` is ``prod_j xi(X_{j-1}, step_j)`` in the environment ``source``
    (quenched) or its average over the law ``source`` (annealed).
    """
    d = params.d
    step_log = np.log(params.u) + _theta_by_direction(theta, d)
    if mode == QUENCHED:
        if not isinstance(source, Environment):
            raise ValidationError("quenched mode needs an Environment")
        return enumerate_paths_mgf(d, n, step_log, _QUENCHED, env=source,
                                   log_table=source.law.log_xi_atoms)
    if mode == ANNEALED:
        law = source.law if isinstance(source, Environment) else source
        return enumerate_paths_mgf(d, n, step_log, _ANNEALED, law=law, log_table=law.log_xi_atoms)
    raise ValidationError(f"unknown mode {mode!r}")


# -- dense-box dynamic programming ----------------------------------------------

@dataclass
class _Box:
    d: int
    radius: int
    strides: np.ndarray
    order: np.ndarray        # flat indices sorted by l1 norm
    l1_count: np.ndarray     # l1_count[r] = number of sites with l1 norm <= r
    coords: np.ndarray       # (n_sites, d) coordinates


_BOX_CACHE = {}


def _box_bytes(d, radius):
    # order, coords, two buffers, atom index
    return (2 * radius + 1) ** d * (8 * (d + 4))


def _make_box(d, radius, memory_cap=DEFAULT_MEMORY_CAP):
    if _box_bytes(d, radius) > memory_cap:
        raise ResourceError(
            f"box of radius {radius} in d={d} needs ~{_box_bytes(d, radius):.3g} bytes "
            f"(cap {memory_cap:.3g})"
        )
    key = (d, radius)
    if key in _BOX_CACHE:
        return _BOX_CACHE[key]
    side = 2 * radius + 1
    strides = side ** np.arange(d, dtype=np.int64)
    flat = np.arange(side**d, dtype=np.int64)
    coords = (flat[:, None] // strides) % side - radius
    l1 = np.abs(coords).sum(axis=1)
    order = np.argsort(l1, kind="stable")
    l1_count = np.searchsorted(l1[order], np.arange(radius + 1), side="right")
    box = _Box(d, radius, strides.astype(np.int64), order.astype(np.int64), l1_count.astype(np.int64),
               coords.astype(np.int64))
    if len(_BOX_CACHE) > 4:
        _BOX_CACHE.clear()
    _BOX_CACHE[key] = box
    return box


_ATOM_CACHE = {}


def _site_atoms(env, box):
    key = (env.seed, hash(env.law), box.d, box.radius)
    got = _ATOM_CACHE.get(key)
    if got is None:
        got = atoms_for_sites(np.uint64(env.seed), box.coords, env.law.cdf)
        if len(_ATOM_CACHE) > 8:
            _ATOM_CACHE.clear()
        _ATOM_CACHE[key] = got
    return got


@njit(cache=True)
def _backward_kernel(n, order, l1_count, strides, atom_of, weight_table):
    size = atom_of.shape[0]
    cur = np.ones(size)
    nxt = np.empty(size)
    m = weight_table.shape[1]
    log_acc = 0.0
    for k in range(n):
        r = n - k - 1
        cnt = l1_count[r]
        big = 0.0
        for j in range(cnt):
            i = order[j]
            row = weight_table[atom_of[i]]
            s = 0.0
            for e in range(m):
                step = strides[e // 2]
                if e % 2 == 0:
                    s += row[e] * cur[i + step]
                else:
                    s += row[e] * cur[i - step]
            nxt[i] = s
            if s > big:
                big = s
        scale = 1.0 / big
        for j in range(cnt):
            nxt[order[j]] *= scale
        log_acc += np.log(big)
        cur, nxt = nxt, cur
    return log_acc + np.log(cur[order[0]])


def _weight_table(env, theta, base=None):
    d = env.law.d
    tilt = np.exp(_theta_by_direction(theta, d))
    table = env.law.atoms if base is None else base
    return np.ascontiguousarray(table * tilt)


def quenched_log_mgf_dp(env, theta, n, memory_cap=DEFAULT_MEMORY_CAP, table=None):
    """``log E_{0,omega} exp(<theta, X_n>)`` by backward recursion on a dense box.

    Cost is ``O(n (2n+1)^d)`` time and ``O((2n+1)^d)`` memory.
    """
    n = int(n)
    if n < 0:
        raise ValidationError("n must be nonnegative")
    if n == 0:
        return 0.0
    box = _make_box(env.law.d, n, memory_cap)
    atom_of = _site_atoms(env, box)
    weights = _weight_table(env, theta, table)
    return float(_backward_kernel(n, box.order, box.l1_count, box.strides, atom_of, weights))


def quenched_mgf_dp(env, theta, n, memory_cap=DEFAULT_MEMORY_CAP):
    """``E_{0,omega} exp(<theta, X_n>)``; see :func:`quenched_log_mgf_dp` for large ``n``."""
    return float(np.exp(quenched_log_mgf_dp(env, theta, n, memory_cap)))


@njit(cache=True)
def _forward_kernel(n, order, l1_count, strides, coords, atom_of, weight_table, record):
    size = atom_of.shape[0]
    d = coords.shape[1]
    m = weight_table.shape[1]
    cur = np.zeros(size)
    nxt = np.zeros(size)
    center = order[0]
    cur[center] = 1.0
    log_z = np.zeros(n + 1)
    n_rec = 0
    for k in range(n + 1):
        if record[k]:
            n_rec += 1
    means = np.zeros((n_rec, d))
    covs = np.zeros((n_rec, d, d))
    rec = 0
    log_acc = 0.0
    for k in range(n + 1):
        if record[k]:
            cnt = l1_count[k]
            tot = 0.0
            mu = np.zeros(d)
            sec = np.zeros((d, d))
            for j in range(cnt):
                i = order[j]
                v = cur[i]
                if v == 0.0:
                    continue
                tot += v
                for a in range(d):
                    xa = coords[i, a]
                    mu[a] += v * xa
                    for b in range(a + 1):
                        sec[a, b] += v * xa * coords[i, b]
            for a in range(d):
                means[rec, a] = mu[a] / tot
            for a in range(d):
                for b in range(a + 1):
                    c = sec[a, b] / tot - means[rec, a] * means[rec, b]
                    covs[rec, a, b] = c
                    covs[rec, b, a] = c
            rec += 1
        cnt_now = l1_count[k]
        tot = 0.0
        for j in range(cnt_now):
            tot += cur[order[j]]
        log_z[k] = log_acc + np.log(tot)
        if k == n:
            break
        cnt_next = l1_count[k + 1]
        for j in range(cnt_next):
            nxt[order[j]] = 0.0
        big = 0.0
        for j in range(cnt_now):
            i = order[j]
            v = cur[i]
            if v == 0.0:
                continue
            row = weight_table[atom_of[i]]
            for e in range(m):
                step = strides[e // 2]
                t = i + step if e % 2 == 0 else i - step
                nxt[t] += v * row[e]
        for j in range(cnt_next):
            if nxt[order[j]] > big:
                big = nxt[order[j]]
        scale = 1.0 / big
        for j in range(cnt_next):
            nxt[order[j]] *= scale
        log_acc += np.log(big)
        cur, nxt = nxt, cur
    return log_z, means, covs


@dataclass
class ForwardDpResult:
    """Log-partition sequence and tilted endpoint moments of a forward sweep."""

    log_z: np.ndarray                 # log_z[k] = log E exp(<theta, X_k>) for k = 0..n
    record_steps: np.ndarray
    means: np.ndarray                 # tilted mean of X_k at recorded steps
    covariances: np.ndarray

    def moments_at(self, k):
        j = int(np.flatnonzero(self.record_steps == k)[0])
        return self.means[j], self.covariances[j]


def forward_tilted_dp(env, theta, n, record_steps=(), memory_cap=DEFAULT_MEMORY_CAP, table=None):
    """Forward sweep of the tilted measure ``prod omega * exp(<theta, X_k>)``.

    Returns ``log E_{0,omega} exp(<theta, X_k>)`` for every ``k <= n`` and
    the mean and covariance of ``X_k`` under the tilted measure at each of
    ``record_steps``.
    """
    n = int(n)
    if n < 1:
        raise ValidationError("forward sweep needs n >= 1")
    record_steps = np.unique(np.asarray(record_steps, dtype=np.int64))
    if np.any((record_steps < 0) | (record_steps > n)):
        raise ValidationError("record steps must lie in [0, n]")
    box = _make_box(env.law.d, n, memory_cap)
    atom_of = _site_atoms(env, box)
    weights = _weight_table(env, theta, table)
    record = np.zeros(n + 1, dtype=np.bool_)
    record[record_steps] = True
    log_z, means, covs = _forward_kernel(n, box.order, box.l1_count, box.strides, box.coords,
                                         atom_of, weights, record)
    return ForwardDpResult(log_z, record_steps, means, covs)


def perturbed_q_log_dp(params, env, theta, n, memory_cap=DEFAULT_MEMORY_CAP):
    """``log E^Q[exp(<theta, X_n>) prod xi]`` by backward recursion with weights ``u * xi``."""
    table = params.u * np.exp(env.law.log_xi_atoms)
    return quenched_log_mgf_dp(env, theta, n, memory_cap, table=table)


# -- identity verification -----------------------------------------------------

@dataclass
class IdentityReport:
    """Both sides of the quenched and annealed change-of-measure identities."""

    n: int
    theta: np.ndarray
    lhs_q: float
    rhs_q: float
    lhs_a: float
    rhs_a: float
    tolerance: float = 1e-9
    max_rel_err: float = field(init=False)

    def __post_init__(self):
        def rel(a, b):
            scale = max(abs(a), abs(b))
            return abs(a - b) / scale if scale > 0 else 0.0

        self.max_rel_err = max(rel(self.lhs_q, self.rhs_q), rel(self.lhs_a, self.rhs_a))

    @property
    def passed(self):
        return bool(self.max_rel_err < self.tolerance)


def verify_identity_P3(params, env, law, theta, n, tolerance=1e-9):
    """Check the quenched and annealed change-of-measure identities at horizon ``n``.

    Quenched: ``E^Q[e^{<theta,X_n>} prod xi] = C^{n/2} E_{0,omega} e^{<theta+theta_tilt, X_n>}``,
    left side by enumeration, right side by the backward DP.
    Annealed: the same with the environment averaged out, left side by
    enumeration of auxiliary paths with exact xi-moments and right side by
    enumeration of lattice paths with exact omega-moments.
    """
    theta = check_vector(theta, params.d, "theta")
    shifted = theta + params.theta_tilt
    scale = params.C ** (n / 2.0)
    lhs_q = perturbed_q_expectation(params, env, theta, n, QUENCHED)
    rhs_q = scale * quenched_mgf_dp(env, shifted, n)
    lhs_a = perturbed_q_expectation(params, law, theta, n, ANNEALED)
    rhs_a = scale * annealed_mgf_exact(law, shifted, n)
    return IdentityReport(n, theta, lhs_q, rhs_q, lhs_a, rhs_a, tolerance)


# -- finite-horizon quenched estimator ------------------------------------------

@dataclass
class QuenchedDpEstimate:
    """Finite-horizon estimates of the quenched log-MGF.

    ``cesaro`` is ``log Z_n / n``, ``increment`` is ``log Z_n - log Z_{n-1}``
    and ``window`` is ``(log Z_n - log Z_{n//2}) / (n - n//2)``.
    """

    n: np.ndarray
    cesaro: np.ndarray
    increment: np.ndarray
    window: np.ndarray
    log_z: np.ndarray

    def oscillation(self, last=50):
        """Max minus min of the last ``last`` increments."""
        tail = self.increment[-last:]
        return float(tail.max() - tail.min())


def lambda_q_estimate_dp(env, theta, n_list, memory_cap=DEFAULT_MEMORY_CAP):
    """Finite-``n`` estimates of the quenched log-MGF at ``theta`` for each ``n`` in ``n_list``."""
    n_list = np.asarray(n_list, dtype=np.int64).reshape(-1)
    if n_list.size == 0 or np.any(n_list < 1) or np.any(np.diff(n_list) <= 0):
        raise ValidationError("n_list must be a nonempty increasing list of positive integers")
    res = forward_tilted_dp(env, theta, int(n_list[-1]), (), memory_cap)
    log_z = res.log_z
    half = n_list // 2
    return QuenchedDpEstimate(
        n=n_list,
        cesaro=log_z[n_list] / n_list,
        increment=log_z[n_list] - log_z[n_list - 1],
        window=(log_z[n_list] - log_z[half]) / (n_list - half),
        log_z=log_z,
    )
