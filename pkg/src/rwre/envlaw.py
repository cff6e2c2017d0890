"""Environmental laws, lazily realized environments and annealed path moments.

Directions are encoded by integer index ``k`` in ``0..2d-1``: axis ``k // 2``
(zero-based) with sign ``+`` for even ``k`` and ``-`` for odd ``k``.  So for
``d = 2`` the order is ``(+e1, -e1, +e2, -e2)`` and negation is ``k ^ 1``.
"""

from dataclasses import dataclass, field
from itertools import product
from typing import NamedTuple

import numpy as np
from numba import njit

from ._validation import PROB_TOL, check_prob_vector
from .errors import ValidationError

ZERO_DISORDER = "zero"
TILT_MIXTURE = "tilt"


class Direction(NamedTuple):
    """A unit lattice vector ``sign * e_axis`` with a one-based axis."""

    axis: int
    sign: int

    @property
    def index(self):
        return 2 * (self.axis - 1) + (0 if self.sign > 0 else 1)

    @classmethod
    def from_index(cls, k):
        k = int(k)
        return cls(k // 2 + 1, 1 if k % 2 == 0 else -1)

    def __neg__(self):
        return Direction(self.axis, -self.sign)

    def vector(self, d):
        v = np.zeros(d, dtype=np.int64)
        v[self.axis - 1] = self.sign
        return v

    def __str__(self):
        return f"{'+' if self.sign > 0 else '-'}e{self.axis}"


def all_directions(d):
    return [Direction.from_index(k) for k in range(2 * d)]


def direction_vectors(d):
    """``(2d, d)`` integer array whose row ``k`` is the direction with index ``k``."""
    out = np.zeros((2 * d, d), dtype=np.int64)
    for k in range(2 * d):
        out[k, k // 2] = 1 if k % 2 == 0 else -1
    return out


def parse_direction(text):
    """Parse ``"+e1"`` / ``"-e2"`` into a :class:`Direction`."""
    text = text.strip()
    if len(text) < 3 or text[0] not in "+-" or text[1] != "e":
        raise ValidationError(f"cannot parse direction {text!r}")
    return Direction(int(text[2:]), 1 if text[0] == "+" else -1)


@dataclass(frozen=True, eq=False)
class EnvironmentalLaw:
    """Finitely supported i.i.d. site law.

    ``atoms[k]`` is a probability vector on the 2d directions, drawn with
    probability ``probs[k]`` independently at every site.
    """

    d: int
    family: str
    atoms: np.ndarray
    probs: np.ndarray
    alpha: np.ndarray = field(init=False)
    kappa: float = field(init=False)
    epsilon: float = field(init=False)

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        probs = np.asarray(self.probs, dtype=float).reshape(-1)
        if atoms.shape != (probs.size, 2 * self.d):
            raise ValidationError(
                f"atoms must have shape ({probs.size}, {2 * self.d}), got {atoms.shape}"
            )
        if np.any(probs <= 0) or abs(probs.sum() - 1.0) > PROB_TOL:
            raise ValidationError("atom probabilities must be positive and sum to 1")
        for row in atoms:
            check_prob_vector(row, self.d, "atom", strictly_positive=True)
        alpha = probs @ atoms
        ratios = atoms / alpha
        eps = float(np.max(np.abs(ratios - 1.0)))
        if eps >= 1.0:
            raise ValidationError(f"disorder must be < 1, got {eps:.6g}")
        atoms.setflags(write=False)
        probs.setflags(write=False)
        alpha.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "kappa", float(atoms.min()))
        object.__setattr__(self, "epsilon", eps)

    @property
    def n_atoms(self):
        return self.probs.size

    @property
    def log_xi_atoms(self):
        """``(n_atoms, 2d)`` array of ``log(omega_k(e) / alpha(e))``."""
        return np.log(self.atoms / self.alpha)

    @property
    def cdf(self):
        c = np.cumsum(self.probs)
        c[-1] = 1.0
        return c

    def __eq__(self, other):
        if not isinstance(other, EnvironmentalLaw):
            return NotImplemented
        return (
            self.d == other.d
            and self.family == other.family
            and np.array_equal(self.atoms, other.atoms)
            and np.array_equal(self.probs, other.probs)
        )

    def __hash__(self):
        return hash((self.d, self.family, self.atoms.tobytes(), self.probs.tobytes()))

    def to_record(self):
        """Canonical ``key = value`` lines describing the law exactly."""
        lines = [
            f"law.family = {self.family}",
            f"law.d = {self.d}",
            f"law.alpha = {_fmt_vec(self.alpha)}",
            f"law.epsilon = {self.epsilon!r}",
            f"law.kappa = {self.kappa!r}",
            f"law.n_atoms = {self.n_atoms}",
        ]
        for k in range(self.n_atoms):
            lines.append(f"law.atom{k} = {float(self.probs[k])!r} : {_fmt_vec(self.atoms[k])}")
        return "\n".join(lines)


def _fmt_vec(v):
    return ", ".join(repr(float(x)) for x in v)


def zero_disorder(alpha):
    """The deterministic law with ``omega(x) = alpha`` at every site."""
    alpha = check_prob_vector(alpha, strictly_positive=True, name="alpha")
    return EnvironmentalLaw(alpha.size // 2, ZERO_DISORDER, alpha[None, :], np.ones(1))


def _balanced_sign_patterns(alpha):
    """Sign vectors ``s`` in {-1, +1}^{2d} with ``sum(alpha * s) == 0``."""
    m = alpha.size
    if m > 16:
        return []
    out = []
    for signs in product((1.0, -1.0), repeat=m):
        s = np.array(signs)
        if abs(alpha @ s) <= 1e-14:
            out.append(s)
    return out


def make_tilt_mixture(alpha, epsilon, num_atoms=2, rng_seed=0):
    """Mixture law with mean exactly ``alpha`` and disorder exactly ``epsilon``.

    Atoms come in mirrored pairs ``alpha * (1 + epsilon * s)`` and
    ``alpha * (1 - epsilon * s)`` of equal probability, with
    ``sum(alpha * s) = 0`` and ``max|s| = 1``.  When ``alpha`` admits a
    balanced sign pattern every coordinate is perturbed by exactly
    ``+-epsilon``; otherwise ``s`` is a random direction projected onto the
    constraint and rescaled.
    """
    alpha = check_prob_vector(alpha, strictly_positive=True, name="alpha")
    epsilon = float(epsilon)
    if not 0.0 <= epsilon < 1.0:
        raise ValidationError(f"epsilon must be in [0,1), got {epsilon}")
    if epsilon == 0.0:
        return zero_disorder(alpha)
    num_atoms = int(num_atoms)
    if num_atoms < 2 or num_atoms % 2:
        raise ValidationError("num_atoms must be an even integer >= 2 when epsilon > 0")
    rng = np.random.default_rng(np.random.SeedSequence(int(rng_seed), spawn_key=(0x7E57,)))
    patterns = _balanced_sign_patterns(alpha)
    atoms = []
    for _ in range(num_atoms // 2):
        if patterns:
            s = patterns[rng.integers(len(patterns))]
        else:
            v = rng.standard_normal(alpha.size)
            v = v - alpha @ v
            s = v / np.max(np.abs(v))
        atoms.append(alpha * (1.0 + epsilon * s))
        atoms.append(alpha * (1.0 - epsilon * s))
    atoms = np.array(atoms)
    # renormalize rounding residue only; the perturbation sums to zero exactly in theory
    atoms /= atoms.sum(axis=1, keepdims=True)
    law = EnvironmentalLaw(alpha.size // 2, TILT_MIXTURE, atoms, np.full(num_atoms, 1.0 / num_atoms))
    if abs(law.epsilon - epsilon) > 1e-12 or np.max(np.abs(law.alpha - alpha)) > 1e-12:
        raise ValidationError("tilt mixture construction lost exactness")
    return law


def mixture(atoms, probs, family=TILT_MIXTURE):
    atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
    return EnvironmentalLaw(atoms.shape[1] // 2, family, atoms, probs)


def disorder_of(law):
    """Exact ``max_{k,e} |omega_k(e)/alpha(e) - 1|`` over the atom table."""
    return float(np.max(np.abs(law.atoms / law.alpha - 1.0)))


def h_of(x):
    """``log((1+x)/(1-x))`` on ``[0, 1)``."""
    x = float(x)
    if not 0.0 <= x < 1.0:
        raise ValidationError(f"h is defined on [0,1), got {x}")
    return float(np.log1p(x) - np.log1p(-x))


# -- counter-based site hashing ------------------------------------------------

@njit(cache=True)
def _splitmix64(z):
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def site_uniform(seed, site):
    """Uniform in [0, 1) that is a pure function of ``(seed, site)``."""
    h = _splitmix64(np.uint64(seed))
    for i in range(site.shape[0]):
        h = _splitmix64(h ^ np.uint64(site[i]) ^ (np.uint64(i + 1) << np.uint64(58)))
    return np.float64(h >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def site_atom(seed, site, cdf):
    if cdf.shape[0] == 1:
        return 0
    u = site_uniform(seed, site)
    k = 0
    while k < cdf.shape[0] - 1 and u >= cdf[k]:
        k += 1
    return k


@njit(cache=True)
def atoms_for_sites(seed, sites, cdf):
    out = np.empty(sites.shape[0], dtype=np.int64)
    for j in range(sites.shape[0]):
        out[j] = site_atom(seed, sites[j], cdf)
    return out


@njit(cache=True)
def atoms_for_seeds(seeds, site, cdf):
    out = np.empty(seeds.shape[0], dtype=np.int64)
    for j in range(seeds.shape[0]):
        out[j] = site_atom(seeds[j], site, cdf)
    return out


@dataclass(frozen=True)
class Environment:
    """One realization of ``law``, realized lazily site by site."""

    law: EnvironmentalLaw
    seed: int

    def __post_init__(self):
        seed = int(self.seed)
        if not 0 <= seed < 2**64:
            raise ValidationError("environment seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "seed", seed)

    def atom_indices(self, sites):
        sites = np.ascontiguousarray(np.atleast_2d(sites), dtype=np.int64)
        return atoms_for_sites(np.uint64(self.seed), sites, self.law.cdf)

    def weights_array(self, sites):
        """``(m, 2d)`` transition weights at ``m`` sites."""
        return self.law.atoms[self.atom_indices(sites)]

    def weights(self, site):
        return self.weights_array(np.asarray(site, dtype=np.int64)[None, :])[0]


def env_weights(env, site):
    """Transition probability vector ``omega(site)``."""
    return env.weights(site)


def xi(env, site, e):
    """``omega(site, e) / alpha(e)`` for a direction index or :class:`Direction`."""
    k = e.index if isinstance(e, Direction) else int(e)
    return float(env.weights(site)[k] / env.law.alpha[k])


# -- visit counts and annealed moments -----------------------------------------

@dataclass
class VisitCounts:
    """Sparse ``N_{x,e}``: departures from site ``x`` in direction ``e``."""

    d: int
    counts: dict = field(default_factory=dict)

    @classmethod
    def from_steps(cls, steps, d, start=None):
        """Counts along the path starting at ``start`` (origin by default) taking ``steps``."""
        vc = cls(d)
        vecs = direction_vectors(d)
        x = np.zeros(d, dtype=np.int64) if start is None else np.asarray(start, dtype=np.int64).copy()
        for k in steps:
            vc.add(tuple(x), int(k))
            x += vecs[int(k)]
        return vc

    def add(self, site, k, n=1):
        arr = self.counts.get(site)
        if arr is None:
            arr = np.zeros(2 * self.d, dtype=np.int64)
            self.counts[site] = arr
        arr[k] += n

    def merged(self, other):
        out = VisitCounts(self.d, {s: a.copy() for s, a in self.counts.items()})
        for s, a in other.counts.items():
            for k in np.nonzero(a)[0]:
                out.add(s, int(k), int(a[k]))
        return out

    @property
    def total(self):
        return int(sum(a.sum() for a in self.counts.values()))

    def as_matrix(self):
        """``(n_sites, 2d)`` count matrix (site order is insertion order)."""
        if not self.counts:
            return np.zeros((0, 2 * self.d), dtype=np.int64)
        return np.array(list(self.counts.values()))


def _log_site_moments(law, count_matrix, log_base):
    # log sum_k p_k prod_e exp(N_e * log_base[k, e]) per site
    expo = count_matrix @ log_base.T + np.log(law.probs)
    m = expo.max(axis=1, keepdims=True)
    return (m[:, 0] + np.log(np.exp(expo - m).sum(axis=1)))


def log_annealed_path_weight(law, counts):
    """``log prod_x E prod_e omega(x,e)^{N_{x,e}}``."""
    mat = counts.as_matrix()
    if mat.shape[0] == 0:
        return 0.0
    return float(_log_site_moments(law, mat, np.log(law.atoms)).sum())


def annealed_path_weight(law, counts):
    """Exact joint moment ``prod_x sum_k p_k prod_e omega_k(e)^{N_{x,e}}``."""
    return float(np.exp(log_annealed_path_weight(law, counts)))


def log_annealed_xi_weight(law, counts):
    """``log E prod xi`` along the counts, i.e. the annealed weight divided by ``prod alpha^N``."""
    mat = counts.as_matrix()
    if mat.shape[0] == 0:
        return 0.0
    return float(_log_site_moments(law, mat, law.log_xi_atoms).sum())
