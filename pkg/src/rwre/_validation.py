"""Input validation helpers shared by the modules and the estimators."""

import numpy as np

from .errors import ValidationError

PROB_TOL = 1e-12


def check_prob_vector(p, d=None, name="probability vector", strictly_positive=False):
    """Return ``p`` as a float array after checking it is a probability vector on 2d directions."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size < 2 or p.size % 2:
        raise ValidationError(f"{name} must be a flat array with 2d entries, got shape {p.shape}")
    if d is not None and p.size != 2 * d:
        raise ValidationError(f"{name} must have {2 * d} entries for d={d}, got {p.size}")
    if not np.all(np.isfinite(p)):
        raise ValidationError(f"{name} has non-finite entries")
    if np.any(p < 0):
        raise ValidationError(f"{name} has negative entries")
    if strictly_positive and np.any(p <= 0):
        raise ValidationError(f"{name} must be strictly positive")
    if abs(p.sum() - 1.0) > PROB_TOL:
        raise ValidationError(f"{name} must sum to 1 (sum={p.sum():.15g})")
    return p


def check_vector(v, d=None, name="vector"):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1)
    if v.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional, got shape {v.shape}")
    if d is not None and v.size != d:
        raise ValidationError(f"{name} must have {d} components, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} has non-finite entries")
    return v


def check_velocity(y, d=None, allow_zero=False):
    """Velocity must lie in the open l1 unit ball (and be nonzero unless ``allow_zero``)."""
    y = check_vector(y, d, "y")
    l1 = np.abs(y).sum()
    if l1 >= 1.0:
        raise ValidationError(f"|y|_1 must be < 1, got {l1:.15g}")
    if not allow_zero and l1 == 0.0:
        raise ValidationError("y must be nonzero")
    return y


def check_positive_int(n, name, minimum=1):
    if isinstance(n, (bool, np.bool_)) or int(n) != n:
        raise ValidationError(f"{name} must be an integer")
    n = int(n)
    if n < minimum:
        raise ValidationError(f"{name} must be >= {minimum}, got {n}")
    return n
