"""Numerical companion for large deviations of ballistic random walks in random environments.

Modules: :mod:`envlaw` (environment laws), :mod:`auxwalk` (the auxiliary
walk with drift ``y``), :mod:`pathexact` (exact enumeration and lattice DP),
:mod:`regen` (regeneration-cycle Monte Carlo), :mod:`ldp` (log-MGFs and rate
functions) and :mod:`harness` (config, CLI, outputs).
"""

from .auxwalk import AuxWalkParams, build_params
from .envlaw import Environment, EnvironmentalLaw, make_tilt_mixture, zero_disorder
from .errors import ConfigError, ConvergenceError, ResourceError, RwreError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "AuxWalkParams",
    "ConfigError",
    "ConvergenceError",
    "Environment",
    "EnvironmentalLaw",
    "ResourceError",
    "RwreError",
    "ValidationError",
    "build_params",
    "make_tilt_mixture",
    "zero_disorder",
]
