"""Deterministic random streams.

Every random draw in the package comes from :func:`seed_stream`.  The
derivation is::

    Generator(PCG64(SeedSequence(master_seed, spawn_key=(worker_index, stream_index))))

so any implementation with numpy's ``SeedSequence`` hashing and the PCG64
bit generator reproduces identical streams.  ``worker_index`` indexes a fixed
*work unit*, not an OS process: the partition of work into units never depends
on the number of processes, which keeps results invariant to ``workers``.
"""

import numpy as np

GENERATOR_FAMILY = "numpy.PCG64/SeedSequence"

# stream_index values reserved per purpose; units are indexed separately.
STREAM_CYCLES = 1
STREAM_BOOTSTRAP = 2
STREAM_CBAR = 3
STREAM_AZUMA = 4
STREAM_PHI = 5
STREAM_TWO_WALK = 6
STREAM_ENV = 7
STREAM_MISC = 8


def generator_provenance():
    """String naming the generator family and numpy version for output headers."""
    return f"{GENERATOR_FAMILY} (numpy {np.__version__})"


def seed_stream(master_seed, worker_index=0, stream_index=0):
    """Return the random generator for ``(master_seed, worker_index, stream_index)``.

    Identical arguments always produce identical streams; different
    ``worker_index`` or ``stream_index`` values give statistically independent
    streams.
    """
    master_seed = int(master_seed)
    if master_seed < 0:
        raise ValueError("master_seed must be nonnegative")
    ss = np.random.SeedSequence(master_seed, spawn_key=(int(worker_index), int(stream_index)))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(master_seed, *path):
    """Derive a 63-bit integer seed from ``master_seed`` and an integer path.

    Used for environment seeds, which are plain integers rather than
    generator states.
    """
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
