"""Counter-based Gaussian streams for reproducible Monte Carlo.

Every Brownian increment used in this package is a pure function of
(seed, step index, path index).  Draws come from a Philox-4x64 bit
generator whose 256-bit counter encodes the (step, path) record

    counter = step * 2**96 + path * ticks_per_record,

one counter tick yielding four 64-bit words, and uniforms are mapped to
normals with the inverse CDF (never a rejection method, so the word
budget per record is fixed).  Two consequences the rest of the code
relies on:

* simulations are bit-identical for the same seed no matter how paths
  are chunked across workers, because any sub-range of paths reads
  exactly the words it would read inside a larger batch;
* two runs with the same seed share increments (common random numbers)
  even when they differ in horizon, starting point or number of paths,
  as long as the step size matches: the shorter run reads a prefix.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_WORDS_PER_TICK = 4  # Philox-4x64 emits four uint64 per counter tick
_STEP_SHIFT = 96     # path records live below bit 96 of the counter
_MASK64 = (1 << 64) - 1

# stream tags (second key word) keep independent purposes from colliding
STREAM_INCREMENTS = 0


def ticks_per_record(dim: int) -> int:
    """Counter ticks reserved per (path, step) record of `dim` normals."""
    return -(-dim // _WORDS_PER_TICK)


def standard_normals(seed: int, step: int, lo: int, hi: int, dim: int,
                     stream: int = STREAM_INCREMENTS) -> np.ndarray:
    """Standard normal draws for paths ``lo:hi`` at one time step.

    Pure function of (seed, stream, step, path index): the same (path,
    step) record yields the same numbers whatever the requested range.

    Returns an array of shape (hi - lo, dim).
    """
    n = hi - lo
    if n <= 0:
        return np.empty((0, dim))
    tpr = ticks_per_record(dim)
    counter = (int(step) << _STEP_SHIFT) + lo * tpr
    bg = np.random.Philox(key=[int(seed) & _MASK64, int(stream) & _MASK64],
                          counter=counter)
    raw = bg.random_raw(n * tpr * _WORDS_PER_TICK)
    # top 53 bits -> uniform strictly inside (0, 1), then inverse CDF
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    z = ndtri(u).reshape(n, tpr * _WORDS_PER_TICK)
    return np.ascontiguousarray(z[:, :dim])


def validation_rng(tag: int) -> np.random.Generator:
    """Fixed-seed generator for sampled invariant checks.

    Model/driver/terminal validation must be deterministic (identical
    specs yield bit-identical objects), so these checks never consume
    global randomness.
    """
    return np.random.default_rng(np.random.SeedSequence(entropy=0x5EEDC0DE, spawn_key=(tag,)))
