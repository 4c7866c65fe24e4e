"""Immigration schedule: the alternating time grid and uniform seed centers.

The grid is {k eps/2 : 1 <= k <= 2 N} with N = floor(1/eps); odd k are the
U-population seed times s_i = (2i-1) eps/2 and even k the V-population times
t_j = j eps.  Seed centers are i.i.d. uniform on [0, 1], reproducible from the
schedule seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ImmigrationSchedule:
    epsilon: float
    seed: int
    n_seeds: int
    u_times: np.ndarray = field(repr=False)
    v_times: np.ndarray = field(repr=False)
    u_centers: np.ndarray = field(repr=False)
    v_centers: np.ndarray = field(repr=False)

    def grid_times(self) -> np.ndarray:
        """G_eps = {k eps/2 : 1 <= k <= 2 N}, sorted; odd slots are u_times."""
        out = np.empty(2 * self.n_seeds)
        out[0::2] = self.u_times
        out[1::2] = self.v_times
        return out


def make_schedule(epsilon: float, seed: int) -> ImmigrationSchedule:
    """Build the schedule for a given epsilon; centers are drawn from a
    counter-based generator keyed by seed, so the same seed always reproduces
    the same centers."""
    if not 0.0 < epsilon <= 1.0:
        raise ValueError(f"epsilon must be in (0, 1], got {epsilon}")
    n = math.floor(1.0 / epsilon)
    i = np.arange(1, n + 1, dtype=float)
    u_times = (2.0 * i - 1.0) * epsilon / 2.0
    v_times = i * epsilon
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    u_centers = rng.uniform(0.0, 1.0, n)
    v_centers = rng.uniform(0.0, 1.0, n)
    return ImmigrationSchedule(
        float(epsilon), int(seed), n, u_times, v_times, u_centers, v_centers
    )
