"""Reproducible discretized space-time white noise.

Streams are counter-based (Philox keyed by hashing root_seed with the
(replicate, channel) pair through numpy's SeedSequence), so any stream can be
recreated independently of thread scheduling or the order in which other
streams were consumed.

Discretization convention, used everywhere: a noise field over a step dt has
i.i.d. N(0, dt/dx) cell entries, so the lattice pairing
sum_j phi(x_j) xi_j dx has variance ||phi||_2^2 dt + O(dx).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lattice import GridSpec, LatticeField


@dataclass
class NoiseStream:
    """One independent Gaussian stream identified by (root_seed, replicate,
    channel)."""

    root_seed: int
    replicate: int
    channel: int
    counter: int = 0
    _rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self._rng is None:
            seq = np.random.SeedSequence(
                self.root_seed, spawn_key=(self.replicate, self.channel)
            )
            self._rng = np.random.Generator(np.random.Philox(seq))

    def normals(self, n: int) -> np.ndarray:
        """n standard normal draws; advances the counter."""
        self.counter += int(n)
        return self._rng.standard_normal(n)

    def uniforms(self, n: int) -> np.ndarray:
        self.counter += int(n)
        return self._rng.random(n)

    @property
    def generator(self) -> np.random.Generator:
        """The underlying generator, for non-Gaussian draws that are part of
        the stream's deterministic consumption order."""
        return self._rng


def derive_streams(root_seed: int, replicate: int, n_channels: int) -> list[NoiseStream]:
    """n_channels independent streams with channel ids 0..n_channels-1.

    Pure function of its inputs: the same arguments always produce
    bit-identical streams.
    """
    if n_channels < 1:
        raise ValueError(f"n_channels must be >= 1, got {n_channels}")
    return [NoiseStream(root_seed, replicate, c) for c in range(n_channels)]


def noise_field(stream: NoiseStream, grid: GridSpec, dt: float) -> LatticeField:
    """One white-noise increment field: i.i.d. N(0, dt/dx) per cell."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    scale = math.sqrt(dt / grid.dx)
    return LatticeField(grid, scale * stream.normals(grid.n_cells))


class BlockNoiseSource:
    """Buffered consumer of one NoiseStream for tight inner loops.

    take(n) returns the next n draws of the underlying stream; draws are
    generated in blocks to amortize generator call overhead.  Consumption
    order is part of the replicate's deterministic contract.
    """

    __slots__ = ("stream", "_buf", "_pos", "_block")

    def __init__(self, stream: NoiseStream, block: int = 1 << 14):
        self.stream = stream
        self._block = block
        self._buf = stream.normals(block)
        self._pos = 0

    def take(self, n: int) -> np.ndarray:
        pos = self._pos
        if pos + n <= self._buf.shape[0]:
            self._pos = pos + n
            return self._buf[pos : pos + n]
        parts = [self._buf[pos:]]
        need = n - parts[0].shape[0]
        block = max(self._block, need)
        self._buf = self.stream.normals(block)
        parts.append(self._buf[:need])
        self._pos = need
        return np.concatenate(parts)
