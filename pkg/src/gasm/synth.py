"""Synthetic ground truth with known wave geometry, and an exact reference
solver for the two-field weight problem.

Noise generator
---------------
Noise is drawn from SplitMix64 so that fields are reproducible in any
language.  For output ``i = 1, 2, ...`` the 64-bit state is
``seed + i * 0x9E3779B97F4A7C15`` (mod 2**64), mixed by::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

A uniform in ``[0, 1)`` is ``(z >> 11) * 2**-53``.  Cell ``n`` in row-major
order takes uniforms ``u1 = U[2n]``, ``u2 = U[2n+1]`` and the standard normal
``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` (Box-Muller, cosine branch only).

Why the two-field oracle is exact
---------------------------------
The misfit ``sum over observed cells of (sum_i W^i Z^i - Z)^2`` and the
constraint ``sum_i W^i = 1`` have no terms coupling different cells, so the
problem splits into one independent problem per cell.  With two fields the
constraint leaves one free scalar ``w`` per cell and the cell misfit
``(w z1 + (1 - w) z2 - z)^2`` is a 1-D quadratic minimised by
``w = (z - z2) / (z1 - z2)``; it reaches zero whenever ``z1 != z2``.  When
``z1 == z2`` every ``w`` is optimal and the tie rule picks ``1/2``.  Unobserved
cells carry no misfit at all, so any feasible weight is optimal there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .admm import WeightBank
from .grid import GridSpec, ObservationMask, SpeedField, _check_same_grid
from .kernel import KMH_TO_MS, PrioriBank

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` SplitMix64 outputs for ``seed`` as ``uint64``."""
    i = np.arange(1, n + 1, dtype=np.uint64)
    z = np.uint64(seed & _MASK64) + i * _GAMMA
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def uniforms(seed: int, n: int) -> np.ndarray:
    return (splitmix64(seed, n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def standard_normals(seed: int, n: int) -> np.ndarray:
    u = uniforms(seed, 2 * n).reshape(n, 2)
    return np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])


@dataclass(frozen=True)
class WaveBand:
    """Congestion band centred on ``x = start_x + speed/3.6 * (t - start_t)``."""

    start_x: float  # m
    start_t: float  # s
    speed: float  # km/h, signed
    half_width: float  # m, measured along x

    def __post_init__(self):
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")


@dataclass(frozen=True)
class SyntheticSpec:
    grid: GridSpec
    free_speed: float = 80.0
    congested_speed: float = 20.0
    wave_segments: tuple = field(default_factory=tuple)
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "wave_segments", tuple(self.wave_segments))
        if not self.free_speed > self.congested_speed >= 0:
            raise ValueError("need free_speed > congested_speed >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def congestion_mask(spec: SyntheticSpec) -> np.ndarray:
    """Cells whose centre lies within ``half_width`` (along x) of a band line."""
    g = spec.grid
    x = g.x_centers()[:, None]
    t = g.t_centers()[None, :]
    inside = np.zeros(g.shape, dtype=bool)
    for band in spec.wave_segments:
        line = band.start_x + band.speed * KMH_TO_MS * (t - band.start_t)
        inside |= np.abs(x - line) <= band.half_width
    return inside


def generate_field(spec: SyntheticSpec) -> SpeedField:
    values = np.where(congestion_mask(spec), spec.congested_speed, spec.free_speed).astype(float)
    if spec.noise_std > 0:
        noise = standard_normals(spec.seed, values.size).reshape(values.shape)
        values = np.maximum(values + spec.noise_std * noise, 0.0)
    return SpeedField(spec.grid, values)


def demo_spec(seed: int = 7) -> SyntheticSpec:
    """40 x 200 grid (10 m x 2 s cells) with one congestion band travelling
    upstream at -15 km/h through 80 km/h free flow, 2 km/h noise."""
    grid = GridSpec(x_min=0.0, t_min=0.0, dx=10.0, dt=2.0, n_x=40, n_t=200)
    band = WaveBand(start_x=400.0, start_t=60.0, speed=-15.0, half_width=60.0)
    return SyntheticSpec(grid, free_speed=80.0, congested_speed=20.0,
                         wave_segments=(band,), noise_std=2.0, seed=seed)


def brute_force_weights(observed: SpeedField, mask: ObservationMask, bank: PrioriBank) -> WeightBank:
    """Exact per-cell optimum of the two-field weight problem (see module notes)."""
    if bank.m != 2:
        raise ValueError("brute-force oracle covers exactly two a priori fields")
    _check_same_grid(observed.grid, mask.grid)
    z1, z2 = (f.values for f in bank.fields)
    z = np.where(mask.mask, observed.values, 0.0)
    diff = z1 - z2
    w = np.full(z1.shape, 0.5)
    solvable = mask.mask & (diff != 0)
    w[solvable] = (z[solvable] - z2[solvable]) / diff[solvable]
    return WeightBank((w, 1.0 - w))
