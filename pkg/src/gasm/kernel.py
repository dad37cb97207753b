"""A priori speed fields: kernel smoothing along characteristic wave speeds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import GridSpec, ObservationMask, SpeedField, _check_same_grid

KMH_TO_MS = 1.0 / 3.6

KERNEL_SHAPES = ("exponential", "gaussian")


@dataclass(frozen=True)
class KernelParams:
    """Smoothing widths and kernel shape.

    Parameters
    ----------
    sigma : float
        Space smoothing width (m).
    tau : float
        Time smoothing width (s).
    kernel_shape : {"exponential", "gaussian"}
    cutoff_radius : float
        The kernel is exactly zero once ``|dx| > cutoff_radius * sigma`` or
        ``|dt| > cutoff_radius * tau``.
    """

    sigma: float
    tau: float
    kernel_shape: str = "exponential"
    cutoff_radius: float = 6.0

    def __post_init__(self):
        if not (self.sigma > 0 and self.tau > 0):
            raise ValueError(f"smoothing widths must be positive (sigma={self.sigma}, tau={self.tau})")
        if not self.cutoff_radius > 0:
            raise ValueError("cutoff_radius must be positive")
        if self.kernel_shape not in KERNEL_SHAPES:
            raise ValueError(f"kernel_shape must be one of {KERNEL_SHAPES}, got {self.kernel_shape!r}")


def default_kernel_params(grid: GridSpec, mask: ObservationMask, kernel_shape="exponential",
                          cutoff_radius=6.0) -> KernelParams:
    """Half the mean spacing between observed rows for ``sigma`` and half the
    sampling interval (one grid step) for ``tau``.

    With a single observed row the road length stands in for the spacing.
    """
    rows = mask.observed_rows()
    if len(rows) == 0:
        raise ValueError("observation mask is empty: no observed cells")
    spacing = np.diff(rows).mean() * grid.dx if len(rows) > 1 else grid.n_x * grid.dx
    return KernelParams(0.5 * float(spacing), 0.5 * grid.dt, kernel_shape, cutoff_radius)


def kernel_weight(dx, dt_shifted, params: KernelParams):
    """Kernel value at space offset ``dx`` (m) and wave-shifted time offset
    ``dt_shifted`` (s).  Works element-wise on arrays."""
    a = np.abs(np.asarray(dx, dtype=float)) / params.sigma
    b = np.abs(np.asarray(dt_shifted, dtype=float)) / params.tau
    if params.kernel_shape == "exponential":
        w = np.exp(-(a + b))
    else:
        w = np.exp(-0.5 * (a * a + b * b))
    r = params.cutoff_radius
    w = np.where((a > r) | (b > r), 0.0, w)
    return w if w.ndim else float(w)


@dataclass(frozen=True)
class PrioriBank:
    wave_speeds: tuple
    fields: tuple
    params: KernelParams

    def __post_init__(self):
        object.__setattr__(self, "wave_speeds", tuple(float(c) for c in self.wave_speeds))
        object.__setattr__(self, "fields", tuple(self.fields))
        if len(self.wave_speeds) == 0 or len(self.wave_speeds) != len(self.fields):
            raise ValueError("bank needs one field per wave speed and at least one of each")
        grid = self.fields[0].grid
        for f in self.fields:
            _check_same_grid(grid, f.grid)
            if not f.is_dense:
                raise ValueError("a priori fields must be dense")

    @property
    def m(self) -> int:
        return len(self.fields)

    @property
    def grid(self) -> GridSpec:
        return self.fields[0].grid

    def stack(self) -> np.ndarray:
        """``(m, n_x, n_t)`` array of the field values."""
        return np.stack([f.values for f in self.fields])


def _observations(observed: SpeedField, mask: ObservationMask) -> np.ndarray:
    _check_same_grid(observed.grid, mask.grid)
    mask.require_nonempty()
    vals = np.where(mask.mask, observed.values, 0.0)
    if np.any(np.isnan(vals)):
        raise ValueError("observed field is missing values at masked cells")
    return vals


def _nearest_fallback(rows_idx, cols_idx, grid, mask, vals, c_ms, params):
    """Value of the nearest observation in scaled distance
    ``|dx|/sigma + |dt_shifted|/tau`` for each requested cell.  Ties resolve
    to the first observation in row-major order."""
    xc, tc = grid.x_centers(), grid.t_centers()
    best = np.full(len(rows_idx), np.inf)
    out = np.zeros(len(rows_idx))
    for r in mask.observed_rows():
        cols = np.flatnonzero(mask.mask[r])
        dxm = xc[rows_idx] - xc[r]
        target = tc[cols_idx] - dxm / c_ms
        pos = np.searchsorted(tc[cols], target)
        lo = np.clip(pos - 1, 0, len(cols) - 1)
        hi = np.clip(pos, 0, len(cols) - 1)
        d_lo = np.abs(tc[cols_idx] - tc[cols[lo]] - dxm / c_ms)
        d_hi = np.abs(tc[cols_idx] - tc[cols[hi]] - dxm / c_ms)
        pick = np.where(d_hi < d_lo, hi, lo)
        dt_best = np.minimum(d_lo, d_hi)
        d = np.abs(dxm) / params.sigma + dt_best / params.tau
        better = d < best
        best = np.where(better, d, best)
        out = np.where(better, vals[r, cols[pick]], out)
    return out


def smooth_along_wave(observed: SpeedField, mask: ObservationMask, c: float,
                      params: KernelParams) -> SpeedField:
    """Normalized kernel average of the observed cells along wave speed ``c`` (km/h).

    Each output cell centre ``(x, t)`` receives
    ``sum_n phi(x - x_n, t - t_n - (x - x_n)/c) v_n / sum_n phi(...)`` over
    observed cell centres ``(x_n, t_n)``.  Cells whose kernel sum is zero take
    the value of the nearest observation in scaled distance.
    """
    if c == 0:
        raise ValueError("wave speed must be nonzero")
    vals = _observations(observed, mask)
    grid = observed.grid
    c_ms = c * KMH_TO_MS
    xc = grid.x_centers()
    m = mask.mask.astype(float)
    obs_rows = mask.observed_rows()
    num = np.zeros(grid.shape)
    den = np.zeros(grid.shape)
    reach_t = params.cutoff_radius * params.tau
    n_t = grid.n_t
    for j in range(grid.n_x):
        for r in obs_rows:
            dxm = xc[j] - xc[r]
            if abs(dxm) / params.sigma > params.cutoff_radius:
                continue
            shift = dxm / c_ms
            # integer column offsets k - k_n whose shifted time lies inside the cutoff (+1 margin)
            lo = max(int(np.ceil((shift - reach_t) / grid.dt)) - 1, -(n_t - 1))
            hi = min(int(np.floor((shift + reach_t) / grid.dt)) + 1, n_t - 1)
            if lo > hi:
                continue
            offsets = np.arange(lo, hi + 1)
            w = kernel_weight(dxm, offsets * grid.dt - shift, params)
            if not np.any(w):
                continue
            idx = np.arange(n_t) - lo
            ok = (idx >= 0) & (idx < n_t + len(w) - 1)
            num[j, ok] += np.convolve(vals[r], w)[idx[ok]]
            den[j, ok] += np.convolve(m[r], w)[idx[ok]]
    out = np.empty(grid.shape)
    have = den > 0
    out[have] = num[have] / den[have]
    if not np.all(have):
        jj, kk = np.nonzero(~have)
        out[jj, kk] = _nearest_fallback(jj, kk, grid, mask, vals, c_ms, params)
    return SpeedField.unchecked(grid, out)


def build_priori_bank(observed: SpeedField, mask: ObservationMask, wave_speeds: Sequence[float],
                      params: KernelParams) -> PrioriBank:
    if len(wave_speeds) == 0:
        raise ValueError("at least one wave speed is required")
    fields = [smooth_along_wave(observed, mask, c, params) for c in wave_speeds]
    return PrioriBank(tuple(wave_speeds), tuple(fields), params)
