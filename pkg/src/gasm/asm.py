"""Conventional adaptive smoothing: tanh-weighted blend of a free-flow and a
congested a priori field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import SpeedField, _check_same_grid
from .kernel import PrioriBank


@dataclass(frozen=True)
class AsmParams:
    v_thr: float = 60.0  # km/h
    delta_v: float = 20.0  # km/h

    def __post_init__(self):
        if not (self.v_thr > 0 and self.delta_v > 0):
            raise ValueError(f"v_thr and delta_v must be positive (got {self.v_thr}, {self.delta_v})")


def asm_weight(z_free: SpeedField, z_cong: SpeedField, params: AsmParams) -> np.ndarray:
    """Congested-field weight ``0.5 * (1 + tanh((v_thr - min(z_free, z_cong)) / delta_v))``."""
    _check_same_grid(z_free.grid, z_cong.grid)
    v_min = np.minimum(z_free.values, z_cong.values)
    return 0.5 * (1.0 + np.tanh((params.v_thr - v_min) / params.delta_v))


def asm_estimate(bank: PrioriBank, params: AsmParams) -> SpeedField:
    """Blend ``W * Z_cong + (1 - W) * Z_free`` for a two-field bank ordered
    ``[free, cong]``."""
    if bank.m != 2:
        raise ValueError("ASM requires exactly two a priori fields")
    c_free, c_cong = bank.wave_speeds
    if not (c_free > 0 and c_cong < 0):
        raise ValueError(
            f"ASM expects bank order [free (c>0), cong (c<0)], got wave speeds {bank.wave_speeds}")
    z_free, z_cong = bank.fields
    w = asm_weight(z_free, z_cong, params)
    return SpeedField.unchecked(bank.grid, w * z_cong.values + (1.0 - w) * z_free.values)
