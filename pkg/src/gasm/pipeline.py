"""One estimation run: mask the truth, smooth along wave speeds, fuse."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .admm import AdmmParams, AdmmResult, TraceCallback, solve
from .asm import AsmParams, asm_estimate, asm_weight
from .grid import ObservationMask, SpeedField, apply_mask
from .kernel import KernelParams, PrioriBank, build_priori_bank, default_kernel_params

METHODS = ("asm", "admm")


@dataclass(frozen=True)
class EstimationConfig:
    """Shared settings for estimation runs and sweeps.

    ``sigma``/``tau`` left as ``None`` resolve per run to half the mean
    detector spacing and half the grid time step.
    """

    wave_speeds: tuple = (80.0, -15.0)
    sigma: Optional[float] = None
    tau: Optional[float] = None
    kernel_shape: str = "exponential"
    cutoff_radius: float = 6.0
    asm: AsmParams = field(default_factory=AsmParams)
    admm: AdmmParams = field(default_factory=AdmmParams)

    def kernel_params(self, mask: ObservationMask) -> KernelParams:
        base = default_kernel_params(mask.grid, mask, self.kernel_shape, self.cutoff_radius)
        return replace(base,
                       sigma=self.sigma if self.sigma is not None else base.sigma,
                       tau=self.tau if self.tau is not None else base.tau)

    def with_speeds(self, speeds: Sequence[float]) -> "EstimationConfig":
        return replace(self, wave_speeds=tuple(float(c) for c in speeds))


@dataclass(frozen=True)
class Estimate:
    method: str
    field: SpeedField
    weights: tuple  # one array per a priori field
    bank: PrioriBank
    admm: Optional[AdmmResult] = None


def run_estimation(truth: SpeedField, mask: ObservationMask, method: str, config: EstimationConfig,
                   trace: TraceCallback | None = None) -> Estimate:
    """Estimate the full field from the cells of ``truth`` selected by ``mask``."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    mask.require_nonempty()
    observed = apply_mask(truth, mask)
    params = config.kernel_params(mask)
    bank = build_priori_bank(observed, mask, config.wave_speeds, params)
    if method == "asm":
        est = asm_estimate(bank, config.asm)
        w_cong = asm_weight(bank.fields[0], bank.fields[1], config.asm)
        return Estimate(method, est, (1.0 - w_cong, w_cong), bank)
    result = solve(observed, mask, bank, config.admm, trace=trace)
    return Estimate(method, result.fused_field, tuple(result.weights.weights), bank, result)


def negative_cells(fld: SpeedField) -> int:
    return int(np.sum(fld.values < 0))
