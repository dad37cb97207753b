"""Generalized adaptive smoothing for traffic speed field reconstruction.

Sparse detector measurements are smoothed along a set of characteristic wave
speeds, and the resulting a priori fields are fused either with the classic
ASM tanh weight or with weights obtained from an ADMM matrix-completion solve.
"""

from .grid import (
    GridSpec,
    ObservationMask,
    SpeedField,
    Trajectory,
    aggregate_trajectories,
    apply_mask,
    detector_mask,
    equally_spaced_detectors,
)
from .kernel import KernelParams, PrioriBank, build_priori_bank, kernel_weight, smooth_along_wave
from .asm import AsmParams, asm_estimate, asm_weight
from .admm import (
    AdmmParams,
    AdmmResult,
    AdmmState,
    DivergenceError,
    WeightBank,
    is_converged,
    objective,
    solve,
    tolerances,
)
from .evaluation import EvalReport, coverage_sweep, relative_error, wavespeed_sweep
from .pipeline import EstimationConfig, run_estimation

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "ObservationMask",
    "SpeedField",
    "Trajectory",
    "aggregate_trajectories",
    "apply_mask",
    "detector_mask",
    "equally_spaced_detectors",
    "KernelParams",
    "PrioriBank",
    "build_priori_bank",
    "kernel_weight",
    "smooth_along_wave",
    "AsmParams",
    "asm_estimate",
    "asm_weight",
    "AdmmParams",
    "AdmmResult",
    "AdmmState",
    "DivergenceError",
    "WeightBank",
    "is_converged",
    "objective",
    "tolerances",
    "solve",
    "EvalReport",
    "coverage_sweep",
    "relative_error",
    "wavespeed_sweep",
    "EstimationConfig",
    "run_estimation",
]
