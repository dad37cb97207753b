"""Error metrics and parameter sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .grid import ObservationMask, SpeedField, _check_same_grid, detector_mask, equally_spaced_detectors
from .pipeline import EstimationConfig, Estimate, negative_cells, run_estimation


@dataclass(frozen=True)
class EvalReport:
    relative_error: float
    cell_count: int
    per_region_errors: dict = field(default_factory=dict)
    negative_speed_cells: int = 0


def relative_error(estimate: SpeedField, truth: SpeedField, region: Optional[np.ndarray] = None) -> float:
    """``||estimate - truth||_F / ||truth||_F`` over all cells (or a boolean region)."""
    _check_same_grid(estimate.grid, truth.grid)
    diff = estimate.values - truth.values
    ref = truth.values
    if region is not None:
        diff = diff[region]
        ref = ref[region]
    denom = np.linalg.norm(ref)
    if denom == 0:
        raise ValueError("undefined relative error: truth has zero norm")
    return float(np.linalg.norm(diff) / denom)


def evaluate(estimate: SpeedField, truth: SpeedField, v_thr: float = 60.0) -> EvalReport:
    """Headline error plus congested (truth < ``v_thr``) and free-flow region errors."""
    regions = {}
    congested = truth.values < v_thr
    for label, region in (("congested", congested), ("free", ~congested)):
        if region.any() and np.any(truth.values[region] != 0):
            regions[label] = relative_error(estimate, truth, region)
    return EvalReport(relative_error(estimate, truth), truth.values.size, regions, negative_cells(estimate))


@dataclass(frozen=True)
class SweepPoint:
    key: float  # detector count or number of wave speeds
    relative_error: float
    objective: Optional[float] = None
    converged: Optional[bool] = None
    iters: Optional[int] = None


def _point(key, est: Estimate, truth: SpeedField) -> SweepPoint:
    err = relative_error(est.field, truth)
    if est.admm is None:
        return SweepPoint(key, err)
    return SweepPoint(key, err, est.admm.objective, est.admm.converged, est.admm.iters)


def coverage_sweep(truth: SpeedField, detector_counts: Sequence[int], method: str,
                   config: EstimationConfig) -> list[SweepPoint]:
    """One run per detector count with equally spaced detectors; input order kept."""
    if len(detector_counts) == 0:
        raise ValueError("detector_counts must not be empty")
    out = []
    for count in detector_counts:
        mask = detector_mask(truth.grid, equally_spaced_detectors(truth.grid, count))
        out.append(_point(count, run_estimation(truth, mask, method, config), truth))
    return out


def speeds_from_pairs(pairs: Sequence[tuple[float, float]]) -> list[float]:
    """``[(c_cong, c_free), ...]`` to a bank order ``[c_free1, c_cong1, c_free2, ...]``."""
    speeds = []
    for c_cong, c_free in pairs:
        speeds.extend([float(c_free), float(c_cong)])
    return speeds


def wavespeed_sweep(truth: SpeedField, mask: ObservationMask, speed_pairs: Sequence[tuple[float, float]],
                    config: EstimationConfig) -> list[SweepPoint]:
    """ADMM run ``k`` uses the first ``k`` (c_cong, c_free) pairs; key is the
    number of wave speeds ``2k``."""
    if len(speed_pairs) == 0:
        raise ValueError("speed_pairs must not be empty")
    out = []
    for k in range(1, len(speed_pairs) + 1):
        speeds = speeds_from_pairs(speed_pairs[:k])
        est = run_estimation(truth, mask, "admm", config.with_speeds(speeds))
        out.append(_point(len(speeds), est, truth))
    return out


SWEEP_COLUMNS = ("key", "relative_error", "objective", "converged", "iters")


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Tab-separated table with a header line; floats written with ``repr``."""
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        return str(v)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
