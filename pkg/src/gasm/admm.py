"""ADMM solver for the weight-fusion matrix completion problem.

Find weight fields ``W^1..W^m`` minimising ``0.5 * ||M * (sum_i W^i * Z^i - Z)||_F^2``
subject to ``sum_i W^i = J``, where ``*`` is element-wise, ``M`` the
observation mask, ``Z^i`` the a priori fields and ``J`` the all-ones matrix.
An auxiliary field ``Zh = sum_i W^i * Z^i`` splits the problem; the augmented
Lagrangian is

    0.5 ||M * (Z - Zh)||^2 + <L1, Zh - sum_i W^i Z^i> + beta/2 ||Zh - sum_i W^i Z^i||^2
                           + <L2, sum_i W^i - J>    + beta/2 ||sum_i W^i - J||^2

and every primal block update is an element-wise closed form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numba import njit

from .grid import ObservationMask, SpeedField, _check_same_grid
from .kernel import PrioriBank

logger = logging.getLogger(__name__)

TraceCallback = Callable[[int, float, float, float], None]


class DivergenceError(RuntimeError):
    """Non-finite iterate; ``state`` holds the solver state at failure."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class AdmmParams:
    beta: float = 1.0
    eps_abs: float = 1e-6
    eps_rel: float = 1e-4
    max_iters: int = 5000

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not (self.eps_abs > 0 and self.eps_rel > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass(frozen=True)
class WeightBank:
    weights: tuple

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=float) for w in self.weights))

    @property
    def m(self) -> int:
        return len(self.weights)

    def total(self) -> np.ndarray:
        return _sum(self.weights)

    def __iter__(self):
        return iter(self.weights)

    def __getitem__(self, i):
        return self.weights[i]


@dataclass
class AdmmState:
    z_hat: np.ndarray
    weights: list
    lambda1: np.ndarray
    lambda2: np.ndarray
    iter: int = 0
    primal_residuals: list = field(default_factory=list)
    dual_residuals: list = field(default_factory=list)
    prev_z_hat: Optional[np.ndarray] = None
    prev_weights: Optional[list] = None


@dataclass(frozen=True)
class AdmmResult:
    fused_field: SpeedField
    weights: WeightBank
    converged: bool
    iters: int
    final_residuals: tuple
    objective: float
    state: AdmmState


def _sum(arrays):
    total = np.array(arrays[0], dtype=float, copy=True)
    for a in arrays[1:]:
        total += a
    return total


def fuse(weights, fields) -> np.ndarray:
    """``sum_i W^i * Z^i`` accumulated in index order."""
    if len(weights) != len(fields):
        raise ValueError(f"{len(weights)} weight fields for {len(fields)} a priori fields")
    total = np.asarray(weights[0]) * np.asarray(fields[0])
    for w, z in zip(weights[1:], fields[1:]):
        total = total + np.asarray(w) * np.asarray(z)
    return total


def _fields(bank) -> list:
    if isinstance(bank, PrioriBank):
        return [f.values for f in bank.fields]
    return [np.asarray(z, dtype=float) for z in bank]


def _mask_and_target(observed, mask):
    """Return ``(M, M*Z)`` as float arrays (``nan`` outside the mask is zeroed)."""
    if isinstance(observed, SpeedField) and isinstance(mask, ObservationMask):
        _check_same_grid(observed.grid, mask.grid)
    z = observed.values if isinstance(observed, SpeedField) else np.asarray(observed, dtype=float)
    mk = mask.mask if isinstance(mask, ObservationMask) else np.asarray(mask)
    m = mk.astype(float)
    if z.shape != m.shape:
        raise ValueError(f"shape mismatch: observed {z.shape} vs mask {m.shape}")
    mz = np.where(mk.astype(bool), z, 0.0)
    if np.any(~np.isfinite(mz)):
        raise ValueError("observed field is missing values at masked cells")
    return m, mz


def objective(weights, bank, observed, mask) -> float:
    """Masked misfit ``0.5 * ||M * (sum_i W^i * Z^i - Z)||_F^2``."""
    fields = _fields(bank)
    w = list(weights)
    if len(w) != len(fields) or len(w) == 0:
        raise ValueError(f"{len(w)} weight fields for {len(fields)} a priori fields")
    m, mz = _mask_and_target(observed, mask)
    for a in w + fields:
        if np.shape(a) != m.shape:
            raise ValueError(f"shape mismatch: {np.shape(a)} vs {m.shape}")
    r = m * fuse(w, fields) - mz
    return 0.5 * float(np.sum(r * r))


def augmented_lagrangian(state: AdmmState, bank, observed, mask, beta: float) -> float:
    fields = _fields(bank)
    m, mz = _mask_and_target(observed, mask)
    r_obs = mz - m * state.z_hat
    r1 = state.z_hat - fuse(state.weights, fields)
    r2 = _sum(state.weights) - 1.0
    return float(0.5 * np.sum(r_obs ** 2)
                 + np.sum(state.lambda1 * r1) + 0.5 * beta * np.sum(r1 ** 2)
                 + np.sum(state.lambda2 * r2) + 0.5 * beta * np.sum(r2 ** 2))


def initial_state(bank) -> AdmmState:
    """Uniform weights ``J/m``, ``Zh = sum_i W^i Z^i`` and zero duals."""
    fields = _fields(bank)
    m = len(fields)
    weights = [np.full(fields[0].shape, 1.0 / m) for _ in range(m)]
    zeros = np.zeros(fields[0].shape)
    return AdmmState(fuse(weights, fields), weights, zeros, zeros.copy())


# Array-level kernels; the public wrappers below accept fields/masks objects.

def _z_hat(state, fields, m, mz, beta):
    return (mz - state.lambda1 + beta * fuse(state.weights, fields)) / (m + beta)


def _weight(i, state, fields, beta):
    zi = fields[i]
    others = np.zeros_like(zi)
    for r, (wr, zr) in enumerate(zip(state.weights, fields)):
        if r != i:
            others += wr * (zr * zi + 1.0)
    num = beta * (state.z_hat * zi + 1.0 - others) + state.lambda1 * zi - state.lambda2
    return num / (beta * (zi * zi + 1.0))


def _duals(state, fields, beta):
    lam1 = state.lambda1 + beta * (state.z_hat - fuse(state.weights, fields))
    lam2 = state.lambda2 + beta * (_sum(state.weights) - 1.0)
    return lam1, lam2


def update_z_hat(state: AdmmState, bank, observed, mask, params: AdmmParams) -> np.ndarray:
    """``Zh = (M*Z - L1 + beta * sum_i W^i Z^i) / (M + beta)``; on unobserved
    cells this is ``sum_i W^i Z^i - L1/beta``."""
    m, mz = _mask_and_target(observed, mask)
    return _z_hat(state, _fields(bank), m, mz, params.beta)


def update_weight(i: int, state: AdmmState, bank, params: AdmmParams) -> np.ndarray:
    """Block minimiser of the augmented Lagrangian in ``W^i``, all else fixed::

        W^i = (beta * (Zh Z^i + J - sum_{r!=i} W^r (Z^r Z^i + J)) + L1 Z^i - L2)
              / (beta * (Z^i Z^i + J))
    """
    fields = _fields(bank)
    if not 0 <= i < len(fields):
        raise IndexError(f"weight index {i} out of range for m={len(fields)}")
    return _weight(i, state, fields, params.beta)


def update_duals(state: AdmmState, bank, params: AdmmParams) -> tuple[np.ndarray, np.ndarray]:
    """Gradient ascent: ``L1 += beta (Zh - sum W^i Z^i)``, ``L2 += beta (sum W^i - J)``."""
    return _duals(state, _fields(bank), params.beta)


def residuals(state: AdmmState, bank, beta: float = 1.0) -> tuple[float, float]:
    """Primal residual (constraint violation) and dual residual (beta-scaled
    change of the primal iterates since the previous iteration)."""
    if state.iter == 0 or state.prev_z_hat is None:
        raise ValueError("no iterate yet")
    r_fuse, r_sum = block_residuals(state, bank)
    primal = float(np.hypot(r_fuse, r_sum))
    dz = state.z_hat - state.prev_z_hat
    change = np.sum(dz * dz)
    for w, wp in zip(state.weights, state.prev_weights):
        dw = w - wp
        change += np.sum(dw * dw)
    return primal, float(beta * np.sqrt(change))


def block_residuals(state: AdmmState, bank) -> tuple[float, float]:
    """Frobenius norms of the fusion residual ``Zh - sum_i W^i Z^i`` (speed
    units) and the sum-to-one residual ``sum_i W^i - J`` (unitless)."""
    fields = _fields(bank)
    r1 = state.z_hat - fuse(state.weights, fields)
    r2 = _sum(state.weights) - 1.0
    return float(np.sqrt(np.sum(r1 * r1))), float(np.sqrt(np.sum(r2 * r2)))


def tolerances(state: AdmmState, bank, params: AdmmParams) -> tuple[float, float, float]:
    """Stopping thresholds ``eps_abs * sqrt(count) + eps_rel * scale``.

    The two primal constraint blocks carry different units (speed and
    dimensionless weight), so each gets its own threshold: the fusion block
    is scaled by the larger of ``||Zh||`` and ``||sum_i W^i Z^i||``, the
    sum-to-one block by the larger of ``||sum_i W^i||`` and ``||J||``.  The
    dual count is the number of primal unknowns (``(m + 1) n``) and its scale
    the norm of the constraint-transposed duals.

    Returns
    -------
    eps_fuse, eps_sum, eps_dual : float
    """
    fields = _fields(bank)
    n = state.z_hat.size
    f = fuse(state.weights, fields)
    s = _sum(state.weights)
    eps_fuse = params.eps_abs * np.sqrt(n) + params.eps_rel * max(np.linalg.norm(state.z_hat), np.linalg.norm(f))
    eps_sum = params.eps_abs * np.sqrt(n) + params.eps_rel * max(np.linalg.norm(s), np.sqrt(n))
    scale_d = np.sum(state.lambda1 ** 2)
    for z in fields:
        scale_d += np.sum((state.lambda2 - z * state.lambda1) ** 2)
    eps_d = params.eps_abs * np.sqrt((len(fields) + 1) * n) + params.eps_rel * np.sqrt(scale_d)
    return float(eps_fuse), float(eps_sum), float(eps_d)


def is_converged(state: AdmmState, bank, params: AdmmParams) -> bool:
    """Both primal blocks and the dual residual within their thresholds."""
    r_fuse, r_sum = block_residuals(state, bank)
    _, dual = residuals(state, bank, params.beta)
    eps_fuse, eps_sum, eps_d = tolerances(state, bank, params)
    return r_fuse <= eps_fuse and r_sum <= eps_sum and dual <= eps_d


def _step(state, fields, m, mz, beta):
    state.prev_z_hat = state.z_hat
    state.prev_weights = list(state.weights)
    state.z_hat = _z_hat(state, fields, m, mz, beta)
    for i in range(len(fields)):
        state.weights[i] = _weight(i, state, fields, beta)
    state.lambda1, state.lambda2 = _duals(state, fields, beta)
    state.iter += 1
    p, d = residuals(state, fields, beta)
    state.primal_residuals.append(p)
    state.dual_residuals.append(d)
    return state


def step(state: AdmmState, bank, observed, mask, params: AdmmParams) -> AdmmState:
    """One ADMM sweep: Zh, then W^1..W^m in order (each using the freshest
    weights), then both duals.  Mutates and returns ``state``."""
    m, mz = _mask_and_target(observed, mask)
    return _step(state, _fields(bank), m, mz, params.beta)


@njit(cache=True)
def _admm_loop(zs, mk, mz, w, zh, l1, l2, w_prev, zh_prev, beta, eps_abs, eps_rel, max_iters,
               primal_hist, dual_hist, obj_hist):  # pragma: no cover - compiled
    """Compiled sweep loop, element-by-element identical to ``_step``.

    Returns ``(iterations, status)`` with status 1 = converged, 0 = iteration
    cap, -1 = non-finite iterate.
    """
    m, n = zs.shape
    it = 0
    while it < max_iters:
        sp1 = 0.0
        sp2 = 0.0
        sd = 0.0
        s_zh = 0.0
        s_sum = 0.0
        s_fuse = 0.0
        s_d = 0.0
        obj = 0.0
        finite = True
        for c in range(n):
            f = 0.0
            for i in range(m):
                f = f + w[i, c] * zs[i, c]
            zh_prev[c] = zh[c]
            z_new = (mz[c] - l1[c] + beta * f) / (mk[c] + beta)
            zh[c] = z_new
            for i in range(m):
                w_prev[i, c] = w[i, c]
            for i in range(m):
                zi = zs[i, c]
                others = 0.0
                for r in range(m):
                    if r != i:
                        others += w[r, c] * (zs[r, c] * zi + 1.0)
                w[i, c] = (beta * (z_new * zi + 1.0 - others) + l1[c] * zi - l2[c]) / (beta * (zi * zi + 1.0))
            f = 0.0
            tot = 0.0
            for i in range(m):
                f = f + w[i, c] * zs[i, c]
                tot = tot + w[i, c]
            r1 = z_new - f
            r2 = tot - 1.0
            l1[c] = l1[c] + beta * r1
            l2[c] = l2[c] + beta * r2
            sp1 += r1 * r1
            sp2 += r2 * r2
            dz = z_new - zh_prev[c]
            sd += dz * dz
            for i in range(m):
                dw = w[i, c] - w_prev[i, c]
                sd += dw * dw
            s_zh += z_new * z_new
            s_sum += tot * tot
            s_fuse += f * f
            s_d += l1[c] * l1[c]
            for i in range(m):
                q = l2[c] - zs[i, c] * l1[c]
                s_d += q * q
            ro = mk[c] * f - mz[c]
            obj += ro * ro
            if not (np.isfinite(z_new) and np.isfinite(l1[c]) and np.isfinite(l2[c]) and np.isfinite(tot)
                    and np.isfinite(f)):
                finite = False
        primal = np.sqrt(sp1 + sp2)
        dual = beta * np.sqrt(sd)
        primal_hist[it] = primal
        dual_hist[it] = dual
        obj_hist[it] = 0.5 * obj
        it += 1
        if not finite:
            return it, -1
        eps_fuse = eps_abs * np.sqrt(n) + eps_rel * max(np.sqrt(s_zh), np.sqrt(s_fuse))
        eps_sum = eps_abs * np.sqrt(n) + eps_rel * max(np.sqrt(s_sum), np.sqrt(n))
        eps_d = eps_abs * np.sqrt((m + 1.0) * n) + eps_rel * np.sqrt(s_d)
        if np.sqrt(sp1) <= eps_fuse and np.sqrt(sp2) <= eps_sum and dual <= eps_d:
            return it, 1
    return it, 0


def solve(observed, mask, bank: PrioriBank, params: AdmmParams = AdmmParams(),
          trace: TraceCallback | None = None) -> AdmmResult:
    """Run ADMM until the residuals drop below :func:`tolerances` or ``max_iters``.

    Each sweep performs exactly the block updates of :func:`step` (in compiled
    form).  ``trace`` is called once per completed iteration with
    ``(iteration, objective, primal_residual, dual_residual)``, also when the
    run ends in divergence.

    Raises
    ------
    ValueError
        Empty mask or inconsistent shapes.
    DivergenceError
        A non-finite iterate appeared (``beta`` badly matched to the data scale).
    """
    if not isinstance(bank, PrioriBank):
        raise TypeError("solve expects a PrioriBank")
    fields = _fields(bank)
    m, mz = _mask_and_target(observed, mask)
    if not m.any():
        raise ValueError("observation mask is empty: no observed cells")
    for z in fields:
        if z.shape != m.shape:
            raise ValueError(f"a priori field shape {z.shape} does not match mask {m.shape}")
        if not np.all(np.isfinite(z)):
            raise ValueError("a priori fields must be dense and finite")

    shape = m.shape
    state = initial_state(fields)
    zs = np.stack([z.ravel() for z in fields])
    w = np.stack([x.ravel() for x in state.weights])
    zh = state.z_hat.ravel().copy()
    l1 = state.lambda1.ravel().copy()
    l2 = state.lambda2.ravel().copy()
    w_prev = w.copy()
    zh_prev = zh.copy()
    hist = np.zeros((3, params.max_iters))
    iters, status = _admm_loop(zs, m.ravel(), mz.ravel(), w, zh, l1, l2, w_prev, zh_prev,
                               float(params.beta), float(params.eps_abs), float(params.eps_rel),
                               int(params.max_iters), hist[0], hist[1], hist[2])

    state.z_hat = zh.reshape(shape)
    state.weights = [x.reshape(shape) for x in w]
    state.lambda1 = l1.reshape(shape)
    state.lambda2 = l2.reshape(shape)
    state.prev_z_hat = zh_prev.reshape(shape)
    state.prev_weights = [x.reshape(shape) for x in w_prev]
    state.iter = iters
    state.primal_residuals = hist[0, :iters].tolist()
    state.dual_residuals = hist[1, :iters].tolist()
    if trace is not None:
        for k in range(iters):
            trace(k + 1, float(hist[2, k]), float(hist[0, k]), float(hist[1, k]))
    if status < 0:
        raise DivergenceError(f"divergence detected at iteration {iters}", state)
    converged = status == 1
    if not converged:
        logger.warning("ADMM stopped at max_iters=%d without meeting tolerances", params.max_iters)

    wb = WeightBank(tuple(state.weights))
    fused = fuse(wb.weights, fields)
    r = m * fused - mz
    return AdmmResult(
        fused_field=SpeedField.unchecked(bank.grid, fused),
        weights=wb,
        converged=converged,
        iters=iters,
        final_residuals=(state.primal_residuals[-1], state.dual_residuals[-1]),
        objective=0.5 * float(np.sum(r * r)),
        state=state,
    )
