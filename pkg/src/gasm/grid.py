"""Space-time grid, speed fields, observation masks and trajectory aggregation.

Fields are stored as ``(n_x, n_t)`` float arrays: row ``j`` is the road cell
starting at ``x_min + j*dx`` (upstream first), column ``k`` the time slot
starting at ``t_min + k*dt``.  Missing cells hold ``nan``.  Units: metres,
seconds, km/h.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

FT_TO_M = 0.3048
MS_TO_KMH = 3.6


def _frozen(a: np.ndarray, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class GridSpec:
    """Uniform space-time grid; cell ``(j, k)`` covers
    ``[x_min + j*dx, x_min + (j+1)*dx) x [t_min + k*dt, t_min + (k+1)*dt)``."""

    x_min: float
    t_min: float
    dx: float
    dt: float
    n_x: int
    n_t: int

    def __post_init__(self):
        if not (self.dx > 0 and self.dt > 0):
            raise ValueError(f"grid spacing must be positive (dx={self.dx}, dt={self.dt})")
        if self.n_x < 1 or self.n_t < 1:
            raise ValueError(f"grid must have at least one cell (n_x={self.n_x}, n_t={self.n_t})")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_x, self.n_t)

    @property
    def x_max(self) -> float:
        return self.x_min + self.n_x * self.dx

    @property
    def t_max(self) -> float:
        return self.t_min + self.n_t * self.dt

    def x_centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.n_x) + 0.5) * self.dx

    def t_centers(self) -> np.ndarray:
        return self.t_min + (np.arange(self.n_t) + 0.5) * self.dt

    def cell_index(self, x, t):
        """Return integer ``(row, col)`` arrays for positions/times; out-of-grid
        entries are ``-1``."""
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        j = np.floor((x - self.x_min) / self.dx).astype(np.int64)
        k = np.floor((t - self.t_min) / self.dt).astype(np.int64)
        inside = (j >= 0) & (j < self.n_x) & (k >= 0) & (k < self.n_t)
        return np.where(inside, j, -1), np.where(inside, k, -1)

    def window(self, col_start: int, col_stop: int) -> "GridSpec":
        """Sub-grid covering columns ``[col_start, col_stop)``."""
        if not 0 <= col_start < col_stop <= self.n_t:
            raise ValueError(f"invalid column window [{col_start}, {col_stop}) for n_t={self.n_t}")
        return GridSpec(self.x_min, self.t_min + col_start * self.dt, self.dx, self.dt,
                        self.n_x, col_stop - col_start)


@dataclass(frozen=True)
class SpeedField:
    """Speed values (km/h) on a grid; ``nan`` marks missing cells."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != self.grid.shape:
            raise ValueError(f"field shape {values.shape} does not match grid {self.grid.shape}")
        if np.any(values[~np.isnan(values)] < 0):
            raise ValueError("speed field contains negative speeds")
        object.__setattr__(self, "values", values)

    @classmethod
    def unchecked(cls, grid: GridSpec, values: np.ndarray) -> "SpeedField":
        """Build a field without the non-negativity check (solver outputs may
        legitimately dip below zero)."""
        obj = object.__new__(cls)
        values = _frozen(values)
        if values.shape != grid.shape:
            raise ValueError(f"field shape {values.shape} does not match grid {grid.shape}")
        object.__setattr__(obj, "grid", grid)
        object.__setattr__(obj, "values", values)
        return obj

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def is_dense(self) -> bool:
        return not bool(np.any(self.missing))

    def window(self, col_start: int, col_stop: int) -> "SpeedField":
        return SpeedField.unchecked(self.grid.window(col_start, col_stop),
                                    self.values[:, col_start:col_stop])


@dataclass(frozen=True)
class ObservationMask:
    grid: GridSpec
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.shape != self.grid.shape:
            raise ValueError(f"mask shape {m.shape} does not match grid {self.grid.shape}")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask entries must be 0 or 1")
        object.__setattr__(self, "mask", _frozen(m, dtype=bool))

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    @property
    def coverage(self) -> float:
        return self.count / self.mask.size

    def observed_rows(self) -> np.ndarray:
        return np.flatnonzero(self.mask.any(axis=1))

    def window(self, col_start: int, col_stop: int) -> "ObservationMask":
        return ObservationMask(self.grid.window(col_start, col_stop), self.mask[:, col_start:col_stop])

    def require_nonempty(self) -> None:
        if self.count == 0:
            raise ValueError("observation mask is empty: no observed cells")


@dataclass(frozen=True)
class Trajectory:
    vehicle_id: str
    samples: tuple = field(default_factory=tuple)  # (t [s], x [m], v [km/h]) triples

    def __post_init__(self):
        s = tuple((float(t), float(x), float(v)) for t, x, v in self.samples)
        for (t0, _, _), (t1, _, _) in zip(s, s[1:]):
            if not t1 > t0:
                raise ValueError(f"vehicle {self.vehicle_id}: sample times must strictly increase ({t0} -> {t1})")
        if any(v < 0 for _, _, v in s):
            raise ValueError(f"vehicle {self.vehicle_id}: negative speed")
        object.__setattr__(self, "samples", s)


@dataclass(frozen=True)
class AggregationStats:
    samples_used: int
    samples_skipped: int
    cells_filled: int


def _check_same_grid(a: GridSpec, b: GridSpec) -> None:
    if a != b:
        raise ValueError(f"grid mismatch: {a} vs {b}")


def nearest_fill(values: np.ndarray) -> tuple[np.ndarray, int]:
    """Fill ``nan`` cells with the value of the nearest non-missing cell.

    Distance is Euclidean in (row, column) index space; ties go to the smaller
    row, then the smaller column.  Returns the filled copy and the fill count.
    """
    out = np.array(values, dtype=float, copy=True)
    miss = np.isnan(out)
    n_fill = int(miss.sum())
    if n_fill == 0:
        return out, 0
    known = np.argwhere(~miss)
    if len(known) == 0:
        raise ValueError("no input data: every cell is missing")
    tree = cKDTree(known)
    holes = np.argwhere(miss)
    dist, _ = tree.query(holes, k=1)
    # squared index distances are integers, so equal-distance ties are exact
    for (j, k), d in zip(holes, dist):
        cand = tree.query_ball_point((j, k), r=d + 1e-9)
        pts = known[cand]
        d2 = ((pts - (j, k)) ** 2).sum(axis=1)
        best = pts[d2 == d2.min()]
        r, c = min(map(tuple, best))
        out[j, k] = values[r, c]
    return out, n_fill


def aggregate_samples(t, x, v, grid: GridSpec, fill: bool = True) -> tuple[SpeedField, AggregationStats]:
    """Cell-mean of point samples, optionally nearest-filled to a dense field.

    Sums run in a canonical (cell, speed) order, so the result does not depend
    on the input order of the samples.
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if t.size == 0:
        raise ValueError("no input data")
    j, k = grid.cell_index(x, t)
    inside = j >= 0
    skipped = int((~inside).sum())
    if skipped:
        logger.info("skipped %d samples outside the grid extent", skipped)
    flat = j[inside] * grid.n_t + k[inside]
    vv = v[inside]
    order = np.lexsort((vv, flat))
    flat, vv = flat[order], vv[order]
    values = np.full(grid.n_x * grid.n_t, np.nan)
    if flat.size:
        cells, starts, counts = np.unique(flat, return_index=True, return_counts=True)
        values[cells] = np.add.reduceat(vv, starts) / counts
    values = values.reshape(grid.shape)
    filled = 0
    if fill:
        values, filled = nearest_fill(values)
        if filled:
            logger.info("filled %d empty cells by nearest neighbour", filled)
    return SpeedField(grid, values), AggregationStats(int(inside.sum()), skipped, filled)


def aggregate_trajectories(trajectories: Sequence[Trajectory], grid: GridSpec) -> SpeedField:
    """Dense ground-truth field from vehicle trajectories (cell-mean speed,
    empty cells nearest-filled)."""
    if not trajectories:
        raise ValueError("no input data")
    rows = [s for tr in trajectories for s in tr.samples]
    if not rows:
        raise ValueError("no input data")
    arr = np.asarray(rows, dtype=float)
    fld, _ = aggregate_samples(arr[:, 0], arr[:, 1], arr[:, 2], grid)
    return fld


def equally_spaced_detectors(grid: GridSpec, count: int) -> list[int]:
    """Rows holding detectors placed at the midpoints of ``count`` equal road
    sections, i.e. ``floor((j + 0.5) * n_x / count)``, clamped and
    de-duplicated."""
    if not 1 <= count <= grid.n_x:
        raise ValueError(f"detector count {count} out of range [1, {grid.n_x}]")
    rows = []
    for j in range(count):
        r = min(max(int(np.floor((j + 0.5) * grid.n_x / count)), 0), grid.n_x - 1)
        if r not in rows:
            rows.append(r)
    return rows


def detector_mask(grid: GridSpec, detector_rows: Iterable[int]) -> ObservationMask:
    rows = list(detector_rows)
    if len(set(rows)) != len(rows):
        raise ValueError(f"detector rows must be distinct: {rows}")
    m = np.zeros(grid.shape, dtype=bool)
    for r in rows:
        if not 0 <= r < grid.n_x:
            raise ValueError(f"detector row {r} out of range [0, {grid.n_x})")
        m[r, :] = True
    return ObservationMask(grid, m)


def apply_mask(fld: SpeedField, mask: ObservationMask) -> SpeedField:
    _check_same_grid(fld.grid, mask.grid)
    return SpeedField.unchecked(fld.grid, np.where(mask.mask, fld.values, np.nan))


# -- native text formats ----------------------------------------------------

def _write_matrix(path, grid: GridSpec, values: np.ndarray, fmt: str) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"{grid.n_x} {grid.n_t} {grid.dx!r} {grid.dt!r} {grid.x_min!r} {grid.t_min!r}\n")
        np.savetxt(fh, values, fmt=fmt, delimiter=" ")


def _read_matrix(path) -> tuple[GridSpec, np.ndarray]:
    with open(path, encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 6:
            raise ValueError(f"{path}: header must be 'n_x n_t dx dt x_min t_min'")
        n_x, n_t = int(header[0]), int(header[1])
        dx, dt, x_min, t_min = map(float, header[2:])
        grid = GridSpec(x_min, t_min, dx, dt, n_x, n_t)
        values = np.loadtxt(fh, dtype=float, ndmin=2)
    if values.shape != grid.shape:
        raise ValueError(f"{path}: body shape {values.shape} does not match header {grid.shape}")
    return grid, values


def write_field(path, fld: SpeedField) -> None:
    _write_matrix(path, fld.grid, fld.values, "%.17g")


def read_field(path) -> SpeedField:
    grid, values = _read_matrix(path)
    return SpeedField.unchecked(grid, values)


def write_mask(path, mask: ObservationMask) -> None:
    _write_matrix(path, mask.grid, mask.mask.astype(int), "%d")


def read_mask(path) -> ObservationMask:
    grid, values = _read_matrix(path)
    return ObservationMask(grid, values)


# -- trajectory files -------------------------------------------------------

TRAJECTORY_COLUMNS = ("vehicle_id", "time_s", "position_m", "speed_kmh")


def read_trajectory_samples(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Read a native trajectory CSV into ``(vehicle_id, t, x, v)`` arrays.

    Malformed rows raise ``ValueError`` naming the 1-based line number.
    """
    ids, t, x, v = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in header]
        try:
            cols = [header.index(c) for c in TRAJECTORY_COLUMNS]
        except ValueError:
            raise ValueError(f"{path}: header must contain columns {', '.join(TRAJECTORY_COLUMNS)}") from None
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            try:
                ids.append(row[cols[0]].strip())
                t.append(float(row[cols[1]]))
                x.append(float(row[cols[2]]))
                v.append(float(row[cols[3]]))
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{line}: malformed row ({exc})") from None
    if not ids:
        raise ValueError("no input data")
    return np.asarray(ids), np.asarray(t), np.asarray(x), np.asarray(v)


def read_trajectories(path) -> list[Trajectory]:
    ids, t, x, v = read_trajectory_samples(path)
    out = []
    for vid in dict.fromkeys(ids):
        sel = ids == vid
        order = np.argsort(t[sel], kind="stable")
        samples = zip(t[sel][order], x[sel][order], v[sel][order])
        out.append(Trajectory(str(vid), tuple(samples)))
    return out


# NGSIM column order of the raw whitespace-separated trajectory files
NGSIM_COLUMNS = (
    "Vehicle_ID", "Frame_ID", "Total_Frames", "Global_Time", "Local_X", "Local_Y",
    "Global_X", "Global_Y", "v_Length", "v_Width", "v_Class", "v_Vel", "v_Acc",
    "Lane_ID", "Preceding", "Following", "Space_Headway", "Time_Headway",
)


def convert_ngsim(src, dst, lane: int | None = None) -> int:
    """Convert an NGSIM trajectory file to the native trajectory CSV.

    Accepts the comma-separated export with a header row, or the original
    headerless whitespace-separated files.  ``Local_Y`` (ft) becomes
    ``position_m``, ``v_Vel`` (ft/s) becomes ``speed_kmh`` and ``Global_Time``
    (ms) becomes ``time_s`` relative to the earliest sample kept.  Returns the
    number of rows written.
    """
    src = Path(src)
    with open(src, newline="") as fh:
        first = fh.readline()
    if "Vehicle_ID" in first:
        with open(src, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = [(r["Vehicle_ID"], r["Global_Time"], r["Local_Y"], r["v_Vel"], r["Lane_ID"]) for r in reader]
    else:
        rows = []
        with open(src) as fh:
            for n, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) < 14:
                    raise ValueError(f"{src}:{n}: expected at least 14 NGSIM columns")
                rows.append((parts[0], parts[3], parts[5], parts[11], parts[13]))
    if lane is not None:
        rows = [r for r in rows if int(float(r[4])) == lane]
    if not rows:
        raise ValueError("no input data")
    gt = np.array([float(r[1]) for r in rows])
    t0 = gt.min()
    with open(dst, "w", newline="\n") as out:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for r, g in zip(rows, gt):
            w.writerow([
                int(float(r[0])),
                repr(float(g - t0) / 1000.0),
                repr(float(r[2]) * FT_TO_M),
                repr(float(r[3]) * FT_TO_M * MS_TO_KMH),
            ])
    return len(rows)
