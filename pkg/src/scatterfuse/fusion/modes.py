"""Final detection on the fused density: local maxima along grid lines."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from ..detect import local_maxima_mask
from ..geometry import Point2
from .density import (DensityField, EvalGrid, FieldEvaluator, SensorDataset, TILE,
                      check_grid)


@dataclass
class Modes:
    """Grid-node maxima, row-major; iterates as ``(Point2, score)``."""

    rows: np.ndarray
    cols: np.ndarray
    scores: np.ndarray
    grid: EvalGrid = field(repr=False)

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.grid.xs()[self.cols] if len(self.cols) else self.cols,
                                self.grid.ys()[self.rows] if len(self.rows) else self.rows]
                               ).astype(float).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.scores)

    def __iter__(self) -> Iterator[tuple[Point2, float]]:
        for (x, y), s in zip(self.points, self.scores):
            yield Point2(float(x), float(y)), float(s)


def _axis(scan_axis: str) -> int:
    if scan_axis not in ("x", "y"):
        raise ValueError("scan_axis must be 'x' or 'y'")
    return 1 if scan_axis == "x" else 0


def find_modes(field: DensityField, scan_axis: str = "x") -> Modes:
    """Strict local maxima with positive score along lines parallel to
    ``scan_axis`` (plateaus yield their first node)."""
    v = field.values
    mask = local_maxima_mask(v, axis=_axis(scan_axis)) & (v > 0)
    rows, cols = np.nonzero(mask)
    return Modes(rows, cols, v[rows, cols], field.grid)


def _runs(active_line: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs ``[a, b]`` of True in a 1-D boolean array."""
    a = np.asarray(active_line, dtype=np.int8)
    d = np.diff(np.r_[0, a, 0])
    return list(zip(np.nonzero(d == 1)[0], np.nonzero(d == -1)[0] - 1))


def fused_modes(sensors: Sequence[SensorDataset], grid: EvalGrid, scan_axis: str = "x",
                workers: int = 1, tile=TILE, evaluator: FieldEvaluator | None = None,
                with_pooled: tuple[int, int] | None = None):
    """Modes of the fused density without materializing the whole field.

    Only tiles reached by at least two sensors are evaluated; runs of such
    tiles along the scan axis are evaluated as one block with a one-node
    halo, so the result equals ``find_modes(evaluate_field(...))``.

    With ``with_pooled=(py, px)`` a max-pooled overview of the field is also
    returned, one cell per ``py x px`` nodes.
    """
    axis = _axis(scan_axis)
    check_grid(sensors, grid)
    ev = evaluator or FieldEvaluator(sensors, grid, tile)
    active = ev.active_tiles()
    ty_n, tx_n = tile
    jobs = []
    if axis == 1:
        for ty in range(active.shape[0]):
            for a, b in _runs(active[ty]):
                i0, i1 = ty * ty_n, min((ty + 1) * ty_n, grid.ny)
                j0, j1 = a * tx_n, min((b + 1) * tx_n, grid.nx)
                jobs.append((i0, i1, j0, j1))
    else:
        for tx in range(active.shape[1]):
            for a, b in _runs(active[:, tx]):
                i0, i1 = a * ty_n, min((b + 1) * ty_n, grid.ny)
                j0, j1 = tx * tx_n, min((tx + 1) * tx_n, grid.nx)
                jobs.append((i0, i1, j0, j1))

    def run(job):
        i0, i1, j0, j1 = job
        # one-node halo along the scan axis
        if axis == 1:
            h0, h1 = max(j0 - 1, 0), min(j1 + 1, grid.nx)
            vals = ev.block(i0, i1, h0, h1)
            m = local_maxima_mask(vals, axis=1) & (vals > 0)
            m[:, :j0 - h0] = False
            m[:, vals.shape[1] - (h1 - j1):] = False
            r, c = np.nonzero(m)
            out = (r + i0, c + h0, vals[r, c])
            core = vals[:, j0 - h0: vals.shape[1] - (h1 - j1)]
            return out, (i0, j0, core)
        h0, h1 = max(i0 - 1, 0), min(i1 + 1, grid.ny)
        vals = ev.block(h0, h1, j0, j1)
        m = local_maxima_mask(vals, axis=0) & (vals > 0)
        m[:i0 - h0] = False
        m[vals.shape[0] - (h1 - i1):] = False
        r, c = np.nonzero(m)
        core = vals[i0 - h0: vals.shape[0] - (h1 - i1)]
        return (r + h0, c + j0, vals[r, c]), (i0, j0, core)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    if results:
        rows = np.concatenate([r[0][0] for r in results])
        cols = np.concatenate([r[0][1] for r in results])
        scores = np.concatenate([r[0][2] for r in results])
        order = np.lexsort((cols, rows))
        modes = Modes(rows[order], cols[order], scores[order], grid)
    else:
        empty = np.zeros(0, dtype=np.int64)
        modes = Modes(empty, empty, np.zeros(0), grid)
    if with_pooled is None:
        return modes
    return modes, _pool(results, grid, with_pooled)


def _pool(results, grid: EvalGrid, pool: tuple[int, int]) -> DensityField:
    py, px = pool
    ny, nx = -(-grid.ny // py), -(-grid.nx // px)
    out = np.zeros((ny, nx))
    for _, (i0, j0, core) in results:
        ii = (np.arange(core.shape[0]) + i0) // py
        jj = (np.arange(core.shape[1]) + j0) // px
        np.maximum.at(out, (ii[:, None], jj[None, :]), core)
    coarse = EvalGrid(Point2(grid.origin.x + (px - 1) * grid.step_x / 2,
                             grid.origin.y + (py - 1) * grid.step_y / 2),
                      grid.step_x * px, grid.step_y * py, nx, ny)
    return DensityField(coarse, out)
