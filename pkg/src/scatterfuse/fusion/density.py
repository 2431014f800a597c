"""Per-sensor weighted kernel densities and their max-subtraction fusion.

Each sensor's density is evaluated in the sensor's own frame: an evaluation
point ``p`` is mapped through ``to_local`` and compared against the hits
there, so kernels stay axis-aligned with the sensor grid. The fused score
is the sum of all sensor densities minus the largest one.

Every evaluation path (single point, dense grid, tiled sparse grid) sums a
sensor's hit contributions sequentially in hit-list order and combines
sensors in list order, so results are bit-identical between paths and for
any number of worker threads. Hits whose kernel support cannot reach a
point contribute an exact zero and are skipped via a tile index.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..detect import Hits
from ..geometry import Point2, Transform2D, transform_points
from .kernel import Bandwidth, kernel_values

SUPERSAMPLE = 4
TILE = (8, 64)  # grid rows, grid cols per index tile


class GridTooCoarse(UserWarning):
    """Grid step exceeds the smallest kernel half-width; modes may be missed."""


@dataclass
class SensorDataset:
    """One sensor's hits plus the map from the evaluation frame into the
    sensor frame."""

    sensor_id: str
    hits: Hits
    to_local: Transform2D
    pitch: tuple[float, float]
    bandwidth: Bandwidth

    def __post_init__(self):
        self.pitch = tuple(float(v) for v in self.pitch)
        if not all(v > 0 for v in self.pitch):
            raise ValueError("pitch must be positive")
        if np.any(self.hits.weights < 0):
            raise ValueError("hit weights must be nonnegative")

    def with_transform(self, to_local: Transform2D) -> SensorDataset:
        return SensorDataset(self.sensor_id, self.hits, to_local, self.pitch, self.bandwidth)

    def with_bandwidth(self, bandwidth: Bandwidth) -> SensorDataset:
        return SensorDataset(self.sensor_id, self.hits, self.to_local, self.pitch, bandwidth)

    def with_hits(self, hits: Hits) -> SensorDataset:
        return SensorDataset(self.sensor_id, hits, self.to_local, self.pitch, self.bandwidth)


@dataclass(frozen=True)
class EvalGrid:
    """Rectangular lattice; node ``(i, j)`` is at
    ``(origin.x + j * step_x, origin.y + i * step_y)``."""

    origin: Point2
    step_x: float
    step_y: float
    nx: int
    ny: int

    def __post_init__(self):
        object.__setattr__(self, "origin", Point2(*map(float, self.origin)))
        if not (self.step_x > 0 and self.step_y > 0):
            raise ValueError("grid steps must be positive")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one node per axis")

    @classmethod
    def covering(cls, x0: float, y0: float, x1: float, y1: float,
                 step_x: float, step_y: float) -> EvalGrid:
        nx = int(math.floor((x1 - x0) / step_x + 1e-9)) + 1
        ny = int(math.floor((y1 - y0) / step_y + 1e-9)) + 1
        return cls(Point2(x0, y0), step_x, step_y, max(nx, 1), max(ny, 1))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    def point(self, i: int, j: int) -> Point2:
        return Point2(self.origin.x + j * self.step_x, self.origin.y + i * self.step_y)

    def xs(self, j0: int = 0, j1: int | None = None) -> np.ndarray:
        j1 = self.nx if j1 is None else j1
        return np.arange(j0, j1) * self.step_x + self.origin.x

    def ys(self, i0: int = 0, i1: int | None = None) -> np.ndarray:
        i1 = self.ny if i1 is None else i1
        return np.arange(i0, i1) * self.step_y + self.origin.y

    def block_points(self, i0: int, i1: int, j0: int, j1: int) -> np.ndarray:
        """Nodes of the index block ``[i0, i1) x [j0, j1)`` in row-major order."""
        xs, ys = self.xs(j0, j1), self.ys(i0, i1)
        return np.column_stack([np.tile(xs, len(ys)), np.repeat(ys, len(xs))])

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "step_x": self.step_x,
                "step_y": self.step_y, "nx": self.nx, "ny": self.ny}

    @classmethod
    def from_dict(cls, d: dict) -> EvalGrid:
        return cls(Point2(*d["origin"]), float(d["step_x"]), float(d["step_y"]),
                   int(d["nx"]), int(d["ny"]))


@dataclass
class DensityField:
    grid: EvalGrid
    values: np.ndarray = field(repr=False)


def default_grid(sensors: Sequence[SensorDataset], bounds, supersample: int = SUPERSAMPLE
                 ) -> EvalGrid:
    """Grid over ``bounds = (x0, y0, x1, y1)`` with steps equal to the finest
    sensor pitch per axis divided by ``supersample``."""
    sx = min(s.pitch[0] for s in sensors) / supersample
    sy = min(s.pitch[1] for s in sensors) / supersample
    return EvalGrid.covering(*bounds, sx, sy)


def hit_bounds(sensors: Sequence[SensorDataset], pad: float = 0.0):
    """Bounding box, in the evaluation frame, of all hit kernel supports."""
    boxes = [_support_boxes(s) for s in sensors if len(s.hits)]
    if not boxes:
        return None
    b = np.concatenate(boxes)
    return (b[:, 0].min() - pad, b[:, 1].min() - pad, b[:, 2].max() + pad, b[:, 3].max() + pad)


# --- core arithmetic -------------------------------------------------------

def _sensor_values(local: np.ndarray, s: SensorDataset, cand: np.ndarray | None = None
                   ) -> np.ndarray:
    """Density of ``s`` at sensor-frame points ``local`` using hits ``cand``
    (ascending indices; all hits when ``None``)."""
    loc = s.hits.locations if cand is None else s.hits.locations[cand]
    w = s.hits.weights if cand is None else s.hits.weights[cand]
    if len(loc) == 0:
        return np.zeros(len(local))
    ux = local[:, 0:1] - loc[:, 0]
    uy = local[:, 1:2] - loc[:, 1]
    contrib = w * kernel_values(ux, uy, s.bandwidth.h_x, s.bandwidth.h_y)
    # cumsum accumulates strictly left to right, i.e. in hit order.
    return np.cumsum(contrib, axis=1)[:, -1]


def combine(per_sensor: np.ndarray) -> np.ndarray:
    """Sum over sensors (axis 0) excluding one occurrence of the maximum.

    Equal to sum minus max, but free of cancellation: with two sensors the
    result is exactly the smaller density.
    """
    per_sensor = np.asarray(per_sensor, dtype=float)
    top = np.argmax(per_sensor, axis=0)
    acc = np.zeros(per_sensor.shape[1:])
    for k in range(per_sensor.shape[0]):
        acc += np.where(top == k, 0.0, per_sensor[k])
    return acc


def sensor_density(p, s: SensorDataset) -> float:
    """Weighted kernel sum of sensor ``s`` at evaluation-frame point ``p``."""
    local = transform_points(s.to_local, np.asarray(p, dtype=float).reshape(1, 2))
    return float(_sensor_values(local, s)[0])


def sensor_densities(points, sensors: Sequence[SensorDataset]) -> np.ndarray:
    """Per-sensor densities, shape ``(n_sensors, n_points)``, direct sum."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    return np.array([_sensor_values(transform_points(s.to_local, pts), s) for s in sensors]
                    ).reshape(len(sensors), len(pts))


def fused_density(p, sensors: Sequence[SensorDataset]) -> float:
    if not sensors:
        raise ValueError("need at least one sensor")
    return float(combine(sensor_densities(np.asarray(p, dtype=float).reshape(1, 2), sensors))[0])


def fused_densities(points, sensors: Sequence[SensorDataset]) -> np.ndarray:
    if not sensors:
        raise ValueError("need at least one sensor")
    return combine(sensor_densities(points, sensors))


# --- tile index ------------------------------------------------------------

def _support_boxes(s: SensorDataset) -> np.ndarray:
    """Evaluation-frame bounding boxes ``(x0, y0, x1, y1)`` of each hit's
    kernel support."""
    d = s.hits.locations
    hx, hy = s.bandwidth
    to_eval = s.to_local.inverse()
    corners = np.stack([transform_points(to_eval, d + off) for off in
                        ([-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy])])
    return np.column_stack([corners[..., 0].min(0), corners[..., 1].min(0),
                            corners[..., 0].max(0), corners[..., 1].max(0)])


class _SensorIndex:
    """Tile-bucketed hit supports of one sensor over a grid.

    Index ranges are widened by one node on each side so rounding in the
    frame mapping can never drop a contributing hit.
    """

    def __init__(self, s: SensorDataset, grid: EvalGrid, tile=TILE):
        self.sensor = s
        self.tile = tile
        self.ntx = -(-grid.nx // tile[1])
        self.nty = -(-grid.ny // tile[0])
        n = len(s.hits)
        if n == 0:
            self.box = np.zeros((0, 4), dtype=np.int64)
            self.hit_ids = np.zeros(0, dtype=np.int64)
            self.tile_ids = np.zeros(0, dtype=np.int64)
            self.indptr = np.zeros(self.ntx * self.nty + 1, dtype=np.int64)
            return
        b = _support_boxes(s)
        ox, oy = grid.origin
        j0 = np.floor((b[:, 0] - ox) / grid.step_x) - 1
        i0 = np.floor((b[:, 1] - oy) / grid.step_y) - 1
        j1 = np.ceil((b[:, 2] - ox) / grid.step_x) + 1
        i1 = np.ceil((b[:, 3] - oy) / grid.step_y) + 1
        keep = (j1 >= 0) & (i1 >= 0) & (j0 <= grid.nx - 1) & (i0 <= grid.ny - 1)
        box = np.column_stack([np.clip(i0, 0, grid.ny - 1), np.clip(i1, 0, grid.ny - 1),
                               np.clip(j0, 0, grid.nx - 1), np.clip(j1, 0, grid.nx - 1)])
        box = box.astype(np.int64)
        box[~keep] = [1, 0, 1, 0]
        self.box = box  # inclusive node ranges (i0, i1, j0, j1); empty if i0 > i1

        ids = np.nonzero(keep)[0]
        ty0, ty1 = box[ids, 0] // tile[0], box[ids, 1] // tile[0]
        tx0, tx1 = box[ids, 2] // tile[1], box[ids, 3] // tile[1]
        hit, tiles = _expand_tiles(ids, ty0, ty1, tx0, tx1, self.ntx)
        order = np.lexsort((hit, tiles))
        hit, tiles = hit[order], tiles[order]
        self.hit_ids = hit
        self.tile_ids = np.unique(tiles)
        self.indptr = np.searchsorted(tiles, np.arange(self.ntx * self.nty + 1))

    def candidates(self, i0: int, i1: int, j0: int, j1: int) -> np.ndarray:
        """Ascending ids of hits whose support may touch nodes in
        ``[i0, i1) x [j0, j1)``."""
        ty = np.arange(i0 // self.tile[0], (i1 - 1) // self.tile[0] + 1)
        tx = np.arange(j0 // self.tile[1], (j1 - 1) // self.tile[1] + 1)
        tid = (ty[:, None] * self.ntx + tx[None, :]).ravel()
        parts = [self.hit_ids[self.indptr[t]:self.indptr[t + 1]] for t in tid]
        if not parts:
            return np.zeros(0, dtype=np.int64)
        cand = np.unique(np.concatenate(parts))
        b = self.box[cand]
        touch = (b[:, 0] < i1) & (b[:, 1] >= i0) & (b[:, 2] < j1) & (b[:, 3] >= j0)
        return cand[touch]


def _expand_tiles(ids, ty0, ty1, tx0, tx1, ntx):
    """All ``(hit, tile_id)`` pairs for inclusive tile ranges per hit."""
    ny = ty1 - ty0 + 1
    nx = tx1 - tx0 + 1
    counts = ny * nx
    hit = np.repeat(ids, counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    k = np.arange(counts.sum()) - start
    nxr = np.repeat(nx, counts)
    ty = np.repeat(ty0, counts) + k // nxr
    tx = np.repeat(tx0, counts) + k % nxr
    return hit, ty * ntx + tx


class FieldEvaluator:
    """Accelerated fused-density evaluation over blocks of an :class:`EvalGrid`."""

    def __init__(self, sensors: Sequence[SensorDataset], grid: EvalGrid, tile=TILE):
        if not sensors:
            raise ValueError("need at least one sensor")
        self.sensors = list(sensors)
        self.grid = grid
        self.tile = tile
        self.index = [_SensorIndex(s, grid, tile) for s in self.sensors]

    def block(self, i0: int, i1: int, j0: int, j1: int) -> np.ndarray:
        """Fused values on nodes ``[i0, i1) x [j0, j1)``, shape ``(i1-i0, j1-j0)``."""
        pts = self.grid.block_points(i0, i1, j0, j1)
        per = np.zeros((len(self.sensors), len(pts)))
        for k, (s, idx) in enumerate(zip(self.sensors, self.index)):
            cand = idx.candidates(i0, i1, j0, j1)
            if cand.size:
                per[k] = _sensor_values(transform_points(s.to_local, pts), s, cand)
        return combine(per).reshape(i1 - i0, j1 - j0)

    def active_tiles(self) -> np.ndarray:
        """Boolean ``(n_tile_rows, n_tile_cols)`` map of tiles touched by at
        least two sensors' supports; the fused density vanishes elsewhere."""
        ntx, nty = self.index[0].ntx, self.index[0].nty
        count = np.zeros(ntx * nty, dtype=np.int32)
        for idx in self.index:
            count[idx.tile_ids] += 1
        return (count >= 2).reshape(nty, ntx)


def check_grid(sensors: Sequence[SensorDataset], grid: EvalGrid) -> None:
    hx = min(s.bandwidth.h_x for s in sensors)
    hy = min(s.bandwidth.h_y for s in sensors)
    if grid.step_x > hx or grid.step_y > hy:
        warnings.warn(f"grid step ({grid.step_x:g}, {grid.step_y:g}) exceeds the smallest "
                      f"bandwidth ({hx:g}, {hy:g})", GridTooCoarse, stacklevel=3)


def evaluate_field(sensors: Sequence[SensorDataset], grid: EvalGrid,
                   workers: int = 1, block: tuple[int, int] = (64, 256)) -> DensityField:
    """Fused density at every grid node.

    Results do not depend on ``workers`` or ``block``.
    """
    check_grid(sensors, grid)
    ev = FieldEvaluator(sensors, grid)
    values = np.zeros(grid.shape)
    jobs = [(i0, min(i0 + block[0], grid.ny), j0, min(j0 + block[1], grid.nx))
            for i0 in range(0, grid.ny, block[0]) for j0 in range(0, grid.nx, block[1])]

    def run(job):
        i0, i1, j0, j1 = job
        values[i0:i1, j0:j1] = ev.block(i0, i1, j0, j1)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, jobs))
    else:
        for job in jobs:
            run(job)
    return DensityField(grid, values)
