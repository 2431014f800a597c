"""Brute-force reference implementations and random instance builders
shared by the unit and acceptance suites."""

import numpy as np

from scatterfuse.detect import Hits
from scatterfuse.fusion import Bandwidth, EvalGrid, SensorDataset
from scatterfuse.geometry import Point2, Transform2D, transform_points


def naive_sensor_density(points, s):
    """Direct O(points x hits) weighted kernel sum, no pruning."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    local = transform_points(s.to_local, pts)
    u = local[:, None, :] - s.hits.locations[None, :, :]
    tx = u[..., 0] / s.bandwidth.h_x
    ty = u[..., 1] / s.bandwidth.h_y
    k = np.clip(1 - tx**2, 0, None) * np.clip(1 - ty**2, 0, None)
    k[(np.abs(u[..., 0]) > s.bandwidth.h_x) | (np.abs(u[..., 1]) > s.bandwidth.h_y)] = 0
    return (k * s.hits.weights).sum(axis=1) if len(s.hits) else np.zeros(len(pts))


def naive_fused(points, sensors):
    """Sum minus max of the per-sensor direct sums, computed by sorting and
    dropping the largest value so no cancellation occurs."""
    per = np.array([naive_sensor_density(points, s) for s in sensors])
    return np.sort(per, axis=0)[:-1].sum(axis=0)


def random_instance(rng, n_sensors=None, n_hits_total=None, grid_shape=(100, 100)):
    """Random sensors with rigid placements and hits clustered in the grid area."""
    n_sensors = n_sensors or int(rng.integers(1, 6))
    n_hits_total = n_hits_total or int(rng.integers(n_sensors, 2001))
    ny, nx = grid_shape
    step = rng.uniform(0.02, 0.1, 2)
    grid = EvalGrid(Point2(*rng.uniform(-5, 5, 2)), step[0], step[1], nx, ny)
    w, h = step[0] * (nx - 1), step[1] * (ny - 1)
    centers = np.column_stack([grid.origin.x + rng.uniform(0, w, 8),
                               grid.origin.y + rng.uniform(0, h, 8)])
    counts = rng.multinomial(n_hits_total, np.ones(n_sensors) / n_sensors)
    sensors = []
    for k in range(n_sensors):
        to_local = Transform2D.from_params(rng.uniform(-np.pi, np.pi), 1.0,
                                           *rng.uniform(-20, 20, 2))
        pts = centers[rng.integers(0, 8, counts[k])] + rng.normal(0, 0.3, (counts[k], 2))
        local = to_local(pts) if len(pts) else np.zeros((0, 2))
        hb = rng.uniform(2, 8, 2) * step
        hits = Hits(local, rng.uniform(0, 5, counts[k]), np.full(counts[k], 0.995), f"S{k}")
        sensors.append(SensorDataset(f"S{k}", hits, to_local, tuple(hb / 2), Bandwidth(*hb)))
    return sensors, grid
