"""Peak-normalized Epanechnikov product kernel and the pitch/uncertainty
bandwidth rule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

A_SWEEP = (0.0, 0.5, 1.0, 2.0, 5.0, 10.0)


class NonpositivePitch(ValueError):
    pass


@dataclass(frozen=True)
class Bandwidth:
    """Half-widths of the kernel support along the sensor's x and y axes (mm)."""

    h_x: float
    h_y: float

    def __post_init__(self):
        for v in (self.h_x, self.h_y):
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"bandwidth components must be positive and finite, got {v}")

    def __iter__(self):
        return iter((self.h_x, self.h_y))


def select_bandwidth(pitch, u_hat: float, a: float = 1.0) -> Bandwidth:
    """``(max(dx, a*u_hat), max(dy, a*u_hat))`` for pixel pitch ``(dx, dy)``.

    With ``a = 0`` the kernels span exactly one pixel; ``a = 1`` widens them
    to the localization uncertainty ``u_hat``.
    """
    dx, dy = (float(v) for v in pitch)
    if not (dx > 0 and dy > 0):
        raise NonpositivePitch(f"pixel pitch must be positive, got {(dx, dy)}")
    if u_hat < 0 or a < 0:
        raise ValueError("u_hat and a must be nonnegative")
    r = a * u_hat
    return Bandwidth(max(dx, r), max(dy, r))


def kernel_1d(u, h: float):
    """One factor of the product kernel: ``1 - (u/h)^2`` on ``|u| <= h``."""
    u = np.asarray(u, dtype=float)
    t = u / h
    return np.where(np.abs(u) <= h, 1.0 - t * t, 0.0)


def kernel_values(ux, uy, h_x: float, h_y: float) -> np.ndarray:
    """Vectorized kernel on offset components; exactly 0 off the support."""
    tx = ux / h_x
    ty = uy / h_y
    inside = (np.abs(ux) <= h_x) & (np.abs(uy) <= h_y)
    return np.where(inside, (1.0 - tx * tx) * (1.0 - ty * ty), 0.0)


def kernel_eval(u, h: Bandwidth):
    """Kernel value(s) for offset(s) ``u`` (shape ``(2,)`` or ``(n, 2)``).

    Peak value 1 at the origin, compact support ``[-h_x, h_x] x [-h_y, h_y]``.
    """
    u = np.asarray(u, dtype=float)
    k = kernel_values(u[..., 0], u[..., 1], h.h_x, h.h_y)
    return float(k) if k.ndim == 0 else k
