"""Planar coordinate frames: affine transforms, least-squares registration
from point correspondences, and registration-error statistics.

Transforms map points from one frame into another as ``linear @ p + offset``.
Point sets are ``(n, 2)`` float arrays; single points may be given as any
length-2 sequence.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

MODEL_KINDS = ("translation", "rigid", "similarity", "affine")
_MIN_PAIRS = {"translation": 1, "rigid": 2, "similarity": 2, "affine": 3}
_PIVOT_TOL = 1e-12


class RegistrationError(ValueError):
    """Base class for registration failures."""


class TooFewCorrespondences(RegistrationError):
    pass


class DegenerateConfiguration(RegistrationError):
    pass


class EmptyCorrespondenceSet(RegistrationError):
    pass


class Point2(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class Transform2D:
    """Invertible planar affine map ``p -> linear @ p + offset``."""

    linear: np.ndarray
    offset: np.ndarray
    model: str = "affine"

    def __post_init__(self):
        linear = np.array(self.linear, dtype=float).reshape(2, 2)
        offset = np.array(self.offset, dtype=float).reshape(2)
        if not (np.all(np.isfinite(linear)) and np.all(np.isfinite(offset))):
            raise ValueError("transform entries must be finite")
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model!r}")
        if np.linalg.det(linear) == 0.0:
            raise ValueError("transform is not invertible")
        linear.setflags(write=False)
        offset.setflags(write=False)
        object.__setattr__(self, "linear", linear)
        object.__setattr__(self, "offset", offset)

    @classmethod
    def identity(cls) -> Transform2D:
        return cls(np.eye(2), np.zeros(2), "translation")

    @classmethod
    def translation(cls, tx: float, ty: float) -> Transform2D:
        return cls(np.eye(2), [tx, ty], "translation")

    @classmethod
    def from_params(cls, angle: float = 0.0, scale: float = 1.0,
                    tx: float = 0.0, ty: float = 0.0) -> Transform2D:
        """Similarity transform from a rotation angle (radians), uniform scale
        and translation."""
        c, s = np.cos(angle), np.sin(angle)
        model = "rigid" if scale == 1.0 else "similarity"
        return cls(scale * np.array([[c, -s], [s, c]]), [tx, ty], model)

    def __call__(self, pts) -> np.ndarray:
        return transform_points(self, pts)

    def inverse(self) -> Transform2D:
        inv = np.linalg.inv(self.linear)
        return Transform2D(inv, -inv @ self.offset, self.model)

    def compose(self, other: Transform2D) -> Transform2D:
        """Return ``self ∘ other`` (apply ``other`` first)."""
        kinds = MODEL_KINDS
        model = kinds[max(kinds.index(self.model), kinds.index(other.model))]
        return Transform2D(self.linear @ other.linear,
                           self.linear @ other.offset + self.offset, model)

    def to_dict(self) -> dict:
        return {"linear": self.linear.tolist(), "offset": self.offset.tolist(),
                "model": self.model}

    @classmethod
    def from_dict(cls, d: dict) -> Transform2D:
        return cls(d["linear"], d["offset"], d.get("model", "affine"))


@dataclass(frozen=True)
class Correspondence:
    a: Point2
    b: Point2


@dataclass(frozen=True)
class RegistrationReport:
    transform: Transform2D
    residuals: np.ndarray = field(repr=False)
    mean_error: float
    max_error: float

    def u_hat(self, summary: str = "mean") -> float:
        """Localization-uncertainty summary of the residual distribution.

        ``summary`` is ``"mean"``, ``"max"``, ``"median"`` or ``"pNN"`` for
        the NN-th percentile.
        """
        return summarize_errors(self.residuals, summary)


def summarize_errors(errors, summary: str = "mean") -> float:
    errors = np.asarray(errors, dtype=float)
    if summary == "mean":
        return float(errors.mean())
    if summary == "max":
        return float(errors.max())
    if summary == "median":
        return float(np.median(errors))
    if summary.startswith("p") and summary[1:].replace(".", "", 1).isdigit():
        return float(np.percentile(errors, float(summary[1:])))
    raise ValueError(f"unknown error summary {summary!r}")


def transform_points(t: Transform2D, pts) -> np.ndarray:
    """Apply ``t`` to an ``(n, 2)`` array (or a single point).

    Written out component-wise so scalar and batched evaluation round
    identically.
    """
    p = np.asarray(pts, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    (a, b), (c, d) = t.linear
    x, y = p[:, 0], p[:, 1]
    out = np.empty_like(p)
    out[:, 0] = (a * x + b * y) + t.offset[0]
    out[:, 1] = (c * x + d * y) + t.offset[1]
    return out[0] if single else out


def apply_transform(t: Transform2D, p) -> Point2:
    q = transform_points(t, np.asarray(p, dtype=float).reshape(2))
    return Point2(float(q[0]), float(q[1]))


def invert(t: Transform2D) -> Transform2D:
    return t.inverse()


def _as_pairs(correspondences) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(correspondences, tuple) and len(correspondences) == 2:
        a, b = (np.asarray(x, dtype=float).reshape(-1, 2) for x in correspondences)
    else:
        items = list(correspondences)
        a = np.array([c.a for c in items], dtype=float).reshape(-1, 2)
        b = np.array([c.b for c in items], dtype=float).reshape(-1, 2)
    if a.shape != b.shape:
        raise ValueError("source and target point sets differ in length")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("correspondences must be finite")
    return a, b


def fit_transform(correspondences, model_kind: str = "affine") -> RegistrationReport:
    """Least-squares transform minimizing ``sum ||T(a_i) - b_i||^2``.

    ``correspondences`` is a sequence of :class:`Correspondence` or a pair of
    ``(n, 2)`` arrays ``(a, b)``.
    """
    if model_kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {model_kind!r}")
    a, b = _as_pairs(correspondences)
    n = len(a)
    if n < _MIN_PAIRS[model_kind]:
        raise TooFewCorrespondences(
            f"{model_kind} needs at least {_MIN_PAIRS[model_kind]} pairs, got {n}")

    ca, cb = a.mean(axis=0), b.mean(axis=0)
    a0, b0 = a - ca, b - cb
    if model_kind == "translation":
        linear = np.eye(2)
    elif model_kind == "affine":
        linear = _affine_linear(a0, b0)
    else:
        linear = _procrustes(a0, b0, with_scale=model_kind == "similarity")
    offset = cb - linear @ ca
    t = Transform2D(linear, offset, model_kind)
    return registration_error((a, b), t)


def _affine_linear(a0: np.ndarray, b0: np.ndarray) -> np.ndarray:
    # Centering decouples the offset, leaving 2x2 normal equations.
    normal = a0.T @ a0
    scale = np.trace(normal)
    if scale == 0.0:
        raise DegenerateConfiguration("all source points coincide")
    # Pivot of the scaled normal matrix; zero for collinear sources.
    pivot = np.linalg.det(normal) / scale**2
    if abs(pivot) < _PIVOT_TOL:
        raise DegenerateConfiguration("source points are collinear")
    return np.linalg.solve(normal, a0.T @ b0).T


def _procrustes(a0: np.ndarray, b0: np.ndarray, with_scale: bool) -> np.ndarray:
    var_a = np.sum(a0 * a0)
    if var_a == 0.0:
        raise DegenerateConfiguration("all source points coincide")
    cov = b0.T @ a0
    u, s, vt = np.linalg.svd(cov)
    sign = np.ones(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[-1] = -1.0
    rot = u @ np.diag(sign) @ vt
    if not with_scale:
        return rot
    scale = np.sum(s * sign) / var_a
    if scale <= 0:
        raise DegenerateConfiguration("similarity fit produced nonpositive scale")
    return scale * rot


def registration_error(correspondences, t: Transform2D) -> RegistrationReport:
    """Per-pair Euclidean errors ``||t(a_i) - b_i||`` and their summary."""
    a, b = _as_pairs(correspondences)
    if len(a) == 0:
        raise EmptyCorrespondenceSet("no correspondences given")
    residuals = np.hypot(*(transform_points(t, a) - b).T)
    return RegistrationReport(t, residuals, float(residuals.mean()),
                              float(residuals.max()))


# --- serialization ---------------------------------------------------------

def save_transform(t: Transform2D, path) -> None:
    Path(path).write_text(json.dumps(t.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_transform(path) -> Transform2D:
    return Transform2D.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_correspondences(a, b, path) -> None:
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["ax", "ay", "bx", "by"])
        for (ax, ay), (bx, by) in zip(a, b):
            w.writerow([repr(float(ax)), repr(float(ay)), repr(float(bx)), repr(float(by))])


def load_correspondences(path) -> tuple[np.ndarray, np.ndarray]:
    rows = read_numeric_csv(path, ["ax", "ay", "bx", "by"])
    return rows[:, 0:2].copy(), rows[:, 2:4].copy()


def read_numeric_csv(path, columns: Sequence[str]) -> np.ndarray:
    """Read a headed CSV with the given numeric ``columns`` (any order).

    Raises ``ValueError`` naming the file and line of the first bad record.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}:1: empty file, expected header") from None
        missing = [c for c in columns if c not in header]
        if missing:
            raise ValueError(f"{path}:1: missing columns {missing}")
        idx = [header.index(c) for c in columns]
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out.append([float(row[i]) for i in idx])
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: malformed record {row!r}") from None
    return np.array(out, dtype=float).reshape(-1, len(columns))
