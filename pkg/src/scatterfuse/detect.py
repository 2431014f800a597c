"""Per-sensor hit extraction from gridded intensity images.

A background sample set from a defect-free area forms the empirical null
distribution. Pixels whose null CDF value exceeds a confidence threshold and
which are local maxima along the scan axis become hits, weighted by a robust
z-score.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .geometry import Point2, Transform2D, read_numeric_csv, transform_points

MAD_TO_SIGMA = 1.4826
DEFAULT_THRESHOLD = 0.99


class DetectError(ValueError):
    pass


class TooFewSamples(DetectError):
    pass


class DegenerateNull(DetectError):
    pass


@dataclass(frozen=True)
class IntensityImage:
    """Preprocessed sensor image; ``values[row, col]`` sits at
    ``origin + (col * pitch_x, row * pitch_y)`` in the sensor frame."""

    values: np.ndarray
    pitch_x: float
    pitch_y: float
    origin: Point2 = Point2(0.0, 0.0)
    scan_axis: str = "x"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("image values must be 2-D")
        if not (self.pitch_x > 0 and self.pitch_y > 0):
            raise ValueError("pixel pitches must be positive")
        if self.scan_axis not in ("x", "y"):
            raise ValueError("scan_axis must be 'x' or 'y'")
        if not np.all(np.isfinite(values)):
            raise ValueError("image values must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "origin", Point2(*map(float, self.origin)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def pixel_locations(self, rows, cols) -> np.ndarray:
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        return np.column_stack([self.origin.x + cols * self.pitch_x,
                                self.origin.y + rows * self.pitch_y])


@dataclass(frozen=True)
class NullModel:
    samples: np.ndarray = field(repr=False)
    mu_robust: float
    sigma_robust: float


@dataclass(frozen=True)
class Hit:
    location: Point2
    weight: float
    confidence: float
    source_sensor: str = ""


@dataclass
class Hits:
    """Column-oriented hit set; iterates as :class:`Hit` records."""

    locations: np.ndarray
    weights: np.ndarray
    confidences: np.ndarray
    sensor: str = ""

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=float).reshape(-1, 2)
        n = len(self.locations)
        self.weights = np.asarray(self.weights, dtype=float).reshape(n)
        self.confidences = np.asarray(self.confidences, dtype=float).reshape(n)

    @classmethod
    def empty(cls, sensor: str = "") -> Hits:
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0), sensor)

    @classmethod
    def from_list(cls, hits: list[Hit], sensor: str | None = None) -> Hits:
        if not hits:
            return cls.empty(sensor or "")
        return cls(np.array([h.location for h in hits], dtype=float),
                   np.array([h.weight for h in hits]),
                   np.array([h.confidence for h in hits]),
                   sensor if sensor is not None else hits[0].source_sensor)

    def __len__(self) -> int:
        return len(self.locations)

    def __iter__(self) -> Iterator[Hit]:
        for (x, y), w, c in zip(self.locations, self.weights, self.confidences):
            yield Hit(Point2(float(x), float(y)), float(w), float(c), self.sensor)

    def subset(self, mask) -> Hits:
        return Hits(self.locations[mask], self.weights[mask],
                    self.confidences[mask], self.sensor)

    def with_weights(self, weights) -> Hits:
        w = np.broadcast_to(np.asarray(weights, dtype=float), self.weights.shape)
        return Hits(self.locations, w.copy(), self.confidences, self.sensor)


# --- null distribution -----------------------------------------------------

def estimate_null(background_samples) -> NullModel:
    """Empirical null with median / normal-consistent MAD estimates."""
    s = np.sort(np.asarray(background_samples, dtype=float).ravel())
    if s.size < 2:
        raise TooFewSamples(f"need at least 2 background samples, got {s.size}")
    if not np.all(np.isfinite(s)):
        raise DetectError("background samples must be finite")
    mu = float(np.median(s))
    sigma = MAD_TO_SIGMA * float(np.median(np.abs(s - mu)))
    if sigma <= 0.0:
        # MAD collapses when more than half the samples are tied.
        if s[0] == s[-1]:
            raise DegenerateNull("background samples have zero spread")
        raise DegenerateNull("median absolute deviation is zero")
    s.setflags(write=False)
    return NullModel(s, mu, sigma)


def confidence(null: NullModel, y):
    """Fraction of null samples ``<= y`` (empirical CDF)."""
    c = np.searchsorted(null.samples, y, side="right") / null.samples.size
    c = np.clip(c, 0.0, 1.0)
    return float(c) if np.ndim(c) == 0 else c


def hit_weight(null: NullModel, y):
    """Robust z-score of ``y`` under the null, clipped below at 0."""
    z = np.maximum((np.asarray(y, dtype=float) - null.mu_robust) / null.sigma_robust, 0.0)
    return float(z) if z.ndim == 0 else z


# --- peak picking ----------------------------------------------------------

def local_maxima_mask(values: np.ndarray, axis: int = 1) -> np.ndarray:
    """Strict local maxima along ``axis``.

    A run of equal values whose two flanking neighbours are both strictly
    smaller counts once, at its first index. Elements at either end of a
    line are never maxima.
    """
    v = np.moveaxis(np.asarray(values, dtype=float), axis, -1)
    n = v.shape[-1]
    out = np.zeros(v.shape, dtype=bool)
    if n >= 3:
        step = np.sign(np.diff(v, axis=-1))
        # Sign of the first nonzero step at or after each position (0 if none).
        k = np.arange(n - 1)
        first = np.where(step != 0, k, n - 1)
        first = np.flip(np.minimum.accumulate(np.flip(first, -1), axis=-1), -1)
        padded = np.concatenate([step, np.zeros(step.shape[:-1] + (1,))], axis=-1)
        ahead = np.take_along_axis(padded, first, axis=-1)
        out[..., 1:-1] = (step[..., :-1] > 0) & (ahead[..., 1:] < 0)
    return np.moveaxis(out, -1, axis)


def find_peaks(img: IntensityImage) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All local maxima along the scan axis, in row-major order.

    Returns ``(rows, cols, values)``; no intensity criterion is applied.
    """
    axis = 1 if img.scan_axis == "x" else 0
    mask = local_maxima_mask(img.values, axis=axis)
    rows, cols = np.nonzero(mask)
    return rows, cols, img.values[rows, cols]


def peak_detections(img: IntensityImage, transform: Transform2D | None = None):
    """Peak locations (optionally mapped by ``transform``) and intensities."""
    rows, cols, vals = find_peaks(img)
    pts = img.pixel_locations(rows, cols)
    if transform is not None:
        pts = transform_points(transform, pts)
    return pts, vals


def extract_hits(img: IntensityImage, null: NullModel,
                 conf_threshold: float = DEFAULT_THRESHOLD,
                 sensor: str = "") -> Hits:
    """Pixels with null confidence above ``conf_threshold`` that are local
    maxima along the image's scan axis."""
    if not 0.0 < conf_threshold < 1.0:
        raise ValueError("conf_threshold must lie in (0, 1)")
    rows, cols, vals = find_peaks(img)
    conf = confidence(null, vals)
    keep = conf > conf_threshold
    rows, cols, vals, conf = rows[keep], cols[keep], vals[keep], conf[keep]
    return Hits(img.pixel_locations(rows, cols), hit_weight(null, vals), conf, sensor)


def mask_hits(hits: Hits, excluded, transform: Transform2D | None = None,
              margins: bool = False) -> Hits:
    """Drop hits lying in the exclusion polygons of ``excluded``.

    ``excluded`` is a :class:`~scatterfuse.evaluation.RegionSet`. With
    ``margins=True`` hits in the margin bands around defect polygons are
    dropped as well. ``transform`` maps hit locations into the regions' frame
    when they differ.
    """
    from .evaluation import ignored_mask, in_exclusions

    if len(hits) == 0:
        return hits
    pts = hits.locations if transform is None else transform_points(transform, hits.locations)
    drop = ignored_mask(pts, excluded) if margins else in_exclusions(pts, excluded)
    return hits.subset(~drop)


# --- file formats ----------------------------------------------------------

def save_image(img: IntensityImage, csv_path, fmt: str = "%.17g",
               extra: dict | None = None) -> Path:
    """Write the pixel grid as CSV plus a ``.json`` sidecar; return the
    sidecar path."""
    csv_path = Path(csv_path)
    rows, cols = img.shape
    header = ",".join(f"c{j}" for j in range(cols))
    np.savetxt(csv_path, img.values, fmt=fmt, delimiter=",", header=header,
               comments="", encoding="utf-8")
    meta = {"data": csv_path.name, "rows": rows, "cols": cols,
            "pitch_x": img.pitch_x, "pitch_y": img.pitch_y,
            "origin": [img.origin.x, img.origin.y], "scan_axis": img.scan_axis}
    if extra:
        meta.update(extra)
    sidecar = csv_path.with_suffix(".json")
    sidecar.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return sidecar


def load_image(path) -> tuple[IntensityImage, dict]:
    """Load an image from its sidecar JSON (or its CSV, sidecar alongside)."""
    path = Path(path)
    sidecar = path if path.suffix == ".json" else path.with_suffix(".json")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    data = sidecar.parent / meta.get("data", sidecar.with_suffix(".csv").name)
    try:
        values = np.loadtxt(data, delimiter=",", skiprows=1, ndmin=2, encoding="utf-8")
    except ValueError:
        raise ValueError(_first_bad_line(data)) from None
    if "rows" in meta and values.shape != (meta["rows"], meta["cols"]):
        raise ValueError(f"{data}: grid is {values.shape}, sidecar says "
                         f"{(meta['rows'], meta['cols'])}")
    img = IntensityImage(values, float(meta["pitch_x"]), float(meta["pitch_y"]),
                         Point2(*meta.get("origin", (0.0, 0.0))),
                         meta.get("scan_axis", "x"))
    return img, meta


def _first_bad_line(path) -> str:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        width = len(next(reader, []))
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != width:
                    raise ValueError
                [float(v) for v in row]
            except ValueError:
                return f"{path}:{lineno}: malformed record"
    return f"{path}: malformed image grid"


def save_hits(hits: Hits, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sensor", "x", "y", "weight", "confidence"])
        for (x, y), wt, c in zip(hits.locations, hits.weights, hits.confidences):
            w.writerow([hits.sensor, repr(float(x)), repr(float(y)),
                        repr(float(wt)), repr(float(c))])


def load_hits(path, sensor: str | None = None) -> Hits:
    rows = read_numeric_csv(path, ["x", "y", "weight", "confidence"])
    if sensor is None:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            first = next(reader, None)
            sensor = first["sensor"] if first and "sensor" in first else ""
    return Hits(rows[:, :2], rows[:, 2], rows[:, 3], sensor)
