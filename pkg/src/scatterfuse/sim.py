"""Synthetic specimen and sensor generator.

The default specimen is an unrolled ring surface (outer diameter 215 mm,
73 mm long) carrying 15 axial grooves of 1 mm length and graded depth in two
rows. Each simulated sensor images that surface on its own pixel grid with

* groove indications whose peak grows with ``log(depth)``,
* seeded structural clutter (lines or blobs) that repeats for a given seed
  but is independent between sensors,
* smoothed white measurement noise,

and sees the surface through a slightly perturbed frame, so mapping its
data with the nominal transform leaves a known registration error.

Intensities are rounded to 4 decimals so ``%.4f`` CSV output is lossless.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .detect import IntensityImage
from .evaluation import Polygon, RegionSet
from .geometry import Point2, Transform2D, transform_points

GROOVE_DEPTHS_UM = (354, 224, 170, 105, 82, 61, 57, 53, 43, 40, 39, 27, 29, 20, 11)
RING_DIAMETER_MM = 215.0
RING_LENGTH_MM = 73.0
GROOVE_LENGTH_MM = 1.0
SENSOR_PITCHES = {"ET": (0.029, 0.200), "MFL": (0.029, 0.200), "TT": (0.469, 0.126)}
DECIMALS = 4
IMAGE_FMT = "%.4f"


class OutOfExtent(ValueError):
    pass


@dataclass(frozen=True)
class Groove:
    id: str
    center: tuple[float, float]
    length: float = GROOVE_LENGTH_MM
    orientation_deg: float = 90.0  # 90 = along the surface y axis
    depth_um: float = 100.0

    def endpoints(self) -> np.ndarray:
        t = np.deg2rad(self.orientation_deg)
        d = 0.5 * self.length * np.array([np.cos(t), np.sin(t)])
        c = np.asarray(self.center, dtype=float)
        return np.array([c - d, c + d])


@dataclass(frozen=True)
class SpecimenSpec:
    width: float = np.pi * RING_DIAMETER_MM
    height: float = RING_LENGTH_MM
    grooves: tuple[Groove, ...] = ()
    polygon_pad: tuple[float, float] = (0.2, 0.0)
    margin: float = 0.5
    border: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grooves"] = [asdict(g) for g in self.grooves]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SpecimenSpec:
        d = dict(d)
        grooves = tuple(Groove(**{**g, "center": tuple(g["center"])}) for g in d.pop("grooves", []))
        for k in ("polygon_pad",):
            if k in d:
                d[k] = tuple(d[k])
        return cls(grooves=grooves, **d)


@dataclass(frozen=True)
class SensorSpec:
    """One simulated inspection method.

    ``frame`` is the nominal surface-to-sensor map (rotation in degrees and
    translation in mm). ``perturbation`` shifts the surface by
    ``shift_mm`` in direction ``angle_deg`` and rotates it by
    ``rotation_deg`` about its center before the sensor sees it.
    """

    sensor_id: str
    pitch: tuple[float, float]
    response_scale: float = 5.5
    response_floor_um: float = 10.0
    groove_sigma_px: float = 1.0
    groove_overhang_mm: float = 0.0  # indications run past the groove tips
    noise_sigma: float = 1.0
    noise_corr_px: tuple[float, float] = (0.0, 0.0)
    clutter_rate: float = 0.5  # structures per 100 mm^2
    clutter_kind: str = "lines"
    clutter_amplitude: tuple[float, float] = (1.5, 6.0)
    clutter_length: tuple[float, float] = (0.5, 3.0)
    clutter_sigma_px: float = 1.0
    frame: dict = field(default_factory=lambda: {"angle_deg": 0.0, "tx": 0.0, "ty": 0.0})
    perturbation: dict = field(default_factory=lambda: {"shift_mm": 0.0, "angle_deg": 0.0,
                                                        "rotation_deg": 0.0})
    n_landmarks: int = 20

    def response(self, depth_um):
        """Expected groove peak intensity (the default noise sigma is 1);
        nondecreasing in depth."""
        r = self.response_scale * np.log(np.asarray(depth_um, dtype=float) / self.response_floor_um)
        return np.maximum(r, 0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SensorSpec:
        d = dict(d)
        for k in ("pitch", "noise_corr_px", "clutter_amplitude", "clutter_length"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class SimulatedSensor:
    spec: SensorSpec
    image: IntensityImage
    nominal: Transform2D  # surface -> sensor frame, as known to the pipeline
    true: Transform2D  # surface -> sensor frame, as realized
    landmarks: tuple[np.ndarray, np.ndarray]  # (surface points, sensor points)
    null_region: tuple[int, int, int, int]  # r0, r1, c0, c1 pixel slice
    clutter_mask: np.ndarray = field(repr=False)


def default_specimen(seed: int = 0) -> SpecimenSpec:
    """Ring surface with the 15 grooves in two staggered rows."""
    w, h = np.pi * RING_DIAMETER_MM, RING_LENGTH_MM
    grooves = []
    for k, depth in enumerate(GROOVE_DEPTHS_UM):
        if k < 8:
            x, y = (k + 0.5) * w / 8, 0.3 * h
        else:
            x, y = (k - 8 + 1.0) * w / 8, 0.7 * h
        grooves.append(Groove(str(k + 1), (x, y), GROOVE_LENGTH_MM, 90.0, float(depth)))
    return SpecimenSpec(w, h, tuple(grooves), seed=seed)


def default_sensors() -> tuple[SensorSpec, ...]:
    """Three profiles with the ET / MFL / TT pixel pitches.

    ET is the registration reference. MFL and TT are each displaced by
    0.2 mm. Clutter shapes differ per method: diagonal lines for ET, blob
    clusters for MFL, near-vertical streaks for TT.
    """
    return (
        SensorSpec("ET", SENSOR_PITCHES["ET"], noise_corr_px=(6.0, 0.0),
                   clutter_kind="diagonal", clutter_rate=0.5,
                   frame={"angle_deg": 0.0, "tx": 2.0137, "ty": 1.0311}),
        SensorSpec("MFL", SENSOR_PITCHES["MFL"], noise_corr_px=(4.0, 0.5),
                   clutter_kind="blobs", clutter_rate=0.5, clutter_sigma_px=2.0,
                   frame={"angle_deg": 0.05, "tx": -1.5, "ty": 0.5},
                   perturbation={"shift_mm": 0.2, "angle_deg": 20.0, "rotation_deg": 0.0}),
        SensorSpec("TT", SENSOR_PITCHES["TT"], noise_corr_px=(0.5, 0.5),
                   clutter_kind="vertical", clutter_rate=0.5,
                   frame={"angle_deg": -0.04, "tx": 0.7, "ty": -2.0},
                   perturbation={"shift_mm": 0.2, "angle_deg": 160.0, "rotation_deg": 0.0}),
    )


# --- ground truth ----------------------------------------------------------

def groove_polygon(g: Groove, pad=(0.0, 0.0)) -> Polygon:
    """Rectangle around the groove, padded across (``pad[0]``) and along
    (``pad[1]``) its length."""
    t = np.deg2rad(g.orientation_deg)
    along = np.array([np.cos(t), np.sin(t)])
    across = np.array([-along[1], along[0]])
    c = np.asarray(g.center, dtype=float)
    hl = 0.5 * g.length + pad[1]
    hw = pad[0]
    corners = [c - hl * along - hw * across, c + hl * along - hw * across,
               c + hl * along + hw * across, c - hl * along + hw * across]
    return Polygon(np.array(corners))


def generate_specimen(spec: SpecimenSpec, pad=None) -> tuple[RegionSet, list[dict]]:
    """Ground-truth regions and the groove table for ``spec``.

    ``pad`` overrides ``spec.polygon_pad`` (across, along the groove).
    """
    pad = spec.polygon_pad if pad is None else pad
    table = []
    for g in spec.grooves:
        ends = g.endpoints()
        if (ends.min() < 0 or np.any(ends[:, 0] > spec.width) or np.any(ends[:, 1] > spec.height)):
            raise OutOfExtent(f"groove {g.id} leaves the {spec.width:g} x {spec.height:g} surface")
        if g.depth_um <= 0:
            raise ValueError(f"groove {g.id} has nonpositive depth")
        table.append({"id": g.id, "x": g.center[0], "y": g.center[1], "length": g.length,
                      "orientation_deg": g.orientation_deg, "depth_um": g.depth_um})
    defects = tuple((g.id, groove_polygon(g, pad)) for g in spec.grooves)
    exclusions = ()
    if spec.border > 0:
        b, w, h = spec.border, spec.width, spec.height
        exclusions = (Polygon.rectangle(-b, -b, w + b, b), Polygon.rectangle(-b, h - b, w + b, h + b),
                      Polygon.rectangle(-b, b, b, h - b), Polygon.rectangle(w - b, b, w + b, h - b))
    return RegionSet(defects, spec.margin, exclusions), table


def sensor_regions(spec: SpecimenSpec, sensor: SensorSpec) -> RegionSet:
    """Ground truth for scoring one sensor's raw peaks.

    Peaks sit on pixel centers, so the groove polygons are widened by half a
    pixel of that sensor along and across the groove.
    """
    px, py = spec.polygon_pad
    return generate_specimen(spec, (px + sensor.pitch[0] / 2, py + sensor.pitch[1] / 2))[0]


# --- sensor simulation ----------------------------------------------------

def sensor_seed(spec_seed: int, sensor_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(spec_seed), zlib.crc32(sensor_id.encode())])


def nominal_transform(s: SensorSpec) -> Transform2D:
    f = s.frame
    return Transform2D.from_params(np.deg2rad(f.get("angle_deg", 0.0)), 1.0,
                                   f.get("tx", 0.0), f.get("ty", 0.0))


def perturbation_transform(s: SensorSpec, specimen: SpecimenSpec) -> Transform2D:
    p = s.perturbation
    shift, ang = p.get("shift_mm", 0.0), np.deg2rad(p.get("angle_deg", 0.0))
    rot = Transform2D.from_params(np.deg2rad(p.get("rotation_deg", 0.0)))
    c = np.array([specimen.width / 2, specimen.height / 2])
    about = Transform2D.translation(*c).compose(rot).compose(Transform2D.translation(*-c))
    return Transform2D.translation(shift * np.cos(ang), shift * np.sin(ang)).compose(about)


def _segment_window(img: np.ndarray, p0, p1, sigma: float):
    """Pixel window around segment ``p0 -> p1`` (col, row coordinates) and the
    squared distance of each window pixel to the segment."""
    rows, cols = img.shape
    reach = 4.0 * sigma + 1.0
    c0 = max(int(np.floor(min(p0[0], p1[0]) - reach)), 0)
    c1 = min(int(np.ceil(max(p0[0], p1[0]) + reach)) + 1, cols)
    r0 = max(int(np.floor(min(p0[1], p1[1]) - reach)), 0)
    r1 = min(int(np.ceil(max(p0[1], p1[1]) + reach)) + 1, rows)
    if c0 >= c1 or r0 >= r1:
        return None
    cc, rr = np.meshgrid(np.arange(c0, c1), np.arange(r0, r1))
    d = np.asarray(p1, float) - np.asarray(p0, float)
    len2 = d @ d
    if len2 > 0:
        t = np.clip(((cc - p0[0]) * d[0] + (rr - p0[1]) * d[1]) / len2, 0.0, 1.0)
    else:
        t = 0.0
    dc = cc - (p0[0] + t * d[0])
    dr = rr - (p0[1] + t * d[1])
    return (slice(r0, r1), slice(c0, c1)), dc * dc + dr * dr


def render_segment(img: np.ndarray, p0, p1, amplitude: float, sigma: float) -> np.ndarray | None:
    """Add a Gaussian-profile ridge along a pixel-space segment; returns the
    window's support mask."""
    win = _segment_window(img, p0, p1, sigma)
    if win is None:
        return None
    sl, d2 = win
    img[sl] += amplitude * np.exp(-0.5 * d2 / sigma**2)
    return sl, d2 <= (2.0 * sigma) ** 2


def _smoothed_noise(rng: np.random.Generator, shape, sigma: float, corr) -> np.ndarray:
    noise = rng.standard_normal(shape)
    gain = 1.0
    for axis, s in ((1, corr[0]), (0, corr[1])):
        if s > 0:
            noise = gaussian_filter1d(noise, s, axis=axis, mode="wrap")
            gain *= _filter_gain(s)
    return noise * (sigma / gain)


def _filter_gain(s: float) -> float:
    """Standard deviation of unit white noise after ``gaussian_filter1d``."""
    radius = int(4.0 * s + 0.5)
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / s) ** 2)
    k /= k.sum()
    return float(np.sqrt(np.sum(k * k)))


def _clutter_segments(rng: np.random.Generator, s: SensorSpec, extent) -> list:
    x0, y0, x1, y1 = extent
    area = (x1 - x0) * (y1 - y0)
    n = rng.poisson(s.clutter_rate * area / 100.0)
    lo, hi = s.clutter_amplitude
    segs = []
    if s.clutter_kind == "blobs":
        # Clusters of 1-6 blobs within 3 mm of a cluster center.
        centers = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])
        for c in centers:
            for _ in range(int(rng.integers(1, 7))):
                p = c + rng.normal(0.0, 1.0, 2)
                segs.append((p, p, rng.uniform(lo, hi), s.clutter_sigma_px))
        return segs
    for _ in range(n):
        c = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        length = rng.uniform(*s.clutter_length)
        if s.clutter_kind == "vertical":
            ang = np.deg2rad(90.0 + rng.normal(0.0, 3.0))
        elif s.clutter_kind == "diagonal":
            ang = np.deg2rad(rng.choice([45.0, 135.0]) + rng.normal(0.0, 8.0))
        elif s.clutter_kind == "lines":
            ang = rng.uniform(0.0, np.pi)
        else:
            raise ValueError(f"unknown clutter kind {s.clutter_kind!r}")
        d = 0.5 * length * np.array([np.cos(ang), np.sin(ang)])
        segs.append((c - d, c + d, rng.uniform(lo, hi), s.clutter_sigma_px))
    return segs


def simulate_sensor(specimen: SpecimenSpec, sensor: SensorSpec,
                    rng: np.random.Generator | None = None) -> SimulatedSensor:
    """Render one sensor's preprocessed image of the specimen.

    Without an explicit ``rng`` the stream is derived from the specimen seed
    and the sensor id, so sensors are reproducible and mutually independent.
    """
    if rng is None:
        rng = np.random.default_rng(sensor_seed(specimen.seed, sensor.sensor_id))
    dx, dy = sensor.pitch
    if not (dx > 0 and dy > 0):
        raise ValueError("sensor pitch must be positive")
    if sensor.noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    nominal = nominal_transform(sensor)
    true = nominal.compose(perturbation_transform(sensor, specimen))

    corners = np.array([[0, 0], [specimen.width, 0], [specimen.width, specimen.height],
                        [0, specimen.height]], dtype=float)
    sc = transform_points(true, corners)
    ox = np.floor(sc[:, 0].min() / dx) * dx
    oy = np.floor(sc[:, 1].min() / dy) * dy
    cols = int(np.ceil((sc[:, 0].max() - ox) / dx)) + 1
    rows = int(np.ceil((sc[:, 1].max() - oy) / dy)) + 1

    def to_px(p):
        return ((p[..., 0] - ox) / dx, (p[..., 1] - oy) / dy)

    noise_rng, clutter_rng, mark_rng = rng.spawn(3)

    values = np.zeros((rows, cols))
    clutter = np.zeros((rows, cols), dtype=bool)
    extent = (ox, oy, ox + (cols - 1) * dx, oy + (rows - 1) * dy)
    for p0, p1, amp, sig in _clutter_segments(clutter_rng, sensor, extent):
        c0, r0 = to_px(np.asarray(p0))
        c1, r1 = to_px(np.asarray(p1))
        out = render_segment(values, (c0, r0), (c1, r1), amp, sig)
        if out is not None:
            sl, m = out
            clutter[sl] |= m

    for g in specimen.grooves:
        ends = transform_points(true, replace(g, length=g.length + 2 * sensor.groove_overhang_mm)
                                .endpoints())
        cs, rs = to_px(ends)
        amp = float(sensor.response(g.depth_um))
        if amp > 0:
            render_segment(values, (cs[0], rs[0]), (cs[1], rs[1]), amp, sensor.groove_sigma_px)

    if sensor.noise_sigma > 0:
        values += _smoothed_noise(noise_rng, (rows, cols), sensor.noise_sigma, sensor.noise_corr_px)
    values = np.round(values, DECIMALS)

    a = np.column_stack([mark_rng.uniform(2.0, specimen.width - 2.0, sensor.n_landmarks),
                         mark_rng.uniform(2.0, specimen.height - 2.0, sensor.n_landmarks)])
    b = transform_points(true, a)

    # Defect-free strip between the two groove rows, in nominal pixel rows.
    band = transform_points(nominal, np.array([[specimen.width / 2, 0.42 * specimen.height],
                                               [specimen.width / 2, 0.58 * specimen.height]]))
    r_lo, r_hi = sorted(((band[:, 1] - oy) / dy).astype(int))
    null_region = (max(int(r_lo), 0), min(int(r_hi), rows), 0, cols)

    image = IntensityImage(values, dx, dy, Point2(ox, oy), "x")
    return SimulatedSensor(sensor, image, nominal, true, (a, b), null_region, clutter)


def null_samples(sim: SimulatedSensor) -> np.ndarray:
    r0, r1, c0, c1 = sim.null_region
    return sim.image.values[r0:r1, c0:c1].ravel()


def with_shift(sensors, shift_mm: float) -> tuple[SensorSpec, ...]:
    """Copies of ``sensors`` with every nonzero perturbation rescaled to
    ``shift_mm``."""
    out = []
    for s in sensors:
        p = dict(s.perturbation)
        if p.get("shift_mm", 0.0) > 0:
            p["shift_mm"] = shift_mm
        out.append(replace(s, perturbation=p))
    return tuple(out)


def save_specs(path, specimen: SpecimenSpec, sensors) -> None:
    doc = {"specimen": specimen.to_dict(), "sensors": [s.to_dict() for s in sensors]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_specs(path) -> tuple[SpecimenSpec, tuple[SensorSpec, ...]]:
    """Read a spec file; missing parts fall back to the defaults.

    ``{"specimen": "default"}`` or an absent specimen selects the ring
    surface; a ``seed`` key at top level overrides the specimen seed.
    """
    doc = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    sp = doc.get("specimen", "default")
    specimen = default_specimen() if sp == "default" else SpecimenSpec.from_dict(sp)
    if "seed" in doc:
        specimen = replace(specimen, seed=int(doc["seed"]))
    sensors = doc.get("sensors", "default")
    sensors = default_sensors() if sensors == "default" else tuple(
        SensorSpec.from_dict(s) for s in sensors)
    return specimen, sensors
