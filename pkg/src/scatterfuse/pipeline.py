"""End-to-end chain: null estimation, hit extraction, masking, bandwidth
selection, fusion and per-defect scoring against single-sensor peaks.

All inputs are given in a common *global* frame (the frame of the region
polygons). Each sensor carries its nominal global-to-sensor transform; the
fused density is evaluated on a super-sampled copy of an evaluation
sensor's measurement grid, in that sensor's own frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .detect import (DEFAULT_THRESHOLD, Hits, IntensityImage, NullModel, estimate_null,
                     extract_hits, mask_hits, peak_detections)
from .evaluation import (LabeledDetections, RegionSet, label_detections,
                         per_defect_scores, worst_case)
from .fusion import (Bandwidth, DensityField, EvalGrid, Modes, SensorDataset, fused_modes,
                     select_bandwidth)
from .geometry import Transform2D, registration_error, transform_points


@dataclass
class SensorInput:
    """One sensor's preprocessed image and its placement.

    ``transform`` maps global coordinates into the sensor frame.
    ``correspondences`` are ``(global points, sensor points)`` used to
    quantify the residual registration error of ``transform``.
    """

    sensor_id: str
    image: IntensityImage
    transform: Transform2D
    null_samples: np.ndarray = field(repr=False)
    correspondences: tuple[np.ndarray, np.ndarray] | None = None
    bandwidth: Bandwidth | None = None


@dataclass
class PipelineConfig:
    conf_threshold: float = DEFAULT_THRESHOLD
    a: float = 1.0
    u_hat: float | None = None  # None: measure from correspondences
    u_hat_summary: str = "mean"
    weighted: bool = True
    supersample: int = 4
    eval_frames: Sequence[str] | None = None  # None: first sensor only
    mask_hits: bool = True
    workers: int = 1
    overview: tuple[int, int] | None = None  # max-pool factor (rows, cols) for a field overview


@dataclass
class FrameResult:
    frame: str
    grid: EvalGrid
    modes: Modes
    labeled: LabeledDetections
    scores: dict[str, float]
    overview: DensityField | None = None


@dataclass
class PipelineResult:
    u_hat: float
    nulls: dict[str, NullModel]
    hits: dict[str, Hits]
    datasets: dict[str, list[SensorDataset]]  # per evaluation frame
    fused: dict[str, FrameResult]
    single: dict[str, LabeledDetections]
    single_scores: dict[str, dict[str, float]]

    @property
    def fused_scores(self) -> dict[str, float]:
        """Per-defect worst case over the evaluation frames."""
        return worst_case(*(f.scores for f in self.fused.values()))

    @property
    def primary(self) -> FrameResult:
        return next(iter(self.fused.values()))


def measure_u_hat(inputs: Sequence[SensorInput], summary: str = "mean") -> float:
    """Largest per-sensor registration error summary; 0 when no sensor has
    correspondences."""
    errs = [registration_error(s.correspondences, s.transform).u_hat(summary)
            for s in inputs if s.correspondences is not None and len(s.correspondences[0])]
    return float(max(errs)) if errs else 0.0


def image_bounds(img: IntensityImage) -> tuple[float, float, float, float]:
    rows, cols = img.shape
    return (img.origin.x, img.origin.y, img.origin.x + (cols - 1) * img.pitch_x,
            img.origin.y + (rows - 1) * img.pitch_y)


def sensor_grid(img: IntensityImage, pitch_x: float, pitch_y: float,
                supersample: int = 4) -> EvalGrid:
    """Grid over ``img``'s extent with steps ``pitch / supersample``."""
    return EvalGrid.covering(*image_bounds(img), pitch_x / supersample, pitch_y / supersample)


def single_sensor_detections(s: SensorInput, regions: RegionSet) -> LabeledDetections:
    """All intensity peaks of one sensor, labeled in the global frame."""
    pts, vals = peak_detections(s.image, s.transform.inverse())
    return label_detections(pts, vals, regions)




def run(inputs: Sequence[SensorInput], regions: RegionSet,
        config: PipelineConfig = PipelineConfig(),
        single_regions: dict[str, RegionSet] | None = None) -> PipelineResult:
    """Fuse ``inputs`` and score fused modes and single-sensor peaks.

    ``single_regions`` optionally gives per-sensor ground truth for the
    single-sensor peaks; ``regions`` is used otherwise.
    """
    if not inputs:
        raise ValueError("no sensors")
    ids = [s.sensor_id for s in inputs]
    if len(set(ids)) != len(ids):
        raise ValueError("sensor ids must be unique")
    by_id = {s.sensor_id: s for s in inputs}
    u_hat = config.u_hat if config.u_hat is not None else measure_u_hat(inputs,
                                                                          config.u_hat_summary)

    nulls, hits = {}, {}
    for s in inputs:
        nulls[s.sensor_id] = estimate_null(s.null_samples)
        h = extract_hits(s.image, nulls[s.sensor_id], config.conf_threshold, s.sensor_id)
        if config.mask_hits:
            h = mask_hits(h, regions, s.transform.inverse())
        if not config.weighted:
            h = h.with_weights(np.ones(len(h)))
        hits[s.sensor_id] = h

    frames = list(config.eval_frames) if config.eval_frames else [ids[0]]
    unknown = [f for f in frames if f not in by_id]
    if unknown:
        raise ValueError(f"unknown evaluation frame(s) {unknown}")
    datasets, fused = {}, {}
    for fid in frames:
        ref = by_id[fid]
        ref_inv = ref.transform.inverse()
        ds = []
        for s in inputs:
            pitch = (s.image.pitch_x, s.image.pitch_y)
            bw = s.bandwidth or select_bandwidth(pitch, u_hat, config.a)
            ds.append(SensorDataset(s.sensor_id, hits[s.sensor_id],
                                    s.transform.compose(ref_inv), pitch, bw))
        grid = sensor_grid(ref.image, min(d.pitch[0] for d in ds),
                           min(d.pitch[1] for d in ds), config.supersample)
        modes = fused_modes(ds, grid, ref.image.scan_axis, workers=config.workers,
                            with_pooled=config.overview)
        overview = None
        if config.overview is not None:
            modes, overview = modes
        pts = transform_points(ref_inv, modes.points)
        labeled = label_detections(pts, modes.scores, regions)
        datasets[fid] = ds
        fused[fid] = FrameResult(fid, grid, modes, labeled, per_defect_scores(labeled), overview)

    single_regions = single_regions or {}
    single = {s.sensor_id: single_sensor_detections(s, single_regions.get(s.sensor_id, regions))
              for s in inputs}
    single_scores = {k: per_defect_scores(v) for k, v in single.items()}
    return PipelineResult(u_hat, nulls, hits, datasets, fused, single, single_scores)


def from_simulation(sims, regions: RegionSet | None = None) -> list[SensorInput]:
    """Pipeline inputs from :class:`~scatterfuse.sim.SimulatedSensor` objects."""
    from .sim import null_samples

    return [SensorInput(s.spec.sensor_id, s.image, s.nominal, null_samples(s), s.landmarks)
            for s in sims]


def reframe(inputs: Sequence[SensorInput], regions: RegionSet, t: Transform2D):
    """Express inputs and regions in a new global frame ``t(global)``.

    ``regions`` may also be a dict of region sets.
    """
    t_inv = t.inverse()
    out = []
    for s in inputs:
        corr = None
        if s.correspondences is not None:
            corr = (transform_points(t, s.correspondences[0]), s.correspondences[1])
        out.append(replace(s, transform=s.transform.compose(t_inv), correspondences=corr))
    if isinstance(regions, dict):
        return out, {k: r.transformed(t) for k, r in regions.items()}
    return out, regions.transformed(t)
