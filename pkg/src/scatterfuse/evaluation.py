"""Ground-truth labeling and precision-recall scoring of point detections.

Detections inside a defect polygon are *on* that defect. Detections inside
an exclusion polygon, or within ``margin`` of a defect polygon without being
inside it, are *ignored*. Everything else is *off*. Points on a polygon edge
count as inside.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Transform2D, transform_points

ON, OFF, IGNORED = 0, 1, 2
ALL = None


class InvalidPolygon(ValueError):
    pass


class NoPositives(ValueError):
    pass


@dataclass(frozen=True)
class Polygon:
    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        if len(v) > 1 and np.array_equal(v[0], v[-1]):
            v = v[:-1]
        if len(v) < 3:
            raise InvalidPolygon("polygon needs at least 3 distinct vertices")
        if not np.all(np.isfinite(v)):
            raise InvalidPolygon("polygon vertices must be finite")
        if _self_intersects(v):
            raise InvalidPolygon("polygon edges intersect")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @classmethod
    def rectangle(cls, x0: float, y0: float, x1: float, y1: float) -> Polygon:
        return cls([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        v = self.vertices
        return (float(v[:, 0].min()), float(v[:, 1].min()),
                float(v[:, 0].max()), float(v[:, 1].max()))

    @property
    def centroid(self) -> np.ndarray:
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        cross = v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]
        area = cross.sum() / 2
        cx = ((v[:, 0] + w[:, 0]) * cross).sum() / (6 * area)
        cy = ((v[:, 1] + w[:, 1]) * cross).sum() / (6 * area)
        return np.array([cx, cy])

    def transformed(self, t: Transform2D) -> Polygon:
        return Polygon(transform_points(t, self.vertices))

    def contains(self, pts) -> np.ndarray:
        return points_in_polygon(pts, self.vertices)

    def distance(self, pts) -> np.ndarray:
        return distance_to_boundary(pts, self.vertices)


def _self_intersects(v: np.ndarray) -> bool:
    n = len(v)
    edges = [(v[i], v[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(*edges[i], *edges[j]):
                return True
    return False


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    if d1 * d2 < 0 and d3 * d4 < 0:
        return True
    return False


def points_in_polygon(pts, vertices) -> np.ndarray:
    """Even-odd rule, with points on an edge counted as inside."""
    p = np.atleast_2d(np.asarray(pts, dtype=float))
    v = np.asarray(vertices, dtype=float)
    x, y = p[:, 0:1], p[:, 1:2]
    x0, y0 = v[:, 0], v[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    straddle = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    inside = np.logical_xor.reduce(straddle & (x < xcross), axis=1)
    return inside | (distance_to_boundary(p, v) == 0.0)


def distance_to_boundary(pts, vertices) -> np.ndarray:
    """Euclidean distance from each point to the polygon outline."""
    p = np.atleast_2d(np.asarray(pts, dtype=float))
    a = np.asarray(vertices, dtype=float)
    b = np.roll(a, -1, axis=0)
    ab = b - a
    len2 = np.sum(ab * ab, axis=1)
    ap_x = p[:, 0:1] - a[:, 0]
    ap_y = p[:, 1:2] - a[:, 1]
    t = np.clip((ap_x * ab[:, 0] + ap_y * ab[:, 1]) / len2, 0.0, 1.0)
    dx = ap_x - t * ab[:, 0]
    dy = ap_y - t * ab[:, 1]
    return np.sqrt(np.min(dx * dx + dy * dy, axis=1))


@dataclass(frozen=True)
class RegionSet:
    defect_regions: tuple[tuple[str, Polygon], ...] = ()
    margin: float = 0.0
    exclusions: tuple[Polygon, ...] = ()

    def __post_init__(self):
        if not self.margin >= 0:
            raise ValueError("margin must be nonnegative")
        object.__setattr__(self, "defect_regions", tuple(
            (str(i), p if isinstance(p, Polygon) else Polygon(p))
            for i, p in self.defect_regions))
        object.__setattr__(self, "exclusions", tuple(
            p if isinstance(p, Polygon) else Polygon(p) for p in self.exclusions))

    @property
    def defect_ids(self) -> list[str]:
        return [i for i, _ in self.defect_regions]

    def transformed(self, t: Transform2D) -> RegionSet:
        """Regions mapped by ``t``; exact for rigid ``t`` (margins are
        distances and are not rescaled)."""
        return RegionSet(tuple((i, p.transformed(t)) for i, p in self.defect_regions),
                         self.margin, tuple(p.transformed(t) for p in self.exclusions))

    def to_dict(self) -> dict:
        return {"defects": [{"id": i, "polygon": p.vertices.tolist()}
                            for i, p in self.defect_regions],
                "margin_mm": self.margin,
                "exclusions": [p.vertices.tolist() for p in self.exclusions]}

    @classmethod
    def from_dict(cls, d: dict) -> RegionSet:
        defects = tuple((str(e["id"]), Polygon(e["polygon"])) for e in d.get("defects", []))
        excl = tuple(Polygon(e["polygon"] if isinstance(e, dict) else e)
                     for e in d.get("exclusions", []))
        return cls(defects, float(d.get("margin_mm", 0.0)), excl)


def save_regions(regions: RegionSet, path) -> None:
    Path(path).write_text(json.dumps(regions.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_regions(path) -> RegionSet:
    return RegionSet.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class LabeledDetections:
    """Column-oriented labeled detections.

    ``kind`` is ``ON``, ``OFF`` or ``IGNORED``; ``defect`` holds the defect
    index into ``defect_ids`` for ``ON`` rows and -1 otherwise.
    """

    locations: np.ndarray
    scores: np.ndarray
    kind: np.ndarray
    defect: np.ndarray
    defect_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.scores)

    def counts(self) -> dict[str, int]:
        return {"on": int(np.sum(self.kind == ON)), "off": int(np.sum(self.kind == OFF)),
                "ignored": int(np.sum(self.kind == IGNORED))}

    def label_of(self, i: int):
        if self.kind[i] == ON:
            return ("on_defect", self.defect_ids[self.defect[i]])
        return "off_defect" if self.kind[i] == OFF else "ignored"


def _candidates(pts: np.ndarray, poly: Polygon, pad: float) -> np.ndarray:
    x0, y0, x1, y1 = poly.bounds
    return np.nonzero((pts[:, 0] >= x0 - pad) & (pts[:, 0] <= x1 + pad)
                      & (pts[:, 1] >= y0 - pad) & (pts[:, 1] <= y1 + pad))[0]


def label_detections(points, scores, regions: RegionSet) -> LabeledDetections:
    """Label detections by location; priority exclusion > defect > margin > off."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    scores = np.asarray(scores, dtype=float).reshape(len(pts))
    kind = np.full(len(pts), OFF, dtype=np.int8)
    defect = np.full(len(pts), -1, dtype=np.int64)

    in_margin = np.zeros(len(pts), dtype=bool)
    for k, (_, poly) in enumerate(regions.defect_regions):
        idx = _candidates(pts, poly, regions.margin)
        if idx.size == 0:
            continue
        inside = poly.contains(pts[idx])
        hit = idx[inside]
        fresh = hit[kind[hit] != ON]
        kind[fresh] = ON
        defect[fresh] = k
        if regions.margin > 0:
            rest = idx[~inside]
            in_margin[rest[poly.distance(pts[rest]) <= regions.margin]] = True
    kind[(kind == OFF) & in_margin] = IGNORED
    for poly in regions.exclusions:
        idx = _candidates(pts, poly, 0.0)
        if idx.size:
            ex = idx[poly.contains(pts[idx])]
            kind[ex] = IGNORED
            defect[ex] = -1
    return LabeledDetections(pts, scores, kind, defect, regions.defect_ids)


def ignored_mask(points, regions: RegionSet) -> np.ndarray:
    """True where a location falls in an exclusion or a defect margin band."""
    return label_detections(points, np.zeros(len(np.atleast_2d(points))), regions).kind == IGNORED


def in_exclusions(points, regions: RegionSet) -> np.ndarray:
    """True where a location falls in any exclusion polygon."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    out = np.zeros(len(pts), dtype=bool)
    for poly in regions.exclusions:
        idx = _candidates(pts, poly, 0.0)
        if idx.size:
            out[idx[poly.contains(pts[idx])]] = True
    return out


@dataclass(frozen=True)
class PRCurve:
    """Precision and recall at each distinct score threshold, descending."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_positive: int

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.precision.tolist(),
                        self.recall.tolist()))

    @property
    def auc_pr_05(self) -> float:
        return auc_pr_05(self)

    def false_alarms_at_recall(self, level: float = 0.5) -> int:
        """Off-defect count at the highest threshold whose recall reaches
        ``level``."""
        idx = np.nonzero(self.recall >= level)[0]
        return int(self.fp[idx[0]]) if idx.size else int(self.fp[-1])


def pr_curve(labeled: LabeledDetections, defect_id: str | None = ALL) -> PRCurve:
    """Precision-recall curve for one defect (others ignored) or all defects.

    The recall denominator is the number of on-defect detections at an
    infinitely low threshold.
    """
    if defect_id is ALL:
        pos = labeled.kind == ON
    else:
        if defect_id not in labeled.defect_ids:
            raise KeyError(f"unknown defect {defect_id!r}")
        pos = (labeled.kind == ON) & (labeled.defect == labeled.defect_ids.index(defect_id))
    neg = labeled.kind == OFF
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise NoPositives(f"no on-defect detections for {defect_id or 'any defect'}")

    use = pos | neg
    s = labeled.scores[use]
    y = pos[use]
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # Keep the last index of each run of tied scores.
    last = np.r_[s[1:] != s[:-1], True]
    tp, fp, thr = tp[last], fp[last], s[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return PRCurve(thr, precision, recall, tp, fp, n_pos)


def auc_pr_05(curve: PRCurve) -> float:
    """Trapezoidal area under precision over recall in ``(0.5, 1]``."""
    r = np.r_[0.0, curve.recall]
    p = np.r_[curve.precision[0], curve.precision]
    area = 0.0
    for k in range(1, len(r)):
        r0, r1, p0, p1 = r[k - 1], r[k], p[k - 1], p[k]
        if r1 <= 0.5 or r1 == r0:
            continue
        if r0 < 0.5:
            p0 = p0 + (p1 - p0) * (0.5 - r0) / (r1 - r0)
            r0 = 0.5
        area += 0.5 * (p0 + p1) * (r1 - r0)
    return float(min(max(area, 0.0), 0.5))


def evaluate(labeled: LabeledDetections, defect_ids: Sequence[str] | None = None
             ) -> dict[str, PRCurve | None]:
    """Per-defect curves; ``None`` where a defect has no on-detections."""
    out = {}
    for d in defect_ids if defect_ids is not None else labeled.defect_ids:
        try:
            out[d] = pr_curve(labeled, d)
        except NoPositives:
            out[d] = None
    return out


def per_defect_scores(labeled: LabeledDetections) -> dict[str, float]:
    """AUC-PR-0.5 per defect, 0 for defects without on-detections."""
    return {d: (c.auc_pr_05 if c is not None else 0.0)
            for d, c in evaluate(labeled).items()}


def worst_case(*score_maps: dict[str, float]) -> dict[str, float]:
    """Per-defect minimum across several evaluation runs."""
    keys = score_maps[0].keys()
    return {k: min(m[k] for m in score_maps) for k in keys}


def save_report(labeled: LabeledDetections, path, curves_dir=None) -> list[dict]:
    """Write the per-defect report CSV ``defect_id,auc_pr_05,n_on,n_off`` and
    optionally one PR-curve CSV per defect."""
    rows = []
    n_off = int(np.sum(labeled.kind == OFF))
    for k, d in enumerate(labeled.defect_ids):
        n_on = int(np.sum((labeled.kind == ON) & (labeled.defect == k)))
        curve = pr_curve(labeled, d) if n_on else None
        auc = curve.auc_pr_05 if curve is not None else 0.0
        rows.append({"defect_id": d, "auc_pr_05": auc, "n_on": n_on, "n_off": n_off})
        if curves_dir is not None and curve is not None:
            save_curve(curve, Path(curves_dir) / f"pr_{d}.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["defect_id", "auc_pr_05", "n_on", "n_off"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "auc_pr_05": repr(r["auc_pr_05"])})
    return rows


def load_report(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{"defect_id": r["defect_id"], "auc_pr_05": float(r["auc_pr_05"]),
                 "n_on": int(r["n_on"]), "n_off": int(r["n_off"])}
                for r in csv.DictReader(fh)]


def save_curve(curve: PRCurve, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall", "tp", "fp"])
        for t, p, r, a, b in zip(curve.thresholds, curve.precision, curve.recall,
                                 curve.tp, curve.fp):
            w.writerow([repr(float(t)), repr(float(p)), repr(float(r)), int(a), int(b)])
