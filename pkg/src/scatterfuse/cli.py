"""Command-line driver.

Subcommands: ``register``, ``detect``, ``fuse``, ``eval``, ``simulate`` and
``pipeline``. Exit status is 0 on success, 1 for usage or configuration
errors and 2 for bad input data.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .detect import (DetectError, IntensityImage, estimate_null, extract_hits,
                     load_hits, load_image, mask_hits, save_hits, save_image)
from .evaluation import (ALL, InvalidPolygon, LabeledDetections, ON, label_detections,
                         load_regions, pr_curve, save_regions, save_report)
from .fusion import (Bandwidth, DensityField, EvalGrid, GridTooCoarse, SensorDataset,
                     default_grid, fused_modes, hit_bounds, select_bandwidth)
from .geometry import (MODEL_KINDS, RegistrationError, Transform2D, fit_transform,
                       load_correspondences, load_transform, read_numeric_csv,
                       registration_error, save_correspondences, save_transform,
                       transform_points)
from .pipeline import PipelineConfig, SensorInput, run
from .svg import write_heatmap

SINGLE_SENSOR_WARNING = "fused density is identically zero with one sensor"
OVERVIEW_MAX = (400, 2000)  # rows, cols of a written field overview


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --- small helpers ---------------------------------------------------------

def _existing(base: Path, p, what: str) -> Path:
    path = Path(p)
    if not path.is_absolute():
        path = base / path
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _read_json(path: Path, what: str) -> dict:
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None


def _transform(base: Path, spec) -> Transform2D:
    """A transform from a file path, an inline dict, or ``None`` (identity)."""
    if spec is None:
        return Transform2D.identity()
    try:
        if isinstance(spec, dict):
            return Transform2D.from_dict(spec)
        path = _existing(base, spec, "transform file")
        try:
            return load_transform(path)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad transform {spec!r}: {exc}") from None


def _parse_region(text: str) -> tuple[int, int, int, int]:
    try:
        r0, r1, c0, c1 = (int(v) for v in text.split(":"))
    except ValueError:
        raise ConfigError(f"null region must be r0:r1:c0:c1, got {text!r}") from None
    return r0, r1, c0, c1


def _null_samples(img: IntensityImage, region) -> np.ndarray:
    r0, r1, c0, c1 = (int(v) for v in region)
    return img.values[r0:r1, c0:c1].ravel()


def _pool_for(grid: EvalGrid, limit=OVERVIEW_MAX) -> tuple[int, int]:
    return (max(1, -(-grid.ny // limit[0])), max(1, -(-grid.nx // limit[1])))


def _field_image(field: DensityField) -> IntensityImage:
    g = field.grid
    return IntensityImage(field.values, g.step_x, g.step_y, g.origin, "x")


def _write_overview(field: DensityField, pool, out: Path, stem: str, polygons, title: str):
    save_image(_field_image(field), out / f"{stem}.csv",
               extra={"kind": "fused_density_overview", "pool": list(pool)})
    write_heatmap(field, out / f"{stem}.svg", polygons, title)


def _write_detections(path: Path, points, scores, labeled: LabeledDetections | None = None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if labeled is None:
            w.writerow(["x", "y", "score"])
            for (x, y), s in zip(points, scores):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(s))])
            return
        w.writerow(["x", "y", "score", "label", "defect_id"])
        for i, ((x, y), s) in enumerate(zip(points, scores)):
            lab = labeled.label_of(i)
            kind, did = (lab if isinstance(lab, tuple) else (lab, ""))
            w.writerow([repr(float(x)), repr(float(y)), repr(float(s)), kind, did])


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _bandwidth(entry: dict, pitch, u_hat_default: float | None, a_default: float):
    bw = entry.get("bandwidth")
    if isinstance(bw, dict) and "h_x" in bw:
        return Bandwidth(float(bw["h_x"]), float(bw["h_y"]))
    bw = bw or {}
    u_hat = bw.get("u_hat", u_hat_default)
    if u_hat is None:
        raise ConfigError(f"sensor {entry.get('id')!r}: no u_hat given for the bandwidth")
    return select_bandwidth(pitch, float(u_hat), float(bw.get("a", a_default)))


# --- subcommands -----------------------------------------------------------

def cmd_register(args) -> int:
    corr = load_correspondences(_existing(Path.cwd(), args.correspondences, "correspondences"))
    if args.transform:
        t = _transform(Path.cwd(), args.transform)
        rep = registration_error(corr, t)
    else:
        rep = fit_transform(corr, args.model)
    if args.out:
        save_transform(rep.transform, args.out)
    print(f"pairs={len(rep.residuals)} model={rep.transform.model} "
          f"mean_error={rep.mean_error:.6g} max_error={rep.max_error:.6g}")
    print(f"u_hat={rep.u_hat(args.summary):.6g}")
    return 0


def cmd_detect(args) -> int:
    img, meta = load_image(_existing(Path.cwd(), args.image, "image"))
    if args.null_samples:
        samples = read_numeric_csv(_existing(Path.cwd(), args.null_samples, "null samples"),
                                   ["value"])[:, 0]
    else:
        region = _parse_region(args.null_region) if args.null_region else meta.get("null_region")
        if region is None:
            raise ConfigError("no null region: pass --null-region or --null-samples")
        samples = _null_samples(img, region)
    sensor = args.sensor or meta.get("sensor_id", "")
    null = estimate_null(samples)
    hits = extract_hits(img, null, args.threshold, sensor)
    n_all = len(hits)
    if args.regions:
        regions = load_regions(_existing(Path.cwd(), args.regions, "regions file"))
        t = _transform(Path.cwd(), args.transform)
        hits = mask_hits(hits, regions, t.inverse())
    save_hits(hits, args.out)
    print(f"sensor={sensor} hits={len(hits)} masked={n_all - len(hits)} "
          f"null_mu={null.mu_robust:.6g} null_sigma={null.sigma_robust:.6g}")
    return 0


def _fuse_sensors(cfg: dict, base: Path) -> list[SensorDataset]:
    entries = cfg.get("sensors")
    if not entries:
        raise ConfigError("config lists no sensors")
    out = []
    for e in entries:
        src = e.get("hits_csv", e.get("hits"))
        if "id" not in e or src is None:
            raise ConfigError("each sensor needs 'id' and 'hits_csv'")
        hits = load_hits(_existing(base, src, "hits file"), e["id"])
        pitch = e.get("pitch")
        if pitch is None or len(pitch) != 2:
            raise ConfigError(f"sensor {e['id']!r}: 'pitch' must be [dx, dy]")
        t = _transform(base, e.get("transform"))
        bw = _bandwidth(e, pitch, cfg.get("u_hat"), float(cfg.get("a", 1.0)))
        out.append(SensorDataset(e["id"], hits, t, tuple(pitch), bw))
    return out


def _grid(cfg: dict, sensors) -> EvalGrid:
    g = cfg.get("grid", {"auto": True})
    if not g.get("auto", False):
        try:
            return EvalGrid.from_dict(g)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"grid needs origin, step_x, step_y, nx, ny ({exc})") from None
    bounds = hit_bounds(sensors, float(g.get("pad", 0.0)))
    if bounds is None:
        raise DataError("no hits to place an automatic grid on")
    return default_grid(sensors, bounds, int(g.get("supersample", 4)))


def cmd_fuse(args) -> int:
    cfg_path = Path(args.config)
    cfg = _read_json(cfg_path, "config")
    base = cfg_path.parent
    sensors = _fuse_sensors(cfg, base)
    if len(sensors) == 1:
        print(f"warning: {SINGLE_SENSOR_WARNING}", file=sys.stderr)
    grid = _grid(cfg, sensors)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pool = _pool_for(grid)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", GridTooCoarse)
        modes, overview = fused_modes(sensors, grid, cfg.get("scan_axis", "x"),
                                      workers=args.workers, with_pooled=pool)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    _write_detections(out / "modes.csv", modes.points, modes.scores)
    polygons = []
    if cfg.get("regions"):
        regions = load_regions(_existing(base, cfg["regions"], "regions file"))
        polygons = [(i, p.vertices) for i, p in regions.defect_regions]
    _write_overview(overview, pool, out, "density", polygons, "fused density")
    _dump(out / "grid.json", grid.to_dict())
    print(f"sensors={len(sensors)} grid={grid.ny}x{grid.nx} modes={len(modes)} "
          f"max={float(modes.scores.max()) if len(modes) else 0.0:.6g}")
    return 0


def cmd_eval(args) -> int:
    det_path = _existing(Path.cwd(), args.detections, "detections file")
    rows = read_numeric_csv(det_path, ["x", "y", "score"])
    pts = rows[:, :2]
    if args.transform:
        pts = transform_points(_transform(Path.cwd(), args.transform), pts)
    regions = load_regions(_existing(Path.cwd(), args.regions, "regions file"))
    labeled = label_detections(pts, rows[:, 2], regions)
    report = save_report(labeled, args.out, args.curves)
    for r in report:
        print(f"{r['defect_id']},{r['auc_pr_05']:.6g},{r['n_on']},{r['n_off']}")
    return 0


def cmd_simulate(args) -> int:
    from . import sim

    spec_path = Path(args.spec) if args.spec else None
    if spec_path is not None and not spec_path.exists():
        raise ConfigError(f"spec file not found: {spec_path}")
    try:
        specimen, sensors = sim.load_specs(spec_path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{spec_path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"{spec_path}: bad spec ({exc})") from None
    if args.seed is not None:
        specimen = replace(specimen, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        regions, table = sim.generate_specimen(specimen)
    except sim.OutOfExtent as exc:
        raise ConfigError(str(exc)) from None
    save_regions(regions, out / "regions.json")
    with open(out / "grooves.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["id", "x", "y", "length", "orientation_deg",
                                           "depth_um"])
        w.writeheader()
        for row in table:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v)
                        for k, v in row.items()})
    sim.save_specs(out / "spec.json", specimen, sensors)
    entries = []
    for s in sensors:
        r = sim.simulate_sensor(specimen, s)
        sid = s.sensor_id
        save_image(r.image, out / f"{sid}.csv", fmt=sim.IMAGE_FMT,
                   extra={"sensor_id": sid, "null_region": list(r.null_region)})
        save_transform(r.nominal, out / f"{sid}_transform.json")
        save_transform(r.true, out / f"{sid}_true_transform.json")
        save_correspondences(*r.landmarks, out / f"{sid}_correspondences.csv")
        save_regions(sim.sensor_regions(specimen, s), out / f"regions_{sid}.json")
        entries.append({"id": sid, "image": f"{sid}.json", "transform": f"{sid}_transform.json",
                        "correspondences": f"{sid}_correspondences.csv",
                        "null_region": list(r.null_region), "regions": f"regions_{sid}.json"})
        print(f"{sid}: {r.image.shape[0]}x{r.image.shape[1]} pixels")
    _dump(out / "pipeline.json", {"sensors": entries, "regions": "regions.json",
                                  "threshold": 0.99, "a": 1.0, "u_hat": None,
                                  "u_hat_summary": "mean", "weighted": True, "supersample": 4})
    print(f"wrote {len(sensors)} sensors and {len(table)} grooves to {out}")
    return 0


_PIPELINE_KEYS = {"sensors", "regions", "threshold", "a", "u_hat", "u_hat_summary", "weighted",
                  "supersample", "eval_frames", "workers", "mask_hits", "registration_model"}


def load_pipeline_config(path: Path):
    """Parse a pipeline config into sensor inputs, regions and settings."""
    cfg = _read_json(path, "config")
    base = path.parent
    unknown = set(cfg) - _PIPELINE_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    if not cfg.get("sensors"):
        raise ConfigError(f"{path}: no sensors")
    if "regions" not in cfg:
        raise ConfigError(f"{path}: no regions file")
    regions = load_regions(_existing(base, cfg["regions"], "regions file"))
    model = cfg.get("registration_model", "affine")
    if model not in MODEL_KINDS:
        raise ConfigError(f"registration_model must be one of {MODEL_KINDS}")
    inputs, single_regions = [], {}
    for e in cfg["sensors"]:
        if "id" not in e or "image" not in e:
            raise ConfigError("each sensor needs 'id' and 'image'")
        img, meta = load_image(_existing(base, e["image"], "image"))
        corr = None
        if e.get("correspondences"):
            corr = load_correspondences(_existing(base, e["correspondences"], "correspondences"))
        if e.get("transform") is not None:
            t = _transform(base, e["transform"])
        elif corr is not None:
            t = fit_transform(corr, model).transform
        else:
            t = Transform2D.identity()
        region = e.get("null_region", meta.get("null_region"))
        if region is None:
            raise ConfigError(f"sensor {e['id']!r}: no null_region")
        bw = e.get("bandwidth")
        bw = Bandwidth(float(bw["h_x"]), float(bw["h_y"])) if bw else None
        inputs.append(SensorInput(e["id"], img, t, _null_samples(img, region), corr, bw))
        if e.get("regions"):
            single_regions[e["id"]] = load_regions(_existing(base, e["regions"], "regions file"))
    threshold = float(cfg.get("threshold", 0.99))
    a = float(cfg.get("a", 1.0))
    if not 0 < threshold < 1 or a < 0:
        raise ConfigError("threshold must lie in (0, 1) and a must be nonnegative")
    config = PipelineConfig(conf_threshold=threshold, a=a, u_hat=cfg.get("u_hat"),
                            u_hat_summary=cfg.get("u_hat_summary", "mean"),
                            weighted=bool(cfg.get("weighted", True)),
                            supersample=int(cfg.get("supersample", 4)),
                            eval_frames=cfg.get("eval_frames"),
                            mask_hits=bool(cfg.get("mask_hits", True)),
                            workers=int(cfg.get("workers", 1)))
    return inputs, regions, single_regions, config


def _fused_report_rows(result):
    """Per-defect worst case over evaluation frames, with the counts of the
    frame that produced it."""
    rows = []
    for k, d in enumerate(result.primary.labeled.defect_ids):
        best = None
        for fr in result.fused.values():
            lab = fr.labeled
            n_on = int(np.sum((lab.kind == ON) & (lab.defect == k)))
            row = {"defect_id": d, "auc_pr_05": fr.scores[d], "n_on": n_on,
                   "n_off": int(np.sum(lab.kind == 1))}
            if best is None or row["auc_pr_05"] < best["auc_pr_05"]:
                best = row
        rows.append(best)
    return rows


def cmd_pipeline(args) -> int:
    cfg_path = Path(args.config)
    inputs, regions, single_regions, config = load_pipeline_config(cfg_path)
    if args.workers is not None:
        config = replace(config, workers=args.workers)
    out = Path(args.out) if args.out else cfg_path.parent / "results"
    out.mkdir(parents=True, exist_ok=True)
    first = inputs[0].image
    nodes = (first.shape[0] * config.supersample, first.shape[1] * config.supersample)
    pool = (max(1, -(-nodes[0] // OVERVIEW_MAX[0])), max(1, -(-nodes[1] // OVERVIEW_MAX[1])))
    config = replace(config, overview=pool)
    if len(inputs) == 1:
        print(f"warning: {SINGLE_SENSOR_WARNING}", file=sys.stderr)
    result = run(inputs, regions, config, single_regions)

    fused_rows = _fused_report_rows(result)
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["defect_id", "auc_pr_05", "n_on", "n_off"])
        w.writeheader()
        for r in fused_rows:
            w.writerow({**r, "auc_pr_05": repr(float(r["auc_pr_05"]))})
    for fid, fr in result.fused.items():
        save_report(fr.labeled, out / f"report_fused_{fid}.csv", out / "curves" / f"fused_{fid}")
        _write_detections(out / f"modes_{fid}.csv", fr.labeled.locations, fr.labeled.scores,
                          fr.labeled)
        ref_t = next(s.transform for s in inputs if s.sensor_id == fid)
        polys = [(i, p.transformed(ref_t).vertices) for i, p in regions.defect_regions]
        _write_overview(fr.overview, pool, out, f"density_{fid}", polys,
                        f"fused density, {fid} frame")
    for sid, lab in result.single.items():
        save_report(lab, out / f"report_single_{sid}.csv", out / "curves" / sid)
        save_hits(result.hits[sid], out / f"hits_{sid}.csv")

    def fa(lab):
        try:
            return pr_curve(lab, ALL).false_alarms_at_recall(0.5)
        except ValueError:
            return None

    summary = {
        "u_hat": result.u_hat,
        "bandwidths": {d.sensor_id: [d.bandwidth.h_x, d.bandwidth.h_y]
                       for d in next(iter(result.datasets.values()))},
        "hits": {k: len(v) for k, v in result.hits.items()},
        "fused": {"auc_pr_05": result.fused_scores,
                  "false_alarms_at_recall_0.5": {f: fa(fr.labeled)
                                                 for f, fr in result.fused.items()},
                  "modes": {f: len(fr.modes) for f, fr in result.fused.items()}},
        "single": {k: {"auc_pr_05": v, "false_alarms_at_recall_0.5": fa(result.single[k])}
                   for k, v in result.single_scores.items()},
    }
    _dump(out / "summary.json", summary)
    print("defect_id,fused," + ",".join(result.single_scores))
    for r in fused_rows:
        d = r["defect_id"]
        print(f"{d},{r['auc_pr_05']:.4f}," + ",".join(f"{v[d]:.4f}"
                                                   for v in result.single_scores.values()))
    print(f"u_hat={result.u_hat:.6g} results in {out}")
    return 0


# --- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scatterfuse", description="Fuse scattered multi-sensor detections.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("register", help="fit a transform to correspondences and print u_hat")
    r.add_argument("--correspondences", required=True, help="CSV with ax,ay,bx,by")
    r.add_argument("--model", choices=MODEL_KINDS, default="affine")
    r.add_argument("--transform", help="measure this transform instead of fitting one")
    r.add_argument("--summary", default="mean", help="mean, median, max or pNN")
    r.add_argument("--out", help="write the transform JSON here")
    r.set_defaults(func=cmd_register)

    d = sub.add_parser("detect", help="extract hits from a preprocessed image")
    d.add_argument("--image", required=True, help="image sidecar JSON (or its CSV)")
    d.add_argument("--out", required=True, help="hits CSV")
    d.add_argument("--threshold", type=float, default=0.99)
    d.add_argument("--null-region", help="background pixels r0:r1:c0:c1")
    d.add_argument("--null-samples", help="CSV with a 'value' column of background samples")
    d.add_argument("--sensor", help="sensor id (default: from the sidecar)")
    d.add_argument("--regions", help="drop hits inside these exclusion polygons")
    d.add_argument("--transform", help="global-to-sensor transform used with --regions")
    d.set_defaults(func=cmd_detect)

    f = sub.add_parser("fuse", help="fuse hit sets into a density field and modes")
    f.add_argument("--config", required=True)
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--workers", type=int, default=1)
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="score detections against ground-truth regions")
    e.add_argument("--detections", required=True, help="CSV with x,y,score")
    e.add_argument("--regions", required=True)
    e.add_argument("--out", required=True, help="report CSV")
    e.add_argument("--curves", help="directory for per-defect PR curves")
    e.add_argument("--transform", help="map detections into the regions' frame first")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="write a synthetic specimen and sensor images")
    s.add_argument("--spec", help="spec JSON (default: built-in ring specimen)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="overrides the spec seed")
    s.set_defaults(func=cmd_simulate)

    q = sub.add_parser("pipeline", help="detect, fuse and evaluate from one config")
    q.add_argument("--config", required=True)
    q.add_argument("--out", help="output directory (default: <config dir>/results)")
    q.add_argument("--workers", type=int)
    q.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, RegistrationError, DetectError, InvalidPolygon, ValueError,
            KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
