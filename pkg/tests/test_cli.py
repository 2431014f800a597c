import json

import numpy as np
import pytest

from scatterfuse.cli import SINGLE_SENSOR_WARNING, main
from scatterfuse.detect import load_hits, load_image
from scatterfuse.evaluation import load_regions, load_report
from scatterfuse.fusion import EvalGrid
from scatterfuse.geometry import load_correspondences, load_transform, read_numeric_csv
from scatterfuse.sim import GROOVE_DEPTHS_UM, default_sensors


def small_spec(path, seed=1):
    grooves = [{"id": str(k + 1), "center": [5.0 + 7.0 * k, 6.0], "length": 1.0,
                "orientation_deg": 90.0, "depth_um": d}
               for k, d in enumerate((354.0, 105.0, 40.0))]
    doc = {"specimen": {"width": 26.0, "height": 12.0, "grooves": grooves, "seed": seed},
           "sensors": [s.to_dict() for s in default_sensors()]}
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--spec", str(small_spec(d / "spec_in.json")), "--out",
                 str(d / "data")]) == 0
    return d / "data"


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestUsage:
    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["fuse", "--bogus"])
        assert exc.value.code == 1
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 1

    def test_missing_config_is_config_error(self, tmp_path, capsys):
        assert main(["pipeline", "--config", str(tmp_path / "nope.json")]) == 1
        assert "nope.json" in capsys.readouterr().err

    def test_bad_pipeline_key(self, tmp_path):
        (tmp_path / "c.json").write_text('{"sensors": [], "frobnicate": 1}')
        assert main(["pipeline", "--config", str(tmp_path / "c.json")]) == 1

    def test_out_of_extent_spec(self, tmp_path):
        doc = {"specimen": {"width": 5.0, "height": 5.0,
                            "grooves": [{"id": "a", "center": [4.9, 2.0], "orientation_deg": 0.0}]}}
        (tmp_path / "s.json").write_text(json.dumps(doc))
        assert main(["simulate", "--spec", str(tmp_path / "s.json"), "--out",
                     str(tmp_path / "o")]) == 1

    def test_malformed_data_names_file_and_line(self, tmp_path, capsys):
        (tmp_path / "c.csv").write_text("ax,ay,bx,by\n0,0,1,1\n1,x,2,2\n")
        assert main(["register", "--correspondences", str(tmp_path / "c.csv")]) == 2
        assert "c.csv:3" in capsys.readouterr().err


class TestCommands:
    def test_simulate_outputs(self, simulated):
        regions = load_regions(simulated / "regions.json")
        assert regions.defect_ids == ["1", "2", "3"]
        for sid in ("ET", "MFL", "TT"):
            img, meta = load_image(simulated / f"{sid}.json")
            assert meta["sensor_id"] == sid and len(meta["null_region"]) == 4
            a, b = load_correspondences(simulated / f"{sid}_correspondences.csv")
            assert a.shape == b.shape == (20, 2)
            load_transform(simulated / f"{sid}_transform.json")
        cfg = json.loads((simulated / "pipeline.json").read_text())
        assert cfg["threshold"] == 0.99 and cfg["a"] == 1.0

    def test_register(self, simulated, capsys, tmp_path):
        corr = simulated / "MFL_correspondences.csv"
        assert main(["register", "--correspondences", str(corr), "--transform",
                     str(simulated / "MFL_transform.json")]) == 0
        out = capsys.readouterr().out
        assert "u_hat=0.2\n" in out
        assert main(["register", "--correspondences", str(corr), "--model", "rigid",
                     "--out", str(tmp_path / "t.json")]) == 0
        assert "u_hat=" in capsys.readouterr().out
        assert load_transform(tmp_path / "t.json").model == "rigid"

    def test_detect_fuse_eval_chain(self, simulated, tmp_path, capsys):
        sensors = []
        for sid in ("ET", "TT"):
            assert main(["detect", "--image", str(simulated / f"{sid}.json"),
                         "--out", str(tmp_path / f"{sid}.csv"), "--regions",
                         str(simulated / "regions.json"), "--transform",
                         str(simulated / f"{sid}_transform.json")]) == 0
            hits = load_hits(tmp_path / f"{sid}.csv")
            assert hits.sensor == sid and np.all(hits.confidences > 0.99)
            img = load_image(simulated / f"{sid}.json")[0]
            pitch = [img.pitch_x, img.pitch_y]
            sensors.append({"id": sid, "hits_csv": f"{sid}.csv", "pitch": pitch,
                            "transform": str(simulated / f"{sid}_transform.json"),
                            "bandwidth": {"a": 1.0}})
        cfg = {"sensors": sensors, "u_hat": 0.2, "grid": {"auto": True, "pad": 0.5},
               "scan_axis": "x", "regions": str(simulated / "regions.json")}
        (tmp_path / "fuse.json").write_text(json.dumps(cfg))
        assert main(["fuse", "--config", str(tmp_path / "fuse.json"), "--out",
                     str(tmp_path / "fused")]) == 0
        fdir = tmp_path / "fused"
        modes = read_numeric_csv(fdir / "modes.csv", ["x", "y", "score"])
        assert len(modes) > 0 and np.all(modes[:, 2] > 0)
        grid = EvalGrid.from_dict(json.loads((fdir / "grid.json").read_text()))
        assert grid.step_x == pytest.approx(0.029 / 4)
        assert (fdir / "density.svg").read_text().startswith("<svg")
        load_image(fdir / "density.json")
        # modes live in the global frame because every transform is global -> sensor
        assert main(["eval", "--detections", str(fdir / "modes.csv"), "--regions",
                     str(simulated / "regions.json"), "--out", str(tmp_path / "rep.csv"),
                     "--curves", str(tmp_path / "curves")]) == 0
        rows = load_report(tmp_path / "rep.csv")
        assert [r["defect_id"] for r in rows] == ["1", "2", "3"]
        assert rows[0]["auc_pr_05"] == 0.5
        assert capsys.readouterr().out.splitlines()[-3].startswith("1,0.5,")

    def test_single_sensor_warning(self, simulated, tmp_path, capsys):
        assert main(["detect", "--image", str(simulated / "TT.json"), "--out",
                     str(tmp_path / "TT.csv")]) == 0
        cfg = {"sensors": [{"id": "TT", "hits_csv": "TT.csv", "pitch": [0.469, 0.126],
                            "bandwidth": {"h_x": 0.5, "h_y": 0.2}}]}
        (tmp_path / "one.json").write_text(json.dumps(cfg))
        assert main(["fuse", "--config", str(tmp_path / "one.json"), "--out",
                     str(tmp_path / "one")]) == 0
        assert f"warning: {SINGLE_SENSOR_WARNING}" in capsys.readouterr().err
        assert read_numeric_csv(tmp_path / "one" / "modes.csv", ["x", "y", "score"]).size == 0

    def test_detect_threshold_default(self, simulated, tmp_path):
        assert main(["detect", "--image", str(simulated / "ET.json"), "--out",
                     str(tmp_path / "a.csv")]) == 0
        assert main(["detect", "--image", str(simulated / "ET.json"), "--out",
                     str(tmp_path / "b.csv"), "--threshold", "0.99"]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert main(["detect", "--image", str(simulated / "ET.json"), "--out",
                     str(tmp_path / "c.csv"), "--threshold", "1.5"]) == 2

    def test_pipeline_and_determinism(self, simulated, tmp_path, capsys):
        cfg = simulated / "pipeline.json"
        assert main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "r1")]) == 0
        assert main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "r2"),
                     "--workers", "3"]) == 0
        a, b = snapshot(tmp_path / "r1"), snapshot(tmp_path / "r2")
        assert a.keys() == b.keys() and a == b
        rows = load_report(tmp_path / "r1" / "report.csv")
        assert len(rows) == 3 and rows[0]["auc_pr_05"] == 0.5
        summary = json.loads(a["summary.json"])
        assert summary["u_hat"] == pytest.approx(0.2)
        lab = read_numeric_csv(tmp_path / "r1" / "modes_ET.csv", ["x", "y", "score"])
        assert len(lab) > 0
        for sid in ("ET", "MFL", "TT"):
            assert len(load_hits(tmp_path / "r1" / f"hits_{sid}.csv")) == summary["hits"][sid]

    def test_simulate_is_byte_identical(self, tmp_path):
        spec = small_spec(tmp_path / "s.json")
        for k in (1, 2):
            assert main(["simulate", "--spec", str(spec), "--out", str(tmp_path / f"o{k}"),
                         "--seed", "9"]) == 0
        assert snapshot(tmp_path / "o1") == snapshot(tmp_path / "o2")
        assert main(["simulate", "--spec", str(spec), "--out", str(tmp_path / "o3"),
                     "--seed", "10"]) == 0
        assert snapshot(tmp_path / "o1")["ET.csv"] != snapshot(tmp_path / "o3")["ET.csv"]


@pytest.mark.slow
def test_default_experiment_report_has_15_rows(tmp_path):
    (tmp_path / "default.json").write_text('{"specimen": "default", "sensors": "default"}')
    assert main(["simulate", "--spec", str(tmp_path / "default.json"), "--out",
                 str(tmp_path / "d")]) == 0
    assert main(["pipeline", "--config", str(tmp_path / "d" / "pipeline.json")]) == 0
    rows = load_report(tmp_path / "d" / "results" / "report.csv")
    assert [r["defect_id"] for r in rows] == [str(k) for k in range(1, 16)]
    assert len(GROOVE_DEPTHS_UM) == 15
    assert all(0.0 <= r["auc_pr_05"] <= 0.5 for r in rows)
