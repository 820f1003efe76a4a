import numpy as np
import pytest

from curbscan.cli import main
from curbscan.config import dump_config, load_config
from curbscan.errors import ValidationError
from curbscan.io import (
    PointCloud,
    Polyline3,
    read_polylines,
    read_xyz,
    write_polylines,
    write_xyz,
)

SCENE_CFG = """
[scene]
road_length = 6
density_road = 900
density_sidewalk = 600
seed = 3

[pipeline]
seed = 3
"""


@pytest.fixture()
def scene_cfg(tmp_path):
    path = tmp_path / "scene.cfg"
    path.write_text(SCENE_CFG)
    return path


class TestConfig:
    def test_defaults(self):
        pipeline, scene = load_config(None)
        assert pipeline.voxel_size == 0.04
        assert pipeline.eval_d == (0.4, 0.2, 0.12, 0.08, 0.04)
        assert scene.spec.road_length == 50.0

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("[pipeline]\nvoxel_sze = 0.04\n")
        with pytest.raises(ValidationError, match="voxel_sze"):
            load_config(p)

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("[mystery]\nx = 1\n")
        with pytest.raises(ValidationError, match="mystery"):
            load_config(p)

    def test_ramp_and_segment_parsing(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text(
            "[pipeline]\npenalty_d = 0.05:60,0.4:400\n"
            "[scene]\nocclusions = 1:0.5;3:0.25\nramps = 2:1\n"
        )
        pipeline, scene = load_config(p)
        assert pipeline.penalty_d == ((0.05, 60.0), (0.4, 400.0))
        assert scene.spec.occlusions == ((1.0, 0.5), (3.0, 0.25))
        assert scene.spec.ramps == ((2.0, 1.0),)

    def test_out_of_range_value_rejected(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("[pipeline]\ncandidate_fraction = 1.5\n")
        with pytest.raises(ValidationError):
            load_config(p)

    def test_dump_load_round_trip(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text(
            "[pipeline]\nvoxel_size = 0.08\npenalty_v = 2000\n"
            "[scene]\nroad_length = 12\nocclusions = 1:0.5\nseed = 9\n"
        )
        pipeline, scene = load_config(p)
        out = tmp_path / "echo.cfg"
        dump_config(pipeline, scene, out)
        pipeline2, scene2 = load_config(out)
        assert pipeline2 == pipeline
        assert scene2.spec == scene.spec

    def test_seed_override(self, scene_cfg):
        pipeline, scene = load_config(scene_cfg, seed_override=99)
        assert pipeline.seed == 99
        assert scene.spec.seed == 99


class TestCliSynth:
    def test_deterministic_outputs(self, scene_cfg, tmp_path):
        assert main(["synth", "--config", str(scene_cfg), "--out", str(tmp_path / "a")]) == 0
        assert main(["synth", "--config", str(scene_cfg), "--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "cloud.xyz").read_bytes()
        b = (tmp_path / "b" / "cloud.xyz").read_bytes()
        assert a == b
        assert (tmp_path / "a" / "truth.plines").read_bytes() == (tmp_path / "b" / "truth.plines").read_bytes()

    def test_invalid_scene_exits_1(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[scene]\nroad_length = 4\nocclusions = 3:5\n")
        code = main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "occlusions" in capsys.readouterr().err


class TestCliExtract:
    def test_tiny_cloud_exits_1(self, tmp_path):
        cloud = tmp_path / "tiny.xyz"
        write_xyz(PointCloud(np.random.default_rng(0).uniform(0, 1, (50, 3))), cloud)
        code = main(["extract", "--cloud", str(cloud), "--out", str(tmp_path / "o")])
        assert code == 1

    def test_dump_energy_flag(self, scene_cfg, tmp_path, small_scene):
        cloud = tmp_path / "c.xyz"
        write_xyz(small_scene.cloud, cloud)
        out = tmp_path / "o"
        code = main([
            "extract", "--config", str(scene_cfg), "--cloud", str(cloud),
            "--out", str(out), "--dump-energy",
        ])
        assert code == 0
        header = (out / "energy.csv").read_text().splitlines()[0]
        assert header == "i,j,k,Gx,Gy,Gz,E,E_scaled"
        cands = read_xyz(out / "candidates.xyz")
        assert len(cands) > 0


class TestCliRefineEval:
    def test_refine_then_eval_round_trip(self, scene_cfg, tmp_path, small_scene):
        cloud = tmp_path / "c.xyz"
        write_xyz(small_scene.cloud, cloud)
        truth = tmp_path / "t.plines"
        write_polylines(list(small_scene.truth), truth)

        out_e = tmp_path / "e"
        assert main(["extract", "--config", str(scene_cfg), "--cloud", str(cloud), "--out", str(out_e)]) == 0
        out_r = tmp_path / "r"
        assert main([
            "refine", "--config", str(scene_cfg), "--cloud", str(cloud),
            "--candidates", str(out_e / "candidates.xyz"), "--out", str(out_r),
        ]) == 0
        curbs = read_polylines(out_r / "curbs.plines")
        assert len(curbs) >= 2

        out_v = tmp_path / "v"
        assert main([
            "eval", "--config", str(scene_cfg), "--result", str(out_r / "curbs.plines"),
            "--truth", str(truth), "--cloud", str(cloud), "--out", str(out_v),
        ]) == 0
        csv = (out_v / "metrics.csv").read_text()
        assert csv.splitlines()[0] == "zone,D,TP,TN,FP,FN,TPR,TNR,PPV,NPV"

    def test_sparse_candidates_give_empty_result(self, scene_cfg, tmp_path, small_scene):
        # Candidate centers scattered so thin that every region is below
        # the no-curb threshold: refine succeeds with an empty file.
        cloud = tmp_path / "c.xyz"
        write_xyz(small_scene.cloud, cloud)
        rng = np.random.default_rng(1)
        rows = rng.choice(len(small_scene.cloud), 40, replace=False)
        cands = tmp_path / "cands.xyz"
        write_xyz(PointCloud(small_scene.cloud.points[rows]), cands)
        out = tmp_path / "r"
        code = main([
            "refine", "--config", str(scene_cfg), "--cloud", str(cloud),
            "--candidates", str(cands), "--out", str(out),
        ])
        assert code == 0
        assert read_polylines(out / "curbs.plines") == []

    def test_eval_perfect_match(self, scene_cfg, tmp_path, small_scene):
        cloud = tmp_path / "c.xyz"
        write_xyz(small_scene.cloud, cloud)
        truth = tmp_path / "t.plines"
        write_polylines(list(small_scene.truth), truth)
        out = tmp_path / "v"
        assert main([
            "eval", "--config", str(scene_cfg), "--result", str(truth),
            "--truth", str(truth), "--cloud", str(cloud), "--out", str(out),
        ]) == 0
        d_values = set()
        for line in (out / "metrics.csv").read_text().splitlines()[1:]:
            cells = line.split(",")
            if cells[0] == "All":
                d_values.add(float(cells[1]))
                assert float(cells[6]) == 1.0  # TPR
                assert float(cells[8]) == 1.0  # PPV
        assert d_values == {0.4, 0.2, 0.12, 0.08, 0.04}

    def test_eval_shifted_result(self, tmp_path):
        # Points sampled on the truth line: a result 0.3 m to the side
        # scores TPR 0 at D=0.2 and ~1 at D=0.4.
        xs = np.linspace(0, 10, 400)
        pts = np.column_stack([xs, np.zeros(400), np.zeros(400)])
        far = np.column_stack([xs, np.full(400, 5.0), np.zeros(400)])
        cloud_path = tmp_path / "c.xyz"
        write_xyz(PointCloud(np.concatenate([pts, far])), cloud_path)
        truth = [Polyline3(np.array([[0.0, 0, 0], [10.0, 0, 0]]))]
        result = [Polyline3(np.array([[0.0, 0.3, 0], [10.0, 0.3, 0]]))]
        tpath = tmp_path / "t.plines"
        rpath = tmp_path / "r.plines"
        write_polylines(truth, tpath)
        write_polylines(result, rpath)
        cfg = tmp_path / "cfg.cfg"
        cfg.write_text("[pipeline]\nground_filter = false\n")
        out = tmp_path / "v"
        assert main([
            "eval", "--config", str(cfg), "--result", str(rpath),
            "--truth", str(tpath), "--cloud", str(cloud_path), "--out", str(out),
        ]) == 0
        rows = {}
        for line in (out / "metrics.csv").read_text().splitlines()[1:]:
            cells = line.split(",")
            if cells[0] == "All":
                rows[float(cells[1])] = float(cells[6])
        assert rows[0.2] == 0.0
        assert rows[0.4] > 0.95


class TestCandidateConcentration:
    def test_candidates_concentrate_near_curbs(self, small_scene, small_run):
        # The top-20% selection is deliberately permissive (the refinement
        # stage is the cleanup), so candidates are noisy but strongly
        # concentrated near the curbs relative to the occupied base rate.
        # Floors frozen from measured behavior of the default parameters.
        from curbscan.evaluate import point_to_polyline_distance

        truth = list(small_scene.truth)
        cand = small_run.grid_.voxel_center(small_run.candidates_.indices)
        occ = small_run.grid_.voxel_center(small_run.grid_.indices)
        frac_cand = (point_to_polyline_distance(cand, truth) < 0.12).mean()
        frac_occ = (point_to_polyline_distance(occ, truth) < 0.12).mean()
        assert frac_cand >= 0.08
        assert frac_cand >= 2.0 * frac_occ


class TestIntersectionZones:
    def test_pipeline_reports_intersection_rows(self, tmp_path):
        cfg = tmp_path / "int.cfg"
        cfg.write_text(
            "[scene]\nroad_length = 12\ndensity_road = 900\ndensity_sidewalk = 600\n"
            "intersection = true\nseed = 3\n\n[pipeline]\nseed = 3\n"
        )
        out = tmp_path / "p"
        assert main(["pipeline", "--config", str(cfg), "--out", str(out)]) == 0
        zones = {line.split(",")[0] for line in (out / "metrics.csv").read_text().splitlines()[1:]}
        assert "Int" in zones and "SL" in zones and "All" in zones


class TestCliPipeline:
    def test_end_to_end_deterministic(self, scene_cfg, tmp_path):
        out1, out2 = tmp_path / "p1", tmp_path / "p2"
        assert main(["pipeline", "--config", str(scene_cfg), "--out", str(out1)]) == 0
        assert main(["pipeline", "--config", str(scene_cfg), "--out", str(out2)]) == 0
        assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
        assert (out1 / "curbs.plines").read_bytes() == (out2 / "curbs.plines").read_bytes()

    def test_effective_config_reproduces(self, scene_cfg, tmp_path):
        out1 = tmp_path / "p1"
        assert main(["pipeline", "--config", str(scene_cfg), "--out", str(out1)]) == 0
        out2 = tmp_path / "p2"
        assert main(["pipeline", "--config", str(out1 / "effective.cfg"), "--out", str(out2)]) == 0
        assert (out1 / "cloud.xyz").read_bytes() == (out2 / "cloud.xyz").read_bytes()
        assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()

    def test_pipeline_artifacts_present(self, scene_cfg, tmp_path):
        out = tmp_path / "p"
        assert main(["pipeline", "--config", str(scene_cfg), "--out", str(out)]) == 0
        for name in ("cloud.xyz", "truth.plines", "candidates.xyz", "curbs.plines",
                     "metrics.csv", "effective.cfg", "regions.csv"):
            assert (out / name).exists(), name
