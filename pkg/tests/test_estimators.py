import numpy as np
import pytest

from curbscan.errors import ValidationError
from curbscan.estimators import CurbExtractor, GroundFilter
from curbscan.evaluate import point_to_polyline_distance
from curbscan.synth import SceneSpec, generate


class TestParamsProtocol:
    def test_get_set_round_trip(self):
        ex = CurbExtractor(voxel_size=0.05, sigma=1.0)
        params = ex.get_params()
        assert params["voxel_size"] == 0.05
        assert params["sigma"] == 1.0
        ex.set_params(candidate_fraction=0.1)
        assert ex.candidate_fraction == 0.1

    def test_invalid_param_rejected(self):
        with pytest.raises(ValidationError):
            CurbExtractor().set_params(bogus=1)

    def test_sklearn_clone_compatibility(self):
        sklearn = pytest.importorskip("sklearn")
        from sklearn.base import clone

        ex = CurbExtractor(voxel_size=0.08, rho_min=0.02)
        cloned = clone(ex)
        assert cloned.get_params() == ex.get_params()
        gf = clone(GroundFilter(bin_width=0.1))
        assert gf.bin_width == 0.1

    def test_repr_mentions_params(self):
        assert "voxel_size" in repr(CurbExtractor())


class TestGroundFilter:
    def test_fit_transform_drops_canopy(self):
        scene = generate(SceneSpec(road_length=5.0, density_road=800.0,
                                   density_sidewalk=500.0, seed=1))
        rng = np.random.default_rng(2)
        canopy = np.column_stack([
            rng.uniform(0, 5, 20_000),
            rng.uniform(-3, 3, 20_000),
            rng.normal(6.0, 0.4, 20_000),
        ])
        pts = np.concatenate([scene.cloud.points, canopy])
        gf = GroundFilter()
        kept = gf.fit_transform(pts)
        assert (kept[:, 2] < 1.0).all()
        assert len(kept) >= len(scene.cloud)

    def test_transform_requires_fit(self):
        with pytest.raises(ValidationError, match="not fitted"):
            GroundFilter().transform(np.zeros((5, 3)))

    def test_band_attributes_exposed(self):
        scene = generate(SceneSpec(road_length=4.0, density_road=600.0,
                                   density_sidewalk=400.0, seed=3))
        gf = GroundFilter().fit(scene.cloud.points)
        assert gf.band_.z_low < 0.0 < gf.band_.z_high
        assert gf.histogram_.counts.sum() == len(scene.cloud)


class TestCurbExtractor:
    def test_polylines_near_truth(self, small_scene, small_run):
        polys = small_run.polylines_
        assert len(polys) >= 2
        for pl in polys:
            d = point_to_polyline_distance(pl.vertices, list(small_scene.truth))
            assert np.median(d) < 0.2

    def test_predict_labels(self, small_scene, small_run):
        probes = np.array(
            [
                [8.0, 4.0, 0.15],   # on the left curb top edge
                [8.0, -4.0, 0.15],  # right curb
                [8.0, 0.0, 0.0],    # road middle
                [8.0, 2.0, 0.0],    # road, away from curbs
            ]
        )
        labels = small_run.predict(probes)
        assert labels[0] and labels[1]
        assert not labels[2] and not labels[3]

    def test_predict_requires_fit(self):
        with pytest.raises(ValidationError, match="not fitted"):
            CurbExtractor().predict(np.zeros((2, 3)))

    def test_fitted_attributes_consistent(self, small_run):
        assert small_run.grid_.n_points == len(small_run.ground_points_)
        assert len(small_run.candidates_) > 0
        assert len(small_run.paths_) == len(small_run.polylines_)
        assert small_run.energy_.e_scaled is not None

    def test_fit_predict_equals_fit_then_predict(self):
        scene = generate(SceneSpec(road_length=5.0, density_road=900.0,
                                   density_sidewalk=600.0, seed=4))
        a = CurbExtractor().fit_predict(scene.cloud.points)
        ex = CurbExtractor().fit(scene.cloud.points)
        b = ex.predict(scene.cloud.points)
        assert np.array_equal(a, b)

    def test_invalid_input_shape(self):
        with pytest.raises(ValidationError):
            CurbExtractor().fit(np.zeros((10, 2)))
