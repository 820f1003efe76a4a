import numpy as np
import pytest

from curbscan.estimators import CurbExtractor
from curbscan.synth import SceneSpec, generate


@pytest.fixture(scope="session")
def small_scene():
    """A 16 m default-parameter scene shared by the slower integration tests."""
    return generate(SceneSpec(road_length=16.0, seed=11))


@pytest.fixture(scope="session")
def small_run(small_scene):
    extractor = CurbExtractor()
    extractor.fit(small_scene.cloud.points)
    return extractor


def make_cloud(points):
    from curbscan.io import PointCloud

    return PointCloud(np.asarray(points, dtype=np.float64))
