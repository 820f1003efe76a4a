"""Estimator-style front ends for the extraction pipeline.

``GroundFilter`` is a transformer (fit learns the elevation band,
transform keeps ground points) and ``CurbExtractor`` is the end-to-end
detector: fit runs ground filtering, voxelization, energy scoring,
candidate selection and least-cost-path refinement, leaving the results in
fitted attributes; predict labels arbitrary points as curb/non-curb by
distance to the extracted polylines. Both expose get_params/set_params, so
they compose with scikit-learn tooling.
"""

from __future__ import annotations

import numpy as np

from ._params import ParamsMixin, check_fitted, check_points
from .energy import compute_energy, scale_energy, select_candidates
from .evaluate import within_distance
from .ground import build_histogram, extend_band_by_occupancy, filter_ground, find_ground_band
from .io import PointCloud
from .refine import PenaltySchedule, RefineParams, paths_to_polylines, refine_scene
from .voxel import build_grid


class GroundFilter(ParamsMixin):
    """Keep the ground band of a scene by elevation histogram analysis.

    Parameters
    ----------
    bin_width : float
        Elevation histogram bin width in meters.
    extend_band : bool
        Widen the band through contiguously occupied bins, which keeps
        connected terrain (slopes) while rejecting elevated structure
        separated by near-empty bins.
    tile_size : float or None
        When set, compute a band per square x/y tile of this edge length.
    """

    def __init__(self, bin_width: float = 0.05, extend_band: bool = True, tile_size: float | None = None):
        self.bin_width = bin_width
        self.extend_band = extend_band
        self.tile_size = tile_size

    def fit(self, X, y=None):
        pts = check_points(X)
        self.histogram_ = build_histogram(PointCloud(pts), self.bin_width)
        band = find_ground_band(self.histogram_)
        if self.extend_band:
            band = extend_band_by_occupancy(self.histogram_, band)
        self.band_ = band
        return self

    def transform(self, X) -> np.ndarray:
        check_fitted(self, "band_")
        pts = check_points(X)
        return filter_ground(PointCloud(pts), self.band_).points

    def fit_transform(self, X, y=None) -> np.ndarray:
        return self.fit(X).transform(X)


class CurbExtractor(ParamsMixin):
    """Extract road curb polylines from a point cloud.

    fit(X) runs the full pipeline and exposes the results as fitted
    attributes; predict(X) labels points within ``label_distance`` of an
    extracted curb.

    Attributes after fit
    --------------------
    ground_points_ : (m, 3) array of the ground band points
    grid_ : VoxelGrid over the ground points
    energy_ : EnergyField with per-voxel gradients, tensors and energy
    candidates_ : CandidateSet of curb evidence voxels
    paths_ : list of CurbPath from the least-cost-path refinement
    polylines_ : list of Polyline3 in world coordinates
    """

    def __init__(
        self,
        voxel_size: float = 0.04,
        sigma: float = 0.8,
        candidate_fraction: float = 0.20,
        ground_filter: bool = True,
        bin_width: float = 0.05,
        extend_band: bool = True,
        tile_size: float | None = None,
        region_extents: tuple[int, int, int] = (100, 100, 100),
        penalty_d_low: tuple[float, float] = (0.04, 50.0),
        penalty_d_high: tuple[float, float] = (0.30, 500.0),
        penalty_s_low: tuple[float, float] = (0.04, 500.0),
        penalty_s_high: tuple[float, float] = (0.30, 50.0),
        penalty_v: float = 1000.0,
        rho_min: float = 0.04,
        min_component: int = 10,
        min_span: float = 25.0,
        merge_lateral_tol: float = 6.0,
        core_lateral_tol: float = 3.0,
        merge_angle_deg: float = 25.0,
        corridor_radius: float = 8.0,
        validate_step: bool = True,
        min_height_step: float = 0.05,
        stitch_tol: float = 15.0,
        stitch_free_tol: float = 6.0,
        label_distance: float = 0.4,
    ):
        self.voxel_size = voxel_size
        self.sigma = sigma
        self.candidate_fraction = candidate_fraction
        self.ground_filter = ground_filter
        self.bin_width = bin_width
        self.extend_band = extend_band
        self.tile_size = tile_size
        self.region_extents = region_extents
        self.penalty_d_low = penalty_d_low
        self.penalty_d_high = penalty_d_high
        self.penalty_s_low = penalty_s_low
        self.penalty_s_high = penalty_s_high
        self.penalty_v = penalty_v
        self.rho_min = rho_min
        self.min_component = min_component
        self.min_span = min_span
        self.merge_lateral_tol = merge_lateral_tol
        self.core_lateral_tol = core_lateral_tol
        self.merge_angle_deg = merge_angle_deg
        self.corridor_radius = corridor_radius
        self.validate_step = validate_step
        self.min_height_step = min_height_step
        self.stitch_tol = stitch_tol
        self.stitch_free_tol = stitch_free_tol
        self.label_distance = label_distance

    def schedule(self) -> PenaltySchedule:
        return PenaltySchedule(
            d_low=tuple(self.penalty_d_low),
            d_high=tuple(self.penalty_d_high),
            s_low=tuple(self.penalty_s_low),
            s_high=tuple(self.penalty_s_high),
            penalty_v=self.penalty_v,
            rho_min=self.rho_min,
        )

    def refine_params(self) -> RefineParams:
        return RefineParams(
            region_extents=tuple(int(v) for v in self.region_extents),
            min_component=self.min_component,
            merge_lateral_tol=self.merge_lateral_tol,
            core_lateral_tol=self.core_lateral_tol,
            merge_angle_deg=self.merge_angle_deg,
            min_span=self.min_span,
            corridor_radius=self.corridor_radius,
            validate_step=self.validate_step,
            min_height_step=self.min_height_step,
            stitch_tol=self.stitch_tol,
            stitch_free_tol=self.stitch_free_tol,
        )

    def fit(self, X, y=None):
        pts = check_points(X)
        if self.ground_filter:
            gf = GroundFilter(self.bin_width, self.extend_band, self.tile_size)
            pts = gf.fit_transform(pts)
            self.ground_filter_ = gf
        self.ground_points_ = pts
        self.grid_ = build_grid(PointCloud(pts), self.voxel_size)
        self.energy_ = scale_energy(compute_energy(self.grid_, self.sigma))
        self.candidates_ = select_candidates(self.energy_, self.candidate_fraction)
        self.paths_ = refine_scene(self.grid_, self.candidates_, self.schedule(), self.refine_params())
        self.polylines_ = paths_to_polylines(self.paths_, self.grid_)
        return self

    def predict(self, X) -> np.ndarray:
        """Boolean label per point: within ``label_distance`` of a curb."""
        check_fitted(self, "polylines_")
        pts = check_points(X)
        return within_distance(pts, self.polylines_, self.label_distance)

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).predict(X)
