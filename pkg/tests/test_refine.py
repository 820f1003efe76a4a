import numpy as np
import pytest

from curbscan.energy import CandidateSet
from curbscan.errors import ValidationError
from curbscan.io import PointCloud, Polyline3
from curbscan.refine import (
    KIND_CANDIDATE,
    KIND_NON_CANDIDATE,
    KIND_VIRTUAL,
    PenaltySchedule,
    Slice,
    build_path_graph,
    link_intersection,
    path_polyline,
    paths_to_polylines,
    principal_direction,
    refine_scene,
    solve_lcpm,
    step_size,
)
from curbscan.voxel import build_grid, pack_keys


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def exhaustive_lcpm(slices, schedule, rho, lat_axes=(1, 2), lat_bounds=(1, 1)):
    """Enumerate every slice-monotone path; return its minimum total cost.

    Independent of the dynamic program: broadcast-adds the data and
    feasibility-masked smoothness costs over the full path product space.
    """
    p_d = schedule.penalty_d(rho)
    p_s = schedule.penalty_s(rho)
    p_v = schedule.penalty_v

    def data(s):
        costs = np.zeros(len(s.kinds))
        costs[s.kinds == KIND_NON_CANDIDATE] = p_d
        costs[s.kinds == KIND_VIRTUAL] = p_v
        return costs

    # Enumerate paths explicitly: totals and the last node of every path.
    totals = data(slices[0]).copy()
    last = np.arange(len(slices[0].positions))
    for t in range(1, len(slices)):
        prev = slices[t - 1].positions.astype(float)
        cur = slices[t].positions.astype(float)
        diff = cur[:, None, :] - prev[None, :, :]
        ok = (np.abs(diff[:, :, lat_axes[0]]) <= lat_bounds[0]) & (
            np.abs(diff[:, :, lat_axes[1]]) <= lat_bounds[1]
        )
        dis = np.sqrt((diff**2).sum(axis=2))
        trans = p_s * dis
        trans[~ok] = np.inf
        n_cur = len(cur)
        totals = totals[None, :] + trans[:, last] + data(slices[t])[:, None]
        last = np.repeat(np.arange(n_cur), totals.shape[1])
        totals = totals.reshape(-1)
    return float(totals.min())


def power_iteration_direction(points, iters=2000):
    """Dominant eigenvector of the centered covariance by power iteration."""
    centered = points - points.mean(axis=0)
    m = centered.T @ centered
    v = np.array([1.0, 0.7, 0.3])
    for _ in range(iters):
        v = m @ v
        v = v / np.linalg.norm(v)
    return v


def random_slices(rng, n_slices, max_nodes):
    slices = []
    for t in range(n_slices):
        n = int(rng.integers(1, max_nodes + 1))
        positions = np.column_stack(
            [
                np.full(n, t * int(rng.integers(1, 3))),
                rng.integers(0, 4, n),
                rng.integers(0, 4, n),
            ]
        ).astype(np.int64)
        kinds = rng.integers(0, 3, n).astype(np.int8)
        slices.append(Slice(t, positions, kinds))
    return slices


class TestPenaltySchedule:
    def test_ramp_values(self):
        s = PenaltySchedule()
        assert s.penalty_d(0.04) == 50.0
        assert s.penalty_d(0.30) == 500.0
        assert s.penalty_d(0.17) == pytest.approx(275.0)
        assert s.penalty_d(0.01) == 50.0
        assert s.penalty_d(0.9) == 500.0
        assert s.penalty_s(0.04) == 500.0
        assert s.penalty_s(0.30) == 50.0
        assert s.penalty_s(0.9) == 50.0

    def test_monotonicity(self):
        s = PenaltySchedule()
        rhos = np.linspace(0, 1, 50)
        d_vals = [s.penalty_d(r) for r in rhos]
        s_vals = [s.penalty_s(r) for r in rhos]
        assert all(b >= a for a, b in zip(d_vals, d_vals[1:]))
        assert all(b <= a for a, b in zip(s_vals, s_vals[1:]))

    def test_penalty_v_must_dominate(self):
        with pytest.raises(ValidationError):
            PenaltySchedule(penalty_v=100.0)

    def test_ramp_direction_validated(self):
        with pytest.raises(ValidationError):
            PenaltySchedule(d_low=(0.04, 600.0), d_high=(0.3, 500.0))


class TestPrincipalDirection:
    def test_collinear_along_x(self):
        pts = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
        pd = principal_direction(pts)
        assert np.allclose(np.abs(pd.v1), [1, 0, 0])
        assert pd.v1[0] > 0  # sign fixed
        assert pd.singular_values[1] == pytest.approx(0.0, abs=1e-9)
        assert pd.singular_values[2] == pytest.approx(0.0, abs=1e-9)

    def test_diagonal_line(self):
        t = np.arange(20.0)
        pts = np.column_stack([t, t, np.zeros(20)])
        pd = principal_direction(pts)
        assert np.allclose(np.abs(pd.v1), [1 / np.sqrt(2), 1 / np.sqrt(2), 0], atol=1e-12)

    def test_matches_power_iteration(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(200, 3)) * np.array([5.0, 2.0, 0.5])
        pd = principal_direction(pts)
        v_ref = power_iteration_direction(pts)
        angle = np.arccos(min(1.0, abs(float(pd.v1 @ v_ref))))
        assert angle < 1e-6

    def test_unit_norm(self):
        rng = np.random.default_rng(1)
        pd = principal_direction(rng.normal(size=(50, 3)))
        assert abs(np.linalg.norm(pd.v1) - 1.0) < 1e-9

    def test_degenerate_inputs(self):
        with pytest.raises(ValidationError):
            principal_direction(np.zeros((1, 3)))
        with pytest.raises(ValidationError):
            principal_direction(np.ones((5, 3)))


class TestStepSize:
    def test_rank_one_floors_at_one(self):
        pts = np.column_stack([np.arange(30.0), np.zeros(30), np.zeros(30)])
        step = step_size(principal_direction(pts), (100, 100, 100))
        assert np.array_equal(step, [1, 1, 1])

    def test_isotropic_example(self):
        from curbscan.refine import PrincipalDirection

        pd = PrincipalDirection(np.array([1.0, 0, 0]), np.array([1.0, 1.0, 1.0]))
        assert np.array_equal(step_size(pd, (100, 100, 100)), [42, 42, 42])
        assert np.array_equal(step_size(pd, (10, 10, 10)), [4, 4, 4])

    def test_degenerate_rejected(self):
        from curbscan.refine import PrincipalDirection

        pd = PrincipalDirection(np.array([1.0, 0, 0]), np.zeros(3))
        with pytest.raises(ValidationError):
            step_size(pd, (100, 100, 100))


class TestBuildPathGraph:
    def _line_pd(self):
        pts = np.column_stack([np.arange(40.0), np.zeros(40), np.zeros(40)])
        return principal_direction(pts)

    def test_gap_free_row(self):
        cand = np.column_stack([np.arange(20), np.zeros(20, int), np.zeros(20, int)])
        slices = build_path_graph(cand, np.zeros((0, 3), int), self._line_pd(), np.array([1, 1, 1]))
        assert len(slices) == 20
        assert all(len(s.positions) == 1 for s in slices)
        assert all((s.kinds != KIND_VIRTUAL).all() for s in slices)

    def test_five_slice_hole_filled_with_virtuals(self):
        xs = list(range(10)) + list(range(15, 25))
        cand = np.column_stack([xs, np.zeros(len(xs), int), np.zeros(len(xs), int)])
        slices = build_path_graph(cand, np.zeros((0, 3), int), self._line_pd(), np.array([1, 1, 1]))
        virtual = [s for s in slices if (s.kinds == KIND_VIRTUAL).any()]
        assert len(virtual) == 5
        for s in virtual:
            assert np.array_equal(s.positions[0][1:], [0, 0])  # on the interpolated line

    def test_partition_property(self):
        rng = np.random.default_rng(2)
        cand = np.unique(rng.integers(0, 30, (80, 3)), axis=0)
        other = np.unique(rng.integers(0, 30, (40, 3)), axis=0)
        pd = principal_direction(cand)
        step = step_size(pd, (100, 100, 100))
        slices = build_path_graph(cand, other, pd, step)
        total_nodes = sum((s.kinds != KIND_VIRTUAL).sum() for s in slices)
        assert total_nodes == len(cand) + len(other)
        ranks = [s.rank for s in slices]
        assert ranks == sorted(set(ranks))

    def test_stray_only_slice_gets_virtual_backup(self):
        xs = list(range(8)) + list(range(9, 17))
        cand = np.column_stack([xs, np.zeros(len(xs), int), np.zeros(len(xs), int)])
        stray = np.array([[8, 7, 0]])  # the only voxel in its slice, off line
        slices = build_path_graph(cand, stray, self._line_pd(), np.array([1, 1, 1]))
        s8 = slices[8]
        assert (s8.kinds == KIND_VIRTUAL).any()
        assert (s8.kinds == KIND_NON_CANDIDATE).any()


class TestSolveLcpm:
    def test_single_slice_single_candidate(self):
        slices = [Slice(0, np.array([[3, 4, 5]]), np.array([KIND_CANDIDATE], dtype=np.int8))]
        path = solve_lcpm(slices, PenaltySchedule(), rho=0.1)
        assert len(path.nodes) == 1
        assert path.total_cost == 0.0

    def test_hand_graph_matches_exhaustive(self):
        rng = np.random.default_rng(3)
        schedule = PenaltySchedule()
        slices = random_slices(rng, 3, 3)
        path = solve_lcpm(slices, schedule, rho=0.1, lat_bounds=(3, 3))
        want = exhaustive_lcpm(slices, schedule, rho=0.1, lat_bounds=(3, 3))
        assert path.total_cost == pytest.approx(want, abs=1e-9)

    def test_randomized_exactness(self):
        rng = np.random.default_rng(4)
        schedule = PenaltySchedule()
        for _ in range(40):
            slices = random_slices(rng, int(rng.integers(1, 6)), 4)
            rho = float(rng.uniform(0.04, 0.4))
            bounds = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
            try:
                path = solve_lcpm(slices, schedule, rho, lat_bounds=bounds)
            except Exception:
                continue
            # The solver may widen infeasible bounds; mirror the final ones.
            want = exhaustive_lcpm(slices, schedule, rho, lat_bounds=bounds)
            if np.isfinite(want):
                assert path.total_cost == pytest.approx(want, abs=1e-9)

    def test_straight_candidate_line_is_optimal(self):
        n = 12
        positions = []
        kinds = []
        slices = []
        for t in range(n):
            pos = np.array([[t, 0, 0], [t, 1, 0], [t, 0, 1]])
            knd = np.array([KIND_CANDIDATE] * 3, dtype=np.int8)
            slices.append(Slice(t, pos, knd))
        path = solve_lcpm(slices, PenaltySchedule(), rho=0.1)
        pos = path.positions()
        # Straight line has minimal total Euclidean length.
        assert (np.diff(pos[:, 1]) == 0).all()
        assert (np.diff(pos[:, 2]) == 0).all()

    def test_cost_audit(self):
        rng = np.random.default_rng(5)
        slices = random_slices(rng, 5, 4)
        path = solve_lcpm(slices, PenaltySchedule(), rho=0.2, lat_bounds=(3, 3))
        assert path.total_cost == pytest.approx(path.recompute_cost(), abs=1e-9)

    def test_widening_recovers_from_tight_bounds(self):
        slices = [
            Slice(0, np.array([[0, 0, 0]]), np.array([KIND_CANDIDATE], dtype=np.int8)),
            Slice(1, np.array([[1, 5, 0]]), np.array([KIND_CANDIDATE], dtype=np.int8)),
        ]
        path = solve_lcpm(slices, PenaltySchedule(), rho=0.1, lat_bounds=(1, 1))
        assert len(path.nodes) == 2

    def test_monotone_response_to_smoothness(self):
        # Raising penaltyS never lengthens the optimal path.
        rng = np.random.default_rng(6)
        for _ in range(20):
            slices = random_slices(rng, 4, 4)
            lengths = []
            for s_val in (10.0, 200.0, 900.0):
                schedule = PenaltySchedule(
                    s_low=(0.04, s_val), s_high=(0.30, s_val), penalty_v=1000.0
                )
                try:
                    path = solve_lcpm(slices, schedule, rho=0.1, lat_bounds=(3, 3))
                except Exception:
                    lengths = []
                    break
                pos = path.positions().astype(float)
                lengths.append(np.linalg.norm(np.diff(pos, axis=0), axis=1).sum())
            for a, b in zip(lengths, lengths[1:]):
                assert b <= a + 1e-9

    def test_virtual_dominance(self):
        # Candidate slices never contain virtual nodes, so a candidate-only
        # interval is traversed without virtuals.
        cand = np.column_stack([np.arange(15), np.zeros(15, int), np.zeros(15, int)])
        pd = principal_direction(np.column_stack([np.arange(40.0), np.zeros(40), np.zeros(40)]))
        slices = build_path_graph(cand, np.zeros((0, 3), int), pd, np.array([1, 1, 1]))
        path = solve_lcpm(slices, PenaltySchedule(), rho=0.1)
        assert all(n.kind != "virtual" for n in path.nodes)

    def test_occlusion_bridging_within_one_voxel(self):
        # 25 consecutive empty slices on a straight line: the virtual
        # segment stays within one voxel of the line.
        xs = list(range(30)) + list(range(55, 85))
        cand = np.column_stack([xs, np.full(len(xs), 7), np.full(len(xs), 2)])
        pd = principal_direction(cand)
        slices = build_path_graph(cand, np.zeros((0, 3), int), pd, np.array([1, 1, 1]))
        path = solve_lcpm(slices, PenaltySchedule(), rho=0.1)
        pos = path.positions()
        virtual = np.array([n.kind == "virtual" for n in path.nodes])
        assert virtual.sum() >= 24
        lateral = np.abs(pos[virtual][:, 1:] - np.array([7, 2]))
        assert lateral.max() <= 1


def straight_curb_grid(length=300, with_candidates=True):
    """A synthetic voxel scene: flat road plane plus one curb-like ridge."""
    cells = []
    for i in range(length):
        for j in range(40):
            cells.append((i, j, 0))
        cells.append((i, 40, 1))
        cells.append((i, 40, 2))
        for j in range(41, 50):
            cells.append((i, j, 3))
    cells = np.array(cells, dtype=np.int64)
    pts = (cells + 0.5) * 0.04
    grid = build_grid(PointCloud(pts), 0.04)
    cand_cells = cells[(cells[:, 1] >= 39) & (cells[:, 1] <= 41)]
    keys = np.unique(pack_keys(grid.point_to_index((cand_cells + 0.5) * 0.04)))
    return grid, CandidateSet(grid, keys)


class TestRefineScene:
    def test_straight_ridge_spanning_three_regions_gives_single_path(self):
        grid, cands = straight_curb_grid()  # 300 voxels long = 3 regions
        paths = refine_scene(grid, cands)
        assert len(paths) == 1
        pos = paths[0].positions()
        assert pos[:, 0].max() - pos[:, 0].min() >= 280

    def test_rho_gate_blocks_sparse_regions(self):
        grid, cands = straight_curb_grid()
        schedule = PenaltySchedule(rho_min=0.99)
        assert refine_scene(grid, cands, schedule) == []

    def test_slice_ranks_strictly_increase(self):
        grid, cands = straight_curb_grid()
        for path in refine_scene(grid, cands):
            ranks = [n.slice_rank for n in path.nodes]
            assert all(b > a for a, b in zip(ranks, ranks[1:]))

    def test_empty_candidates_rejected(self):
        grid, _ = straight_curb_grid()
        empty = CandidateSet(grid, np.array([], dtype=np.int64))
        with pytest.raises(ValidationError):
            refine_scene(grid, empty)

    def test_flat_noise_paths_filtered(self):
        # Candidates along a line on a FLAT plane: no elevation step, so
        # the height-step validator must reject the path.
        cells = np.array([(i, j, 0) for i in range(200) for j in range(40)], dtype=np.int64)
        pts = (cells + 0.5) * 0.04
        grid = build_grid(PointCloud(pts), 0.04)
        line = cells[cells[:, 1] == 20]
        keys = np.unique(pack_keys(grid.point_to_index((line + 0.5) * 0.04)))
        paths = refine_scene(grid, CandidateSet(grid, keys))
        assert paths == []

    def test_path_polyline_roundtrip(self):
        grid, cands = straight_curb_grid()
        paths = refine_scene(grid, cands)
        polylines = paths_to_polylines(paths, grid)
        assert len(polylines) == len(paths)
        assert all(len(p) >= 2 for p in polylines)

    def test_stitched_paths_resum_their_cost(self):
        grid, cands = straight_curb_grid()
        for path in refine_scene(grid, cands):
            assert path.total_cost == pytest.approx(path.recompute_cost(), abs=1e-9)


class TestLinkIntersection:
    def test_perpendicular_corner_arc(self):
        a = Polyline3(np.array([[x, 0.0, 0.0] for x in np.linspace(-10, -2, 20)]))
        b = Polyline3(np.array([[0.0, y, 0.0] for y in np.linspace(2, 10, 20)]))
        arc = link_intersection(a, b, max_gap=5.0, spacing=0.04)
        assert arc is not None
        ends = {tuple(arc.vertices[0]), tuple(arc.vertices[-1])}
        assert tuple(a.vertices[-1]) in ends
        assert tuple(b.vertices[0]) in ends

    def test_collinear_gap_becomes_straight_segment(self):
        a = Polyline3(np.array([[x, 0.0, 0.0] for x in np.linspace(0, 5, 10)]))
        b = Polyline3(np.array([[x, 0.0, 0.0] for x in np.linspace(7, 12, 10)]))
        arc = link_intersection(a, b, max_gap=5.0, spacing=0.1)
        assert arc is not None
        assert np.abs(arc.vertices[:, 1]).max() < 1e-9  # stays on the line

    def test_parallel_siblings_not_linked(self):
        a = Polyline3(np.array([[x, 0.0, 0.0] for x in np.linspace(0, 5, 10)]))
        b = Polyline3(np.array([[x, 1.0, 0.0] for x in np.linspace(0, 5, 10)]))
        assert link_intersection(a, b, max_gap=5.0) is None

    def test_gap_beyond_limit(self):
        a = Polyline3(np.array([[x, 0.0, 0.0] for x in np.linspace(-10, -2, 5)]))
        b = Polyline3(np.array([[0.0, y, 0.0] for y in np.linspace(2, 10, 5)]))
        assert link_intersection(a, b, max_gap=1.0) is None
