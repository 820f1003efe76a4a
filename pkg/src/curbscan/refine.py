"""Least-cost-path linking of candidate voxels into curb polylines.

Candidates are processed per search region (default 100^3 voxels). Inside a
region they are clustered into 26-connected components and regrouped into
line groups (robust line fits seeded from the strongest components; curb
evidence fragments along its line and picks up noise arms, so neither raw
components nor plain SVD directions can be trusted). Each line group is
then refined independently:

1. principal direction of the group's core by SVD of the centered
   coordinates,
2. step sizes from the singular value spread (near-linear groups step
   finely, diffuse ones coarsely),
3. nodes (candidates plus nearby non-candidate occupied voxels) bucketed
   into slices along the principal direction, evidence holes filled with
   virtual nodes at interpolated lattice positions,
4. dynamic program over the slice sequence minimizing data plus smoothness
   cost, with backtracking; the data term is 0 for candidates, penaltyD
   for occupied non-candidates and penaltyV for virtual nodes, and the
   smoothness term is penaltyS times the Euclidean inter-node distance in
   voxel units.

Paths whose sides show no elevation step are discarded (a curb separates
two surfaces at different heights; scanner gaps, scene rims and flat noise
clusters do not), and paths from adjacent regions are stitched where their
endpoints meet, with tangent-alignment gating for anything beyond small
gaps so genuine interruptions stay open.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .energy import CandidateSet
from .errors import ProcessingError, ValidationError
from .io import Polyline3, dedupe_vertices
from .voxel import VoxelGrid, pack_keys

KIND_CANDIDATE = 0
KIND_NON_CANDIDATE = 1
KIND_VIRTUAL = 2

_KIND_NAMES = {KIND_CANDIDATE: "candidate", KIND_NON_CANDIDATE: "non_candidate", KIND_VIRTUAL: "virtual"}


@dataclass(frozen=True)
class PenaltySchedule:
    """Data/smoothness penalties as piecewise-linear ramps of the candidate fraction."""

    d_low: tuple[float, float] = (0.04, 50.0)
    d_high: tuple[float, float] = (0.30, 500.0)
    s_low: tuple[float, float] = (0.04, 500.0)
    s_high: tuple[float, float] = (0.30, 50.0)
    penalty_v: float = 1000.0
    rho_min: float = 0.04

    def __post_init__(self):
        if self.d_low[1] > self.d_high[1]:
            raise ValidationError("penaltyD ramp must be non-decreasing in rho")
        if self.s_low[1] < self.s_high[1]:
            raise ValidationError("penaltyS ramp must be non-increasing in rho")
        if self.penalty_v < max(self.d_low[1], self.d_high[1]):
            raise ValidationError("penaltyV must dominate penaltyD")

    @staticmethod
    def _interp(rho: float, lo: tuple[float, float], hi: tuple[float, float]) -> float:
        (r0, v0), (r1, v1) = lo, hi
        if rho <= r0:
            return v0
        if rho >= r1:
            return v1
        return v0 + (v1 - v0) * (rho - r0) / (r1 - r0)

    def penalty_d(self, rho: float) -> float:
        return self._interp(rho, self.d_low, self.d_high)

    def penalty_s(self, rho: float) -> float:
        return self._interp(rho, self.s_low, self.s_high)


@dataclass(frozen=True)
class PrincipalDirection:
    v1: np.ndarray
    singular_values: np.ndarray  # (3,) descending, zero padded


def principal_direction(positions: np.ndarray) -> PrincipalDirection:
    """First right singular vector of the centered coordinate matrix.

    The sign is fixed so the largest-magnitude component of v1 is positive.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 2:
        raise ValidationError("principal_direction needs at least 2 points of shape (q, 3)")
    centered = pos - pos.mean(axis=0)
    if not centered.any():
        raise ValidationError("principal_direction: all points coincide")
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    svals = np.zeros(3)
    svals[: len(s)] = s
    v1 = vt[0]
    pivot = int(np.argmax(np.abs(v1)))
    if v1[pivot] < 0:
        v1 = -v1
    return PrincipalDirection(v1, svals)


def step_size(pd: PrincipalDirection, extents) -> np.ndarray:
    """Per-axis step from the singular value spread.

    factor = 1 - s1 / ||s||: 0 for perfectly linear groups (fine steps,
    floored at 1 voxel), 1 - 1/sqrt(3) for isotropic ones.
    """
    s = pd.singular_values
    norm = float(np.sqrt((s * s).sum()))
    if norm <= 0 or s[0] <= 0:
        raise ValidationError("step_size: degenerate principal direction")
    factor = 1.0 - s[0] / norm
    ext = np.asarray(extents, dtype=np.float64)
    return np.maximum(1, np.floor(factor * ext)).astype(np.int64)


@dataclass
class Slice:
    rank: int
    positions: np.ndarray  # (p, 3) int64
    kinds: np.ndarray  # (p,) int8


@dataclass
class PathNode:
    position: tuple[int, int, int]
    kind: str
    slice_rank: int


@dataclass
class CurbPath:
    """An ordered node path with its cost decomposition."""

    nodes: list[PathNode]
    data_costs: np.ndarray  # (n,)
    smooth_costs: np.ndarray  # (n - 1,)
    total_cost: float
    rho: float
    penalty_s: float
    region_id: tuple[int, int, int] | None = None
    diag: dict = field(default_factory=dict)

    def positions(self) -> np.ndarray:
        return np.array([n.position for n in self.nodes], dtype=np.int64)

    def recompute_cost(self) -> float:
        return float(self.data_costs.sum() + self.smooth_costs.sum())


def path_polyline(path: CurbPath, grid: VoxelGrid, name: str = "") -> Polyline3:
    """World polyline through the voxel centers of all nodes, virtual included."""
    verts = dedupe_vertices(grid.voxel_center(path.positions()))
    return Polyline3(verts, name=name)


# ---------------------------------------------------------------------------
# Graph construction
# ---------------------------------------------------------------------------


def build_path_graph(
    cand_positions: np.ndarray,
    other_positions: np.ndarray,
    pd: PrincipalDirection,
    step: np.ndarray,
    virtual_backup_tol: float = 3.0,
) -> list[Slice]:
    """Bucket nodes into slices along the principal direction.

    Slice width is the step vector projected onto v1 (at least one voxel).
    Ranks with no voxel at all get a single virtual node at the position
    interpolated between the candidate anchors of the flanking evidence;
    an occupied rank whose nodes all sit farther than
    ``virtual_backup_tol`` from that interpolated position gets the same
    virtual fallback in addition (a slice holding only stray off-line
    voxels would otherwise force a detour).
    """
    cand_positions = np.asarray(cand_positions, dtype=np.int64).reshape(-1, 3)
    other_positions = np.asarray(other_positions, dtype=np.int64).reshape(-1, 3)
    if len(cand_positions) == 0:
        raise ValidationError("build_path_graph needs at least one candidate node")
    positions = np.concatenate([cand_positions, other_positions], axis=0)
    kinds = np.concatenate(
        [
            np.full(len(cand_positions), KIND_CANDIDATE, dtype=np.int8),
            np.full(len(other_positions), KIND_NON_CANDIDATE, dtype=np.int8),
        ]
    )
    v1 = pd.v1
    width = max(1.0, float(np.abs(v1) @ np.asarray(step, dtype=np.float64)))
    proj = positions.astype(np.float64) @ v1
    base = proj.min()
    ranks = np.floor((proj - base) / width + 1e-12).astype(np.int64)
    n_ranks = int(ranks.max()) + 1

    by_rank: dict[int, np.ndarray] = {}
    order = np.argsort(ranks, kind="stable")
    sorted_ranks = ranks[order]
    cuts = np.flatnonzero(np.diff(sorted_ranks)) + 1
    for chunk in np.split(order, cuts):
        by_rank[int(ranks[chunk[0]])] = chunk

    # Anchors for virtual placement: the componentwise median of the
    # candidate nodes in the nearest few candidate-bearing slices (median,
    # not mean: off-line noise candidates are a minority and must not drag
    # virtual nodes off the curb line; a window of slices smooths out the
    # disturbed evidence right at an occlusion boundary).
    has_cand = {r: (kinds[rows] == KIND_CANDIDATE).any() for r, rows in by_rank.items()}
    cand_ranks = sorted(r for r in by_rank if has_cand[r])

    def anchor(side_ranks) -> np.ndarray:
        rows = np.concatenate([by_rank[r] for r in side_ranks])
        sel = rows[kinds[rows] == KIND_CANDIDATE]
        src = positions[sel] if len(sel) else positions[rows]
        return np.median(src, axis=0)

    def expected_at(r: int) -> np.ndarray | None:
        below = [rr for rr in cand_ranks if rr < r][-3:]
        above = [rr for rr in cand_ranks if rr > r][:3]
        if below and above:
            t = (r - below[-1]) / (above[0] - below[-1])
            a0, a1 = anchor(below), anchor(above)
            return a0 + t * (a1 - a0)
        if below:
            return anchor(below)
        if above:
            return anchor(above)
        return None

    slices: list[Slice] = []
    for r in range(n_ranks):
        if r in by_rank:
            rows = by_rank[r]
            pos = positions[rows]
            knd = kinds[rows]
            if not has_cand[r]:
                exp = expected_at(r)
                if exp is not None:
                    near = np.linalg.norm(pos - exp, axis=1).min()
                    if near > virtual_backup_tol:
                        pos = np.concatenate([pos, np.rint(exp).astype(np.int64).reshape(1, 3)])
                        knd = np.concatenate([knd, np.array([KIND_VIRTUAL], dtype=np.int8)])
            slices.append(Slice(r, pos, knd))
        else:
            exp = expected_at(r)
            pos = np.rint(exp).astype(np.int64)
            slices.append(Slice(r, pos.reshape(1, 3), np.array([KIND_VIRTUAL], dtype=np.int8)))
    return slices


# ---------------------------------------------------------------------------
# Dynamic program
# ---------------------------------------------------------------------------


def _data_costs(kinds: np.ndarray, p_d: float, p_v: float) -> np.ndarray:
    costs = np.zeros(len(kinds), dtype=np.float64)
    costs[kinds == KIND_NON_CANDIDATE] = p_d
    costs[kinds == KIND_VIRTUAL] = p_v
    return costs


def solve_lcpm(
    slices: list[Slice],
    schedule: PenaltySchedule,
    rho: float,
    lat_axes: tuple[int, int] = (1, 2),
    lat_bounds: tuple[int, int] = (1, 1),
) -> CurbPath:
    """Least-cost slice-monotone path through the graph.

    A synthetic start node connects to every slice-0 node at zero cost; the
    program scans slices in order with predecessors restricted to the
    previous slice within the lateral shift bounds, and backtracks from the
    cheapest last-slice node. If the bounds admit no feasible transition
    they are doubled and the solve retried (the step sizes were too tight
    for the data).
    """
    if not slices:
        raise ValidationError("solve_lcpm needs at least one slice")
    p_d = schedule.penalty_d(rho)
    p_s = schedule.penalty_s(rho)
    p_v = schedule.penalty_v

    bounds = np.array(lat_bounds, dtype=np.int64)
    cap = max(4096, int(bounds.max()) * 2)
    while True:
        result = _solve_once(slices, p_d, p_s, p_v, lat_axes, bounds)
        if result is not None:
            node_rows, data, smooth = result
            break
        if bounds.max() >= cap:
            raise ProcessingError("no feasible slice-to-slice transition even after widening bounds")
        bounds = bounds * 2

    nodes = [
        PathNode(tuple(int(v) for v in slices[t].positions[j]), _KIND_NAMES[int(slices[t].kinds[j])], t)
        for t, j in node_rows
    ]
    total = float(data.sum() + smooth.sum())
    return CurbPath(nodes, data, smooth, total, rho, p_s)


def _solve_once(slices, p_d, p_s, p_v, lat_axes, bounds):
    a0, a1 = lat_axes
    b0, b1 = int(bounds[0]), int(bounds[1])
    n = len(slices)
    costs = [None] * n
    parents = [None] * n
    costs[0] = _data_costs(slices[0].kinds, p_d, p_v)
    step_dist = [None] * n
    for t in range(1, n):
        prev = slices[t - 1].positions.astype(np.float64)
        cur = slices[t].positions.astype(np.float64)
        diff = cur[:, None, :] - prev[None, :, :]
        ok = (np.abs(diff[:, :, a0]) <= b0) & (np.abs(diff[:, :, a1]) <= b1)
        if not ok.any():
            return None
        dis = np.sqrt((diff * diff).sum(axis=2))
        trans = costs[t - 1][None, :] + p_s * dis
        trans[~ok] = np.inf
        j_best = np.argmin(trans, axis=1)
        best = trans[np.arange(len(cur)), j_best]
        feasible = np.isfinite(best)
        if not feasible.any():
            return None
        data_t = _data_costs(slices[t].kinds, p_d, p_v)
        costs[t] = np.where(feasible, best + data_t, np.inf)
        parents[t] = j_best
        step_dist[t] = dis[np.arange(len(cur)), j_best]

    end = int(np.argmin(costs[-1]))
    if not np.isfinite(costs[-1][end]):
        return None
    rows = []
    smooth = []
    j = end
    for t in range(n - 1, -1, -1):
        rows.append((t, j))
        if t > 0:
            smooth.append(p_s * step_dist[t][j])
            j = int(parents[t][j])
    rows.reverse()
    smooth.reverse()
    data = np.array([_data_costs(slices[t].kinds[j : j + 1], p_d, p_v)[0] for t, j in rows])
    return rows, data, np.array(smooth, dtype=np.float64)


# ---------------------------------------------------------------------------
# Scene-level refinement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchRegion:
    region_id: tuple[int, int, int]
    offset: np.ndarray  # (3,) int64 voxel corner
    extents: np.ndarray  # (3,) int64
    occupied_count: int
    candidate_rows: np.ndarray  # rows into the candidate index array
    rho: float


@dataclass(frozen=True)
class RefineParams:
    region_extents: tuple[int, int, int] = (100, 100, 100)
    min_component: int = 10
    merge_lateral_tol: float = 6.0
    core_lateral_tol: float = 3.0
    merge_angle_deg: float = 25.0
    min_span: float = 25.0
    corridor_radius: float = 8.0
    validate_step: bool = True
    min_height_step: float = 0.05
    # Adjacent-region path ends are ragged: they can sit on opposite curb
    # edges (top vs bottom) and start a few slices into the region. Gaps
    # beyond a couple voxels are only stitched when the connecting segment
    # lines up with both end tangents, so genuine interruptions (ramps,
    # intersection corners) stay open.
    stitch_tol: float = 15.0
    stitch_free_tol: float = 6.0


def _connected_components(indices: np.ndarray, min_size: int) -> list[np.ndarray]:
    """26-connected components of a voxel index set, smallest dropped."""
    keys = pack_keys(indices)
    key_to_row = {int(k): r for r, k in enumerate(keys)}
    key_offsets = [
        (i << 42) + (j << 21) + k
        for i in (-1, 0, 1)
        for j in (-1, 0, 1)
        for k in (-1, 0, 1)
        if (i, j, k) != (0, 0, 0)
    ]
    seen = np.zeros(len(indices), dtype=bool)
    comps = []
    for start in range(len(indices)):
        if seen[start]:
            continue
        queue = deque([start])
        seen[start] = True
        rows = []
        while queue:
            r = queue.popleft()
            rows.append(r)
            base = int(keys[r])
            for off in key_offsets:
                nb = key_to_row.get(base + off)
                if nb is not None and not seen[nb]:
                    seen[nb] = True
                    queue.append(nb)
        if len(rows) >= min_size:
            comps.append(np.array(rows, dtype=np.int64))
    return comps


def _line_distance(points: np.ndarray, centroid: np.ndarray, direction: np.ndarray) -> np.ndarray:
    rel = points - centroid
    along = rel @ direction
    return np.linalg.norm(rel - along[:, None] * direction[None, :], axis=1)


def _trimmed_line(pts: np.ndarray, tol: float, iters: int = 3):
    """Iteratively refit a line, dropping points farther than ``tol`` from it.

    Candidate components pick up noise arms through 26-connectivity; a
    plain SVD direction tilts with them, a trimmed one converges back to
    the dominant spine. Returns (centroid, v1, inlier mask) or None.
    """
    keep = np.ones(len(pts), dtype=bool)
    centroid = pts.mean(axis=0)
    v1 = None
    for _ in range(iters):
        sub = pts[keep]
        if len(sub) < 2 or not (sub - sub.mean(axis=0)).any():
            return None
        pd = principal_direction(sub)
        centroid, v1 = sub.mean(axis=0), pd.v1
        lat = _line_distance(pts, centroid, v1)
        new_keep = lat <= tol
        if (new_keep == keep).all():
            break
        keep = new_keep
    if v1 is None or keep.sum() < 2:
        return None
    return centroid, v1, keep


def _extract_line_groups(
    positions: np.ndarray, comps: list[np.ndarray], params: RefineParams
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Pull line-shaped candidate groups out of a region's components.

    Components are tried largest first as seeds. A seed must robust-fit to
    a strongly elongated line; the line then absorbs every still-available
    candidate voxel within ``merge_lateral_tol`` of it (curb evidence
    fragments along its line, and the top and bottom edge of one curb are
    two parallel strips of the same shell). Voxels hugging the line within
    ``core_lateral_tol`` form the core that defines the path's extent.
    Returns (member_rows, core_rows, v1) triples.
    """
    from .evaluate import fit_line_ransac

    n = len(positions)
    pts = positions.astype(np.float64)
    available = np.zeros(n, dtype=bool)
    for rows in comps:
        available[rows] = True

    out = []
    for rows in sorted(comps, key=len, reverse=True):
        rows = rows[available[rows]]
        if len(rows) < params.min_component:
            continue
        extent = positions[rows].max(axis=0) - positions[rows].min(axis=0)
        if float(np.linalg.norm(extent)) < params.min_span:
            continue  # cannot possibly span a seed line
        # A robust fit is required: 26-connectivity attaches noise arms to
        # curb components and a plain SVD direction tilts with them.
        try:
            centroid, v1, inliers = fit_line_ransac(
                pts[rows],
                iters=64,
                inlier_tol=params.core_lateral_tol,
                seed=int(pack_keys(positions[rows[:1]])[0]) & 0x7FFFFFFF,
            )
        except ValidationError:
            continue
        sub = pts[rows][inliers]
        if len(sub) < 2 or not (sub - sub.mean(axis=0)).any():
            continue
        proj = sub @ v1
        span = float(proj.max() - proj.min())
        pd_in = principal_direction(sub)
        aspect = pd_in.singular_values[0] / max(pd_in.singular_values[1], 1e-9)
        if span < params.min_span or aspect < 4.0:
            continue

        avail_rows = np.flatnonzero(available)
        lat = _line_distance(pts[avail_rows], centroid, v1)
        member_rows = avail_rows[lat <= params.merge_lateral_tol]
        core_rows = avail_rows[lat <= params.core_lateral_tol]
        available[member_rows] = False
        out.append((member_rows, core_rows, v1))

    # Pooled passes over the leftovers: a diffuse or sparse shell breaks
    # into sub-span fragments that never form one component, but they
    # still align on a line the pooled fit can find.
    for attempt in range(6):
        rows = np.flatnonzero(available)
        if len(rows) < max(params.min_component, 20):
            break
        try:
            centroid, v1, inliers = fit_line_ransac(
                pts[rows],
                iters=256,
                inlier_tol=params.core_lateral_tol,
                seed=(int(pack_keys(positions[rows[:1]])[0]) + attempt) & 0x7FFFFFFF,
            )
        except ValidationError:
            break
        sub = pts[rows][inliers]
        if len(sub) < params.min_component or not (sub - sub.mean(axis=0)).any():
            break
        proj = sub @ v1
        span = float(proj.max() - proj.min())
        pd_in = principal_direction(sub)
        aspect = pd_in.singular_values[0] / max(pd_in.singular_values[1], 1e-9)
        if span < params.min_span or aspect < 4.0:
            break
        lat = _line_distance(pts[rows], centroid, v1)
        member_rows = rows[lat <= params.merge_lateral_tol]
        core_rows = rows[lat <= params.core_lateral_tol]
        available[member_rows] = False
        out.append((member_rows, core_rows, v1))
    return out


def make_regions(grid: VoxelGrid, candidates: CandidateSet, extents=(100, 100, 100)) -> list[SearchRegion]:
    """Tile the occupied extent into non-overlapping search regions."""
    ext = np.asarray(extents, dtype=np.int64)
    lo = grid.indices.min(axis=0)
    occ_rid = (grid.indices - lo) // ext
    cand_rid = (candidates.indices - lo) // ext

    occ_keys = pack_keys(occ_rid)
    uniq, occ_counts = np.unique(occ_keys, return_counts=True)
    occ_count_of = dict(zip(map(int, uniq), occ_counts))

    cand_keys = pack_keys(cand_rid)
    order = np.argsort(cand_keys, kind="stable")
    sorted_keys = cand_keys[order]
    cuts = np.flatnonzero(np.diff(sorted_keys)) + 1
    regions = []
    for chunk in np.split(order, cuts) if len(order) else []:
        key = int(cand_keys[chunk[0]])
        rid = tuple(int(v) for v in cand_rid[chunk[0]])
        occ = occ_count_of.get(key, 0)
        rho = len(chunk) / occ if occ else 0.0
        regions.append(
            SearchRegion(
                region_id=rid,
                offset=lo + np.array(rid, dtype=np.int64) * ext,
                extents=ext.copy(),
                occupied_count=int(occ),
                candidate_rows=chunk,
                rho=float(rho),
            )
        )
    regions.sort(key=lambda r: r.region_id)
    return regions


def _column_elevations(grid: VoxelGrid):
    """Mean occupied z (count weighted) per (i, j) column, for step probing."""
    idx = grid.indices
    col = idx[:, 0] * (1 << 21) + idx[:, 1]
    order = np.argsort(col, kind="stable")
    sc = col[order]
    zc = (idx[order, 2] + 0.5) * grid.voxel_size + grid.origin[2]
    w = grid.counts[order].astype(np.float64)
    cuts = np.flatnonzero(np.diff(sc)) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [len(sc)]])
    keys = sc[starts]
    zsum = np.add.reduceat(zc * w, starts)
    wsum = np.add.reduceat(w, starts)
    return keys, zsum / wsum


def has_height_step(
    path: CurbPath,
    grid: VoxelGrid,
    columns,
    min_step: float = 0.05,
    min_valid_fraction: float = 0.3,
    probe_range: tuple[int, int] = (2, 7),
) -> bool:
    """True when the path separates two surfaces at different elevations.

    Probes occupied columns a few voxels to each side of the path and
    compares their median elevations. A curb shows a persistent step; scene
    rims (one side empty), scanner gap borders and flat noise paths do not.
    """
    col_keys, col_z = columns
    verts = grid.voxel_center(path.positions())
    n = len(verts)
    stride = max(1, n // 50)
    samples = range(0, n, stride)
    vs = grid.voxel_size

    def column_z(p):
        i = int(np.floor((p[0] - grid.origin[0]) / vs))
        j = int(np.floor((p[1] - grid.origin[1]) / vs))
        key = i * (1 << 21) + j
        pos = np.searchsorted(col_keys, key)
        if pos < len(col_keys) and col_keys[pos] == key:
            return float(col_z[pos])
        return None

    steps = []
    n_samples = 0
    for s in samples:
        a = verts[max(0, s - 3)]
        b = verts[min(n - 1, s + 3)]
        t = b - a
        t[2] = 0.0
        norm = np.linalg.norm(t)
        if norm < 1e-9:
            continue
        n_samples += 1
        t /= norm
        lateral = np.array([-t[1], t[0], 0.0])
        z_side = []
        for sign in (1.0, -1.0):
            z = None
            for delta in range(probe_range[0], probe_range[1] + 1):
                z = column_z(verts[s] + sign * delta * vs * lateral)
                if z is not None:
                    break
            z_side.append(z)
        if z_side[0] is not None and z_side[1] is not None:
            steps.append(abs(z_side[0] - z_side[1]))
    if n_samples == 0 or len(steps) < max(1, min_valid_fraction * n_samples):
        return False
    return float(np.median(steps)) >= min_step


def _trim_ragged_ends(path: CurbPath, tol: float = 3.0, max_trim: int = 6) -> CurbPath:
    """Drop end nodes that sit far off the path's own fitted line.

    The first and last slice of a group can hold only an off-line absorbed
    candidate, so the DP has no better end choice; a few such nodes would
    spoil endpoint stitching.
    """
    pos = path.positions().astype(np.float64)
    n = len(pos)
    if n < 10:
        return path
    fit = _trimmed_line(pos, tol)
    if fit is None:
        return path
    centroid, v1, _ = fit
    lat = _line_distance(pos, centroid, v1)
    lo = 0
    while lo < max_trim and lat[lo] > tol:
        lo += 1
    hi = n
    while n - hi < max_trim and lat[hi - 1] > tol:
        hi -= 1
    if hi - lo < 2 or (lo == 0 and hi == n):
        return path
    nodes = [PathNode(nd.position, nd.kind, t) for t, nd in enumerate(path.nodes[lo:hi])]
    data = path.data_costs[lo:hi]
    smooth = path.smooth_costs[lo : hi - 1]
    return CurbPath(
        nodes, data, smooth, float(data.sum() + smooth.sum()),
        path.rho, path.penalty_s, path.region_id, path.diag,
    )


def _suppress_overlaps(paths: list[CurbPath], radius: float = 8.0, fraction: float = 0.7) -> list[CurbPath]:
    """Drop paths that mostly duplicate a longer kept path.

    Distinct line groups over the same curb shell (top edge vs bottom
    edge leftovers) can emit near-parallel short paths; only the longest
    presentation of each curb is kept.
    """
    order = sorted(paths, key=lambda p: -len(p.nodes))
    kept: list[CurbPath] = []
    kept_pos: list[np.ndarray] = []
    for p in order:
        pos = p.positions().astype(np.float64)
        duplicate = False
        for other in kept_pos:
            d2 = ((pos[:, None, :] - other[None, :, :]) ** 2).sum(axis=2)
            near = np.sqrt(d2.min(axis=1)) <= radius
            if near.mean() >= fraction:
                duplicate = True
                break
        if not duplicate:
            kept.append(p)
            kept_pos.append(pos)
    return kept


def _stitch_paths(paths: list[CurbPath], tol: float, free_tol: float = 3.0) -> list[CurbPath]:
    """Concatenate paths whose endpoints are within ``tol`` voxels.

    Gaps wider than ``free_tol`` additionally need the connecting segment
    aligned with both end tangents (within 45 degrees).
    """

    def ends(p: CurbPath):
        pos = p.positions()
        return pos[0], pos[-1]

    def out_tangent(p: CurbPath, which: int) -> np.ndarray:
        pos = p.positions().astype(np.float64)
        k = min(6, len(pos) - 1)
        t = pos[0] - pos[k] if which == 0 else pos[-1] - pos[-1 - k]
        norm = np.linalg.norm(t)
        return t / norm if norm > 0 else t

    def alignable(pa: CurbPath, ea: int, pb: CurbPath, eb: int, gap_vec: np.ndarray) -> bool:
        # Curbs are horizontal structures; endpoint flips between the top
        # and bottom edge of a shell produce vertical offsets that say
        # nothing about continuity, so the angle test is horizontal only.
        if abs(gap_vec[2]) > 6.0:
            return False
        gap_h = gap_vec.copy()
        gap_h[2] = 0.0
        gh = np.linalg.norm(gap_h)
        if gh <= free_tol:
            return True
        jv = gap_h / gh
        cos45 = math.cos(math.radians(45.0))

        def horiz(t):
            t = t.copy()
            t[2] = 0.0
            norm = np.linalg.norm(t)
            return t / norm if norm > 0 else t

        ta = horiz(out_tangent(pa, ea))
        tb = horiz(out_tangent(pb, eb))
        return float(ta @ jv) >= cos45 and float(-tb @ jv) >= cos45

    def reverse(p: CurbPath) -> CurbPath:
        return CurbPath(
            list(reversed(p.nodes)),
            p.data_costs[::-1].copy(),
            p.smooth_costs[::-1].copy(),
            p.total_cost,
            p.rho,
            p.penalty_s,
            p.region_id,
            p.diag,
        )

    def join(a: CurbPath, b: CurbPath) -> CurbPath:
        pa, pb = a.positions(), b.positions()
        gap = float(np.linalg.norm(pa[-1] - pb[0]))
        if gap == 0.0:
            nodes = a.nodes + b.nodes[1:]
            data = np.concatenate([a.data_costs, b.data_costs[1:]])
            smooth = np.concatenate([a.smooth_costs, b.smooth_costs])
        else:
            nodes = a.nodes + b.nodes
            data = np.concatenate([a.data_costs, b.data_costs])
            smooth = np.concatenate([a.smooth_costs, [a.penalty_s * gap], b.smooth_costs])
        nodes = [PathNode(nd.position, nd.kind, t) for t, nd in enumerate(nodes)]
        total = float(data.sum() + smooth.sum())
        return CurbPath(nodes, data, smooth, total, a.rho, a.penalty_s, a.region_id, a.diag)

    paths = list(paths)
    merged = True
    while merged and len(paths) > 1:
        merged = False
        best = None
        for ia in range(len(paths)):
            for ib in range(ia + 1, len(paths)):
                for ea in (0, 1):
                    for eb in (0, 1):
                        gap_vec = (ends(paths[ib])[eb] - ends(paths[ia])[ea]).astype(np.float64)
                        d = float(np.linalg.norm(gap_vec))
                        if d > tol or (best is not None and d >= best[0]):
                            continue
                        if not alignable(paths[ia], ea, paths[ib], eb, gap_vec):
                            continue
                        best = (d, ia, ib, ea, eb)
        if best is None:
            break
        _, ia, ib, ea, eb = best
        a, b = paths[ia], paths[ib]
        if ea == 0:
            a = reverse(a)
        if eb == 1:
            b = reverse(b)
        joined = join(a, b)
        paths = [p for i, p in enumerate(paths) if i not in (ia, ib)]
        paths.append(joined)
        merged = True
    return paths


def refine_scene(
    grid: VoxelGrid,
    candidates: CandidateSet,
    schedule: PenaltySchedule | None = None,
    params: RefineParams | None = None,
) -> list[CurbPath]:
    """Run the full refinement over a scene; returns stitched curb paths.

    Regions below the no-curb candidate fraction threshold produce
    nothing; an empty result is valid.
    """
    schedule = schedule or PenaltySchedule()
    params = params or RefineParams()
    if len(candidates) == 0:
        raise ValidationError("refine_scene needs a non-empty candidate set")

    cand_idx = candidates.indices
    cand_member = candidates.member_mask()
    regions = make_regions(grid, candidates, params.region_extents)
    columns = _column_elevations(grid) if params.validate_step else None

    paths: list[CurbPath] = []
    for region in regions:
        if region.rho < schedule.rho_min:
            continue
        rows = region.candidate_rows
        comp_list = _connected_components(cand_idx[rows], params.min_component)
        if not comp_list:
            continue
        groups = _extract_line_groups(cand_idx[rows], comp_list, params)

        # Occupied non-candidate cells of this region, fetched once.
        lo = region.offset
        hi = lo + region.extents
        occ_idx = grid.indices
        in_box = ((occ_idx >= lo) & (occ_idx < hi)).all(axis=1)
        others_all = occ_idx[in_box & ~cand_member]

        for gid, (group_rows, core_rows, _seed_v1) in enumerate(groups):
            core_pos = cand_idx[rows][core_rows]
            if len(core_pos) < 2:
                continue
            pd = principal_direction(core_pos)
            core_proj = core_pos.astype(np.float64) @ pd.v1
            span = float(core_proj.max() - core_proj.min())
            if span < params.min_span:
                continue
            step = step_size(pd, region.extents)

            # Absorbed noise blobs may not extend the path beyond the core.
            gpos = cand_idx[rows][group_rows]
            gproj = gpos.astype(np.float64) @ pd.v1
            inside = (gproj >= core_proj.min()) & (gproj <= core_proj.max())
            gpos = gpos[inside]
            if len(gpos) < 2:
                continue

            centroid = core_pos.mean(axis=0)
            if len(others_all):
                lat = _line_distance(others_all.astype(np.float64), centroid, pd.v1)
                opro = others_all.astype(np.float64) @ pd.v1
                near = (
                    (lat <= params.corridor_radius)
                    & (opro >= core_proj.min() - 1.0)
                    & (opro <= core_proj.max() + 1.0)
                )
                others = others_all[near]
            else:
                others = others_all

            slices = build_path_graph(gpos, others, pd, step, params.core_lateral_tol)
            dominant = int(np.argmax(np.abs(pd.v1)))
            lat_axes = tuple(a for a in range(3) if a != dominant)
            lat_bounds = tuple(int(step[a]) for a in lat_axes)
            try:
                path = solve_lcpm(slices, schedule, region.rho, lat_axes, lat_bounds)
            except ProcessingError:
                continue
            path = _trim_ragged_ends(path)
            path.region_id = region.region_id
            path.diag = {
                "rho": region.rho,
                "q": len(gpos),
                "s1": float(pd.singular_values[0]),
                "s2": float(pd.singular_values[1]),
                "s3": float(pd.singular_values[2]),
                "step": tuple(int(v) for v in step),
                "group": gid,
            }
            paths.append(path)

    if params.validate_step:
        paths = [p for p in paths if has_height_step(p, grid, columns, params.min_height_step)]

    paths = _suppress_overlaps(paths)
    stitched = _stitch_paths(paths, params.stitch_tol, params.stitch_free_tol)
    return _suppress_overlaps(stitched)


def paths_to_polylines(paths: list[CurbPath], grid: VoxelGrid) -> list[Polyline3]:
    out = []
    for k, p in enumerate(paths):
        try:
            out.append(path_polyline(p, grid, name=f"curb{k}"))
        except ValidationError:
            continue  # single-node path has no polyline
    return out


def link_intersection(
    line_a: Polyline3,
    line_b: Polyline3,
    max_gap: float,
    spacing: float = 0.04,
) -> Polyline3 | None:
    """Bridge two curb ends with a quadratic Bezier arc.

    Applies only when the closest endpoints are within ``max_gap`` and the
    outward end tangents meet at more than 45 degrees; an intersection
    corner reads ~90 degrees and a collinear continuation 180, while two
    parallel side-by-side curbs read ~0 and are never linked. The control
    point is the closest approach of the two end-tangent lines, falling
    back to the gap midpoint when they are near parallel (which makes a
    collinear bridge an exact straight segment).
    """
    av, bv = line_a.vertices, line_b.vertices
    pairs = [(0, 0), (0, len(bv) - 1), (len(av) - 1, 0), (len(av) - 1, len(bv) - 1)]
    dists = [float(np.linalg.norm(av[i] - bv[j])) for i, j in pairs]
    best = int(np.argmin(dists))
    if dists[best] > max_gap:
        return None
    ia, ib = pairs[best]

    def end_tangent(verts, idx):
        # Points outward, away from the polyline body.
        k = min(5, len(verts) - 1)
        t = verts[idx] - (verts[idx + k] if idx == 0 else verts[idx - k])
        norm = np.linalg.norm(t)
        return t / norm if norm > 0 else None

    ta = end_tangent(av, ia)
    tb = end_tangent(bv, ib)
    if ta is None or tb is None:
        return None
    if float(ta @ tb) > math.cos(math.radians(45.0)):
        return None

    p0, p2 = av[ia], bv[ib]
    # Closest approach of the two end-tangent lines.
    w0 = p0 - p2
    a = float(ta @ ta)
    b = float(ta @ tb)
    c = float(tb @ tb)
    d = float(ta @ w0)
    e = float(tb @ w0)
    denom = a * c - b * b
    if abs(denom) < 1e-12:
        control = (p0 + p2) / 2.0
    else:
        s = (b * e - c * d) / denom
        u = (a * e - b * d) / denom
        control = ((p0 + s * ta) + (p2 + u * tb)) / 2.0

    chord = float(np.linalg.norm(p2 - p0)) + float(np.linalg.norm(control - p0)) + float(
        np.linalg.norm(p2 - control)
    )
    n = max(2, int(math.ceil(chord / max(spacing, 1e-9))) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    curve = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * control + t * t * p2
    verts = dedupe_vertices(curve)
    if len(verts) < 2:
        return None
    return Polyline3(verts, name="link")
