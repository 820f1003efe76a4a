"""Synthetic road scenes with exact ground-truth curb lines.

A scene is a straight road along +x with a curb and sidewalk on each side,
optionally a crossing road, plus the perturbations needed to reproduce the
usual mobile-LiDAR failure modes: uneven left/right density, downsampling,
missing-curb ramps, occlusions, a lifted (cross-sloped) road side,
scanner gap strips and coordinate noise.

Sampling is seeded uniform sampling of each surface followed by a
minimum-spacing thinning pass (default 8 mm), mimicking the spacing floor a
real scanner enforces; without it the minimum pairwise distance of a random
cloud is vanishingly small and distance-scaled noise would be meaningless.

Ground truth is the analytic curb-top edge polyline of each curb. Ramps
interrupt the truth (the curb really ends); occlusions and all other
perturbations never move it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError
from .io import PointCloud, Polyline3

_BEVEL_DEG = 15.0
_RAMP_TRANSITION = 0.5  # m of curb-height taper at each ramp end
_CORNER_GAP = 1.0  # m of curbless corner at intersections
_OCCLUSION_REACH = 0.5  # m each side of the curb line cleared by an occlusion


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of a synthetic scene; lengths in meters, densities in pts/m^2."""

    road_length: float = 50.0
    road_width: float = 8.0
    sidewalk_width: float = 2.0
    curb_height: float = 0.15
    curb_profile: str = "vertical"
    density_road: float = 1800.0
    density_sidewalk: float = 1100.0
    density_gradient: tuple[float, float] | None = None
    slope_deg: float = 0.0
    occlusions: tuple[tuple[float, float], ...] = ()
    ramps: tuple[tuple[float, float], ...] = ()
    intersection: bool = False
    min_point_spacing: float = 0.008
    seed: int = 0

    def validate(self) -> None:
        if self.road_length <= 0:
            raise ValidationError("road_length must be positive")
        if self.road_width <= 0:
            raise ValidationError("road_width must be positive")
        if self.sidewalk_width <= 0:
            raise ValidationError("sidewalk_width must be positive")
        if not 0.0 < self.curb_height <= 0.25:
            raise ValidationError(f"curb_height must be in (0, 0.25], got {self.curb_height}")
        if self.curb_profile not in ("vertical", "beveled"):
            raise ValidationError(f"curb_profile must be 'vertical' or 'beveled', got {self.curb_profile!r}")
        if self.density_road <= 0 or self.density_sidewalk <= 0:
            raise ValidationError("densities must be positive")
        if not 0.0 <= self.slope_deg <= 30.0:
            raise ValidationError(f"slope_deg must be in [0, 30], got {self.slope_deg}")
        if self.density_gradient is not None:
            g0, g1 = self.density_gradient
            if g0 <= 0 or g1 <= 0:
                raise ValidationError("density_gradient multipliers must be positive")
        for name, segs in (("occlusions", self.occlusions), ("ramps", self.ramps)):
            for start, length in segs:
                if length <= 0:
                    raise ValidationError(f"{name}: segment length must be positive")
                if start < 0 or start + length > self.road_length:
                    raise ValidationError(
                        f"{name}: segment [{start}, {start + length}] outside road [0, {self.road_length}]"
                    )
        if self.min_point_spacing < 0:
            raise ValidationError("min_point_spacing must be >= 0")


@dataclass(frozen=True)
class SyntheticScene:
    cloud: PointCloud
    truth: tuple[Polyline3, ...]
    spec: SceneSpec


def _rng(spec: SceneSpec, label: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed & 0x7FFFFFFF, label])


def _curb_factor(spec: SceneSpec, x: np.ndarray) -> np.ndarray:
    """Curb height multiplier along the road: 0 inside ramps, linear taper at ends."""
    factor = np.ones_like(x)
    for start, length in spec.ramps:
        t0, t1 = start - _RAMP_TRANSITION, start + length + _RAMP_TRANSITION
        down = np.clip((start - x) / _RAMP_TRANSITION, 0.0, 1.0)
        up = np.clip((x - (start + length)) / _RAMP_TRANSITION, 0.0, 1.0)
        local = np.where(x < start, down, np.where(x > start + length, up, 0.0))
        local = np.where((x >= t0) & (x <= t1), local, 1.0)
        factor = np.minimum(factor, local)
    return factor


def _density_keep(spec: SceneSpec, rng: np.random.Generator, y: np.ndarray) -> np.ndarray:
    """Acceptance mask implementing the left/right density multiplier ramp."""
    if spec.density_gradient is None:
        return np.ones(len(y), dtype=bool)
    g0, g1 = spec.density_gradient
    y_max = spec.road_width / 2.0 + spec.sidewalk_width
    t = np.clip((y + y_max) / (2.0 * y_max), 0.0, 1.0)
    mult = g0 + (g1 - g0) * t
    return rng.uniform(0.0, max(g0, g1), len(y)) < mult


def _sample_counts(area: float, density: float) -> int:
    return max(0, int(round(area * density)))


def _bevel_offset(spec: SceneSpec) -> float:
    if spec.curb_profile == "beveled":
        return spec.curb_height * math.tan(math.radians(_BEVEL_DEG))
    return 0.0


def _intersection_geometry(spec: SceneSpec):
    xc = spec.road_length / 2.0
    half = spec.road_width / 2.0
    arm_end = half + spec.sidewalk_width + 2.0
    return xc, half, arm_end


def generate(spec: SceneSpec) -> SyntheticScene:
    """Sample a scene per spec; same spec and seed give a bit-identical scene."""
    spec.validate()
    length = spec.road_length
    half = spec.road_width / 2.0
    sw = spec.sidewalk_width
    h = spec.curb_height
    bevel = _bevel_offset(spec)

    chunks: list[np.ndarray] = []

    # Roadway plane.
    n = _sample_counts(length * 2 * half, spec.density_road)
    rng = _rng(spec, 1)
    x = rng.uniform(0.0, length, n)
    y = rng.uniform(-half, half, n)
    chunks.append(np.column_stack([x, y, np.zeros(n)]))

    # Curb faces and sidewalks, one set per side.
    for label, side in ((2, 1.0), (3, -1.0)):
        rng = _rng(spec, label)
        face_area = length * h / math.cos(math.radians(_BEVEL_DEG if bevel else 0.0))
        n = _sample_counts(face_area, spec.density_road)
        x = rng.uniform(0.0, length, n)
        v = rng.uniform(0.0, 1.0, n)  # normalized height on the face
        cf = _curb_factor(spec, x)
        keep = v <= cf  # ramps shorten the face
        x, v = x[keep], v[keep]
        z = v * h
        yf = side * (half + bevel * v)
        chunks.append(np.column_stack([x, yf, z]))

        rng = _rng(spec, label + 2)
        n = _sample_counts(length * sw, spec.density_sidewalk)
        x = rng.uniform(0.0, length, n)
        off = rng.uniform(0.0, sw, n)
        ys = side * (half + bevel + off)
        zs = _curb_factor(spec, x) * h
        chunks.append(np.column_stack([x, ys, zs]))

    if spec.intersection:
        xc, _, arm_end = _intersection_geometry(spec)
        for label, side in ((6, 1.0), (7, -1.0)):
            rng = _rng(spec, label)
            # Arm roadway continuing outward across the sidewalk band.
            n = _sample_counts(spec.road_width * (arm_end - half), spec.density_road)
            xa = rng.uniform(xc - half, xc + half, n)
            ya = side * rng.uniform(half, arm_end, n)
            chunks.append(np.column_stack([xa, ya, np.zeros(n)]))
            # Arm curb faces at x = xc +/- half.
            for sgn in (1.0, -1.0):
                na = _sample_counts((arm_end - (half + _CORNER_GAP)) * h, spec.density_road)
                yv = side * rng.uniform(half + _CORNER_GAP, arm_end, na)
                vv = rng.uniform(0.0, 1.0, na)
                xa = np.full(na, xc + sgn * half) + sgn * bevel * vv
                chunks.append(np.column_stack([xa, yv, vv * h]))

    pts = np.concatenate(chunks, axis=0)

    if spec.intersection:
        # Clear the sidewalk band where the arms cross it and drop curb
        # geometry inside the curbless crossing window.
        xc, _, _ = _intersection_geometry(spec)
        on_sidewalk_band = np.abs(pts[:, 1]) > half + 1e-9
        in_arm_x = np.abs(pts[:, 0] - xc) < half
        near_main_curb = np.abs(np.abs(pts[:, 1]) - half) <= bevel + 1e-9
        in_window_x = np.abs(pts[:, 0] - xc) < half + _CORNER_GAP
        drop = (on_sidewalk_band & in_arm_x) | (near_main_curb & in_window_x & (pts[:, 2] > 1e-9))
        pts = pts[~drop]

    # Occlusions remove every point within reach of the curb line.
    for start, seg_len in spec.occlusions:
        in_x = (pts[:, 0] >= start) & (pts[:, 0] <= start + seg_len)
        near_curb = np.abs(np.abs(pts[:, 1]) - half) <= _OCCLUSION_REACH
        pts = pts[~(in_x & near_curb)]

    # Density gradient thinning across y.
    keep = _density_keep(spec, _rng(spec, 8), pts[:, 1])
    pts = pts[keep]

    # Lift one road side about the road axis.
    if spec.slope_deg > 0:
        theta = math.radians(spec.slope_deg)
        lifted = pts[:, 1] > 0
        yy, zz = pts[lifted, 1].copy(), pts[lifted, 2].copy()
        pts[lifted, 1] = yy * math.cos(theta) - zz * math.sin(theta)
        pts[lifted, 2] = yy * math.sin(theta) + zz * math.cos(theta)

    if spec.min_point_spacing > 0:
        pts = _thin_min_spacing(pts, spec.min_point_spacing)

    truth = _build_truth(spec)
    return SyntheticScene(PointCloud(pts), tuple(truth), spec)


def _thin_min_spacing(pts: np.ndarray, spacing: float) -> np.ndarray:
    """Drop points so every surviving pair is at least ``spacing`` apart.

    One point per spacing-sized cell (first in input order), then one sweep
    over the 13 forward neighbor-cell directions dropping the later point of
    any remaining close pair.
    """
    from .voxel import pack_keys

    cells = np.floor(pts / spacing).astype(np.int64)
    keys = pack_keys(cells)
    _, first = np.unique(keys, return_index=True)
    first.sort()
    pts = pts[first]
    keys = keys[first]
    order = np.argsort(keys)
    pts = pts[order]
    keys = keys[order]

    drop = np.zeros(len(pts), dtype=bool)
    offsets = [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)]
    forward = [d for d in offsets if d > (0, 0, 0)]
    for di, dj, dk in forward:
        nb = keys + ((di << 42) + (dj << 21) + dk)
        pos = np.searchsorted(keys, nb)
        pos_c = np.minimum(pos, len(keys) - 1)
        hit = keys[pos_c] == nb
        if not hit.any():
            continue
        src = np.nonzero(hit)[0]
        dst = pos_c[hit]
        dist2 = ((pts[src] - pts[dst]) ** 2).sum(axis=1)
        close = dist2 < spacing * spacing
        # Drop the later point of each close pair (larger packed key).
        drop[np.maximum(src[close], dst[close])] = True
    return pts[~drop]


def _rotate_truth(spec: SceneSpec, verts: np.ndarray) -> np.ndarray:
    if spec.slope_deg <= 0:
        return verts
    theta = math.radians(spec.slope_deg)
    out = verts.copy()
    lifted = out[:, 1] > 0
    yy, zz = out[lifted, 1].copy(), out[lifted, 2].copy()
    out[lifted, 1] = yy * math.cos(theta) - zz * math.sin(theta)
    out[lifted, 2] = yy * math.sin(theta) + zz * math.cos(theta)
    return out


def _top_edge_polyline(spec: SceneSpec, side: float, x0: float, x1: float, name: str) -> list[Polyline3]:
    """Truth polylines for one curb-top edge over [x0, x1], split at ramps."""
    h = spec.curb_height
    bevel = _bevel_offset(spec)
    y_top = side * (spec.road_width / 2.0 + bevel)

    # Sample densely through ramp transitions so the polyline follows the
    # exact top edge; elsewhere straight spans suffice.
    xs = [x0, x1]
    for start, length in spec.ramps:
        for edge in (start - _RAMP_TRANSITION, start, start + length, start + length + _RAMP_TRANSITION):
            if x0 < edge < x1:
                xs.append(edge)
        t = np.arange(start - _RAMP_TRANSITION, start + length + _RAMP_TRANSITION + 1e-9, 0.1)
        xs.extend(float(v) for v in t if x0 < v < x1)
    xs = np.array(sorted(set(xs)))
    cf = _curb_factor(spec, xs)
    z = cf * h
    y = side * (spec.road_width / 2.0 + bevel * cf)

    segments: list[np.ndarray] = []
    seg: list[tuple[float, float, float]] = []
    for xe, ye, ze, c in zip(xs, y, z, cf):
        if c * h < 0.02:  # curb effectively gone
            if len(seg) >= 2:
                segments.append(np.array(seg))
            seg = []
        else:
            seg.append((xe, ye, ze))
    if len(seg) >= 2:
        segments.append(np.array(seg))

    out = []
    for part, verts in enumerate(segments):
        suffix = f"_{part}" if len(segments) > 1 else ""
        out.append(Polyline3(_rotate_truth(spec, verts), name=f"{name}{suffix}"))
    return out


def _build_truth(spec: SceneSpec) -> list[Polyline3]:
    truth: list[Polyline3] = []
    length = spec.road_length
    for side, tag in ((1.0, "curb_left"), (-1.0, "curb_right")):
        if spec.intersection:
            xc, half, arm_end = _intersection_geometry(spec)
            cg = half + _CORNER_GAP
            truth += _top_edge_polyline(spec, side, 0.0, xc - cg, f"{tag}_a")
            truth += _top_edge_polyline(spec, side, xc + cg, length, f"{tag}_b")
            bevel = _bevel_offset(spec)
            h = spec.curb_height
            for sgn in (1.0, -1.0):
                x_top = xc + sgn * (half + bevel)
                y0, y1 = side * (half + _CORNER_GAP), side * arm_end
                verts = _rotate_truth(
                    spec, np.array([[x_top, y0, h], [x_top, y1, h]])
                )
                truth.append(Polyline3(verts, name=f"int_arm_{tag[5:]}_{'p' if sgn > 0 else 'm'}"))
        else:
            truth += _top_edge_polyline(spec, side, 0.0, length, tag)
    return truth


def min_pairwise_distance(points: np.ndarray) -> float:
    """Smallest distance between any two points (grid-accelerated)."""
    from scipy.spatial import cKDTree

    tree = cKDTree(points)
    dist, _ = tree.query(points, k=2, workers=1)
    return float(dist[:, 1].min())


def add_noise(scene: SyntheticScene, t: float) -> SyntheticScene:
    """Perturb each coordinate uniformly in [-t*d, t*d], d = min pairwise distance."""
    if t < 0:
        raise ValidationError(f"noise level must be >= 0, got {t}")
    if t == 0:
        return scene
    d = min_pairwise_distance(scene.cloud.points)
    rng = _rng(scene.spec, 7001)
    noise = rng.uniform(-t * d, t * d, scene.cloud.points.shape)
    return replace(scene, cloud=PointCloud(scene.cloud.points + noise))


def downsample(scene: SyntheticScene, keep_fraction: float) -> SyntheticScene:
    """Seeded uniform subset of exactly floor(fraction * n) points."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValidationError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if keep_fraction == 1.0:
        return scene
    n = len(scene.cloud)
    n_keep = int(np.floor(keep_fraction * n))
    if n_keep < 100:
        raise ValidationError(f"downsampling would leave {n_keep} points (minimum 100)")
    rng = _rng(scene.spec, 7002)
    idx = rng.choice(n, size=n_keep, replace=False)
    idx.sort()
    return replace(scene, cloud=PointCloud(scene.cloud.points[idx]))


def add_scanner_gap(scene: SyntheticScene, gap_axis_offset: float, gap_width: float) -> SyntheticScene:
    """Remove road-surface points inside a strip parallel to the road."""
    if gap_width < 0:
        raise ValidationError("gap_width must be >= 0")
    if gap_width == 0:
        return scene
    spec = scene.spec
    half = spec.road_width / 2.0
    if abs(gap_axis_offset) + gap_width / 2.0 > half - 0.2:
        raise ValidationError("scanner gap strip overlaps or touches a curb")
    pts = scene.cloud.points
    in_strip = (np.abs(pts[:, 1] - gap_axis_offset) <= gap_width / 2.0) & (
        pts[:, 2] < spec.curb_height / 2.0
    )
    return replace(scene, cloud=PointCloud(pts[~in_strip]))
