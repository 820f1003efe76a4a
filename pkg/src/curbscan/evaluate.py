"""Scoring of extracted curbs against ground truth, plus line-fit baselines.

Every evaluated point is classified against the result polylines L and the
truth polylines L' using a distance threshold D: within D of both is TP, of
only L is FP, of only L' is FN, of neither is TN ("within" is a strict
inequality, so boundary points fall outside the band). The four ratios

    TPR = TP/(TP+FN)   completeness of curbs
    TNR = TN/(FP+TN)   completeness of non-curbs
    PPV = TP/(TP+FP)   correctness of curbs
    NPV = TN/(TN+FN)   correctness of non-curbs

are reported per distance threshold and per zone; a zero denominator makes
the ratio absent, never 0. Zones come from truth polyline names: names
starting with ``int`` count as intersection areas, the rest as straight
ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io import PointCloud, Polyline3
from .errors import ValidationError

ZONE_STRAIGHT = "SL"
ZONE_INTERSECTION = "Int"
ZONE_ALL = "All"


def _segments(lines: list[Polyline3]) -> tuple[np.ndarray, np.ndarray]:
    starts, ends = [], []
    for pl in lines:
        starts.append(pl.vertices[:-1])
        ends.append(pl.vertices[1:])
    if not starts:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.concatenate(starts), np.concatenate(ends)


def _point_segment_distance_sq(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distance from each point to segment ab."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        diff = points - a
        return (diff * diff).sum(axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    diff = points - proj
    return (diff * diff).sum(axis=1)


def point_to_polyline_distance(points: np.ndarray, lines: list[Polyline3]) -> np.ndarray:
    """Minimum Euclidean distance from each point to any polyline segment."""
    if not lines:
        raise ValidationError("need at least one polyline")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    starts, ends = _segments(lines)
    best = np.full(len(pts), np.inf)
    for a, b in zip(starts, ends):
        best = np.minimum(best, _point_segment_distance_sq(pts, a, b))
    return np.sqrt(best)


def within_distance(points: np.ndarray, lines: list[Polyline3], d: float) -> np.ndarray:
    """Boolean mask: strict distance < d to any segment; grid-pruned.

    Equivalent to ``point_to_polyline_distance(points, lines) < d`` but
    only tests points near each segment's bounding box, which keeps large
    clouds cheap.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(pts)
    mask = np.zeros(n, dtype=bool)
    if not lines or d <= 0:
        return mask
    cell = max(d, 0.25)
    cx = np.floor(pts[:, 0] / cell).astype(np.int64)
    cy = np.floor(pts[:, 1] / cell).astype(np.int64)
    cell_key = cx * (1 << 31) + cy
    order = np.argsort(cell_key, kind="stable")
    sorted_keys = cell_key[order]

    starts, ends = _segments(lines)
    d2 = d * d
    for a, b in zip(starts, ends):
        lo = np.minimum(a[:2], b[:2]) - d
        hi = np.maximum(a[:2], b[:2]) + d
        x0, x1 = int(np.floor(lo[0] / cell)), int(np.floor(hi[0] / cell))
        y0, y1 = int(np.floor(lo[1] / cell)), int(np.floor(hi[1] / cell))
        for gx in range(x0, x1 + 1):
            base = gx * (1 << 31)
            s = np.searchsorted(sorted_keys, base + y0)
            e = np.searchsorted(sorted_keys, base + y1, side="right")
            if s >= e:
                continue
            rows = order[s:e]
            rows = rows[~mask[rows]]
            if not len(rows):
                continue
            close = _point_segment_distance_sq(pts[rows], a, b) < d2
            mask[rows[close]] = True
    return mask


@dataclass(frozen=True)
class ClassCounts:
    tp: int
    tn: int
    fp: int
    fn: int
    d: float

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass(frozen=True)
class MetricsRow:
    zone: str
    counts: ClassCounts

    @property
    def tpr(self) -> float | None:
        return _ratio(self.counts.tp, self.counts.tp + self.counts.fn)

    @property
    def tnr(self) -> float | None:
        return _ratio(self.counts.tn, self.counts.fp + self.counts.tn)

    @property
    def ppv(self) -> float | None:
        return _ratio(self.counts.tp, self.counts.tp + self.counts.fp)

    @property
    def npv(self) -> float | None:
        return _ratio(self.counts.tn, self.counts.tn + self.counts.fn)


@dataclass(frozen=True)
class MetricsReport:
    rows: tuple[MetricsRow, ...]

    def row(self, zone: str, d: float) -> MetricsRow:
        for r in self.rows:
            if r.zone == zone and r.counts.d == d:
                return r
        raise KeyError(f"no metrics row for zone={zone} D={d}")

    def thresholds(self) -> list[float]:
        seen = []
        for r in self.rows:
            if r.counts.d not in seen:
                seen.append(r.counts.d)
        return seen


def zone_of_points(points: np.ndarray, truth: list[Polyline3]) -> np.ndarray:
    """Zone label per point: the zone of the nearest truth polyline."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    best = np.full(len(pts), np.inf)
    zone_int = np.zeros(len(pts), dtype=bool)
    for pl in truth:
        dist = point_to_polyline_distance(pts, [pl])
        closer = dist < best
        best[closer] = dist[closer]
        zone_int[closer] = pl.name.lower().startswith("int")
    return np.where(zone_int, ZONE_INTERSECTION, ZONE_STRAIGHT)


def classify_points(
    cloud: PointCloud,
    result: list[Polyline3],
    truth: list[Polyline3],
    d: float,
    zones: np.ndarray | None = None,
) -> dict[str, ClassCounts]:
    """TP/TN/FP/FN counts at threshold ``d``, per zone and overall."""
    if d <= 0:
        raise ValidationError(f"distance threshold must be positive, got {d}")
    pts = cloud.points
    in_result = within_distance(pts, result, d) if result else np.zeros(len(pts), dtype=bool)
    in_truth = within_distance(pts, truth, d) if truth else np.zeros(len(pts), dtype=bool)

    def counts(sel: np.ndarray) -> ClassCounts:
        r, t = in_result[sel], in_truth[sel]
        tp = int((r & t).sum())
        fp = int((r & ~t).sum())
        fn = int((~r & t).sum())
        tn = int((~r & ~t).sum())
        return ClassCounts(tp, tn, fp, fn, d)

    out = {ZONE_ALL: counts(np.ones(len(pts), dtype=bool))}
    if zones is not None:
        for zone in (ZONE_STRAIGHT, ZONE_INTERSECTION):
            sel = zones == zone
            if sel.any():
                out[zone] = counts(sel)
    return out


def metrics(
    cloud: PointCloud,
    result: list[Polyline3],
    truth: list[Polyline3],
    thresholds: tuple[float, ...] = (0.4, 0.2, 0.12, 0.08, 0.04),
) -> MetricsReport:
    """Full report over the threshold grid, rows ordered zone-major."""
    zones = zone_of_points(cloud.points, truth) if truth else None
    rows = []
    for d in thresholds:
        for zone, counts in classify_points(cloud, result, truth, d, zones).items():
            rows.append(MetricsRow(zone, counts))
    return MetricsReport(tuple(rows))


def _fmt_ratio(v: float | None) -> str:
    return "" if v is None else f"{v:.4f}"


def report_csv(report: MetricsReport) -> str:
    lines = ["zone,D,TP,TN,FP,FN,TPR,TNR,PPV,NPV"]
    for r in report.rows:
        c = r.counts
        lines.append(
            f"{r.zone},{c.d:g},{c.tp},{c.tn},{c.fp},{c.fn},"
            f"{_fmt_ratio(r.tpr)},{_fmt_ratio(r.tnr)},{_fmt_ratio(r.ppv)},{_fmt_ratio(r.npv)}"
        )
    return "\n".join(lines) + "\n"


def report_table(report: MetricsReport) -> str:
    """Human-readable table: metric/zone rows against the D grid."""
    ds = report.thresholds()
    zones = []
    for r in report.rows:
        if r.zone not in zones:
            zones.append(r.zone)
    header = "metric zone " + " ".join(f"D={d:g}" for d in ds)
    lines = [header]
    for name in ("tpr", "tnr", "ppv", "npv"):
        for zone in zones:
            vals = []
            for d in ds:
                try:
                    v = getattr(report.row(zone, d), name)
                except KeyError:
                    v = None
                vals.append("  -  " if v is None else f"{100 * v:5.2f}")
            lines.append(f"{name.upper():4s}   {zone:4s} " + " ".join(vals))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Line-fitting baselines
# ---------------------------------------------------------------------------


def fit_line_ls(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Total least squares 3D line: (centroid, unit direction)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(pts) < 2:
        raise ValidationError("fit_line_ls needs at least 2 points")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    if not centered.any():
        raise ValidationError("fit_line_ls: all points coincide")
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    direction = vt[0]
    pivot = int(np.argmax(np.abs(direction)))
    if direction[pivot] < 0:
        direction = -direction
    return centroid, direction


def line_point_distance(points: np.ndarray, origin: np.ndarray, direction: np.ndarray) -> np.ndarray:
    rel = np.atleast_2d(points) - origin
    along = rel @ direction
    return np.linalg.norm(rel - along[:, None] * direction[None, :], axis=1)


def fit_line_ransac(
    points: np.ndarray,
    iters: int = 100,
    inlier_tol: float = 0.05,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Robust line fit: best 2-point hypothesis by inlier count, LS refit.

    Deterministic given the seed; ties keep the earlier hypothesis.
    Returns (point, unit direction, inlier mask).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(pts) < 2:
        raise ValidationError("fit_line_ransac needs at least 2 points")
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    if inlier_tol <= 0:
        raise ValidationError("inlier_tol must be positive")
    rng = np.random.default_rng(seed)
    best_count = -1
    best_mask = None
    for _ in range(iters):
        i, j = rng.choice(len(pts), size=2, replace=False)
        d = pts[j] - pts[i]
        norm = np.linalg.norm(d)
        if norm == 0:
            continue
        dist = line_point_distance(pts, pts[i], d / norm)
        mask = dist <= inlier_tol
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            if count == len(pts):
                break  # every point is an inlier; no hypothesis can beat it
    if best_mask is None or best_count < 2:
        raise ValidationError("fit_line_ransac found no valid hypothesis")
    origin, direction = fit_line_ls(pts[best_mask])
    return origin, direction, best_mask
