"""Ground extraction by elevation histogram peak analysis.

Road points dominate the elevation histogram of a street scene, so the
ground shows up as the global peak of the count function f(z). The retained
band is derived from the peak elevation m and the two extrema of the
derivative f' flanking it: [m - 2*(m - A), m - 2*(m - B)] with A below and
B above the peak.

Because that rule measures only the local width of the peak, it can clip
contiguous terrain such as steep cross-slopes that genuinely belong to the
ground. ``extend_band_by_occupancy`` widens a band outward through
contiguously occupied histogram bins, which keeps connected terrain while
still rejecting elevated structure (canopy, roofs) separated from the
ground by near-empty bins. The pipeline applies it by default; the band
formula itself is never altered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ProcessingError, ValidationError
from .io import PointCloud


@dataclass(frozen=True)
class ElevationHistogram:
    """Counts of points per elevation bin; bin i covers [z_min + i*w, z_min + (i+1)*w)."""

    bin_width: float
    z_min: float
    counts: np.ndarray  # raw counts, the function f
    smoothed: np.ndarray  # 3-bin moving average of f
    f_prime: np.ndarray  # central differences of the smoothed counts

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    def centers(self) -> np.ndarray:
        return self.z_min + (np.arange(self.n_bins) + 0.5) * self.bin_width

    def bin_of(self, z: float) -> int:
        return int(np.clip((z - self.z_min) // self.bin_width, 0, self.n_bins - 1))


@dataclass(frozen=True)
class GroundBand:
    """Elevation interval retained as ground."""

    z_low: float
    z_high: float
    m: float
    a: float
    b: float


def build_histogram(cloud: PointCloud, bin_width: float = 0.05) -> ElevationHistogram:
    """Histogram of point elevations covering [min z, max z]."""
    if bin_width <= 0:
        raise ValidationError(f"bin_width must be positive, got {bin_width}")
    z = cloud.points[:, 2]
    z_min = float(z.min())
    z_max = float(z.max())
    n_bins = int(np.floor((z_max - z_min) / bin_width)) + 1
    bins = np.clip(((z - z_min) / bin_width).astype(np.int64), 0, n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins).astype(np.int64)

    # Noise-robust derivative: 3-bin moving average first, then central
    # differences. Raw count derivatives oscillate bin to bin.
    kernel = np.ones(3) / 3.0
    smoothed = np.convolve(counts.astype(np.float64), kernel, mode="same")
    f_prime = np.zeros_like(smoothed)
    if n_bins >= 3:
        f_prime[1:-1] = (smoothed[2:] - smoothed[:-2]) / 2.0
        f_prime[0] = smoothed[1] - smoothed[0]
        f_prime[-1] = smoothed[-1] - smoothed[-2]
    return ElevationHistogram(float(bin_width), z_min, counts, smoothed, f_prime)


def _fprime_extrema(hist: ElevationHistogram) -> np.ndarray:
    """Bin indices where f' has a local extremum (strict sign change of its derivative)."""
    g = np.diff(hist.f_prime)
    if len(g) < 2:
        return np.array([], dtype=np.int64)
    sign_change = g[:-1] * g[1:] < 0
    return np.nonzero(sign_change)[0] + 1


def find_ground_band(hist: ElevationHistogram) -> GroundBand:
    """Band [m - 2*(m - A), m - 2*(m - B)] around the histogram peak m.

    A and B are the elevations of the f' extrema nearest the peak from
    below and above. A missing flank falls back to m -/+ 3 bin widths.
    """
    counts = hist.counts
    peak_val = counts.max()
    peaks = np.nonzero(counts == peak_val)[0]
    if len(peaks) != 1:
        raise ProcessingError("elevation histogram has no unique global peak")
    peak_bin = int(peaks[0])
    centers = hist.centers()
    m = float(centers[peak_bin])

    extrema = _fprime_extrema(hist)
    below = extrema[extrema < peak_bin]
    above = extrema[extrema > peak_bin]

    if len(below):
        a = float(centers[below[np.argmin(peak_bin - below)]])
    else:
        a = m - 3.0 * hist.bin_width
    if len(above):
        b = float(centers[above[np.argmin(above - peak_bin)]])
    else:
        b = m + 3.0 * hist.bin_width

    z_low = m - 2.0 * (m - a)
    z_high = m - 2.0 * (m - b)
    if z_low >= z_high:
        raise ProcessingError(f"degenerate ground band [{z_low}, {z_high}]")
    return GroundBand(z_low, z_high, m, a, b)


def extend_band_by_occupancy(
    hist: ElevationHistogram, band: GroundBand, floor_fraction: float = 0.005
) -> GroundBand:
    """Widen a band through contiguously occupied bins.

    Walks outward from the band edges while bins hold at least
    ``floor_fraction`` of the peak count (at least 1 point). Stops at the
    first near-empty bin, so structure separated from the ground by a gap
    (canopy, roofs) stays excluded.
    """
    floor = max(1.0, floor_fraction * hist.counts.max())
    lo_bin = hist.bin_of(band.z_low)
    hi_bin = hist.bin_of(band.z_high)
    while lo_bin > 0 and hist.counts[lo_bin - 1] >= floor:
        lo_bin -= 1
    while hi_bin < hist.n_bins - 1 and hist.counts[hi_bin + 1] >= floor:
        hi_bin += 1
    z_low = min(band.z_low, hist.z_min + lo_bin * hist.bin_width)
    z_high = max(band.z_high, hist.z_min + (hi_bin + 1) * hist.bin_width)
    return GroundBand(z_low, z_high, band.m, band.a, band.b)


def filter_ground(cloud: PointCloud, band: GroundBand) -> PointCloud:
    """Keep exactly the points with z_low <= z <= z_high, order preserved."""
    z = cloud.points[:, 2]
    mask = (z >= band.z_low) & (z <= band.z_high)
    if not mask.any():
        raise ProcessingError("ground band retains no points; band and scene do not match")
    return PointCloud(cloud.points[mask])


def extract_ground(
    cloud: PointCloud,
    bin_width: float = 0.05,
    extend_band: bool = True,
    tile_size: float | None = None,
) -> PointCloud:
    """Full ground filtering stage: histogram, band, optional extension.

    With ``tile_size`` set, the cloud is cut into square x/y tiles of that
    edge length and a band is computed per tile, which follows gradual
    elevation changes across large scenes. Tiles with fewer than 100 points
    reuse the global band.
    """
    hist = build_histogram(cloud, bin_width)
    band = find_ground_band(hist)
    if extend_band:
        band = extend_band_by_occupancy(hist, band)
    if tile_size is None:
        return filter_ground(cloud, band)

    pts = cloud.points
    tiles = np.floor(pts[:, :2] / tile_size).astype(np.int64)
    tile_ids = tiles[:, 0] * (1 << 31) + tiles[:, 1]
    keep = np.zeros(len(pts), dtype=bool)
    for tid in np.unique(tile_ids):
        sel = tile_ids == tid
        sub = pts[sel]
        if sel.sum() < 100:
            tb = band
        else:
            try:
                th = build_histogram(PointCloud(sub), bin_width)
                tb = find_ground_band(th)
                if extend_band:
                    tb = extend_band_by_occupancy(th, tb)
            except ProcessingError:
                tb = band
        keep[sel] = (sub[:, 2] >= tb.z_low) & (sub[:, 2] <= tb.z_high)
    if not keep.any():
        raise ProcessingError("ground band retains no points; band and scene do not match")
    return PointCloud(pts[keep])
