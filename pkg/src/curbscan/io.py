"""Point cloud and polyline file I/O.

Two line-oriented text formats are supported:

* XYZ clouds: one point per line, ``x y z [extra...]``, ``#`` starts a
  comment line, blank lines are skipped. Extra fields are ignored.
* Polylines: records separated by blank lines. Each record starts with a
  header line ``POLYLINE <id> <n_vertices>`` followed by ``n_vertices``
  lines of ``x y z``. The id is a free-form token (no whitespace); ids
  beginning with ``int`` mark intersection-zone curbs, everything else is
  treated as a straight-line zone.

Coordinates are kept in float64 end to end and written with enough digits
that a read/write round trip reproduces them to better than 1e-9 m even at
UTM-scale magnitudes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

_COORD_FMT = "%.17g"  # exact float64 round trip even at UTM magnitudes


@dataclass(frozen=True)
class PointCloud:
    """Immutable ordered set of 3D points, shape (n, 3) float64."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValidationError(f"point array must have shape (n, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise ValidationError("point cloud is empty")
        if not np.isfinite(pts).all():
            raise ValidationError("point cloud contains NaN or Inf coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Componentwise (min, max) corners."""
        return self.points.min(axis=0), self.points.max(axis=0)


@dataclass(frozen=True)
class Polyline3:
    """Ordered open polyline; at least 2 vertices, consecutive ones distinct."""

    vertices: np.ndarray
    closed: bool = False
    name: str = ""

    def __post_init__(self):
        verts = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise ValidationError(f"vertex array must have shape (n, 3), got {verts.shape}")
        if verts.shape[0] < 2:
            raise ValidationError("polyline needs at least 2 vertices")
        if not np.isfinite(verts).all():
            raise ValidationError("polyline contains NaN or Inf coordinates")
        if (np.diff(verts, axis=0) == 0.0).all(axis=1).any():
            raise ValidationError("polyline has coincident consecutive vertices")
        verts.setflags(write=False)
        object.__setattr__(self, "vertices", verts)

    def __len__(self) -> int:
        return self.vertices.shape[0]

    @property
    def length(self) -> float:
        """Total arc length in meters."""
        return float(np.linalg.norm(np.diff(self.vertices, axis=0), axis=1).sum())


def dedupe_vertices(verts: np.ndarray) -> np.ndarray:
    """Drop consecutive duplicate rows so the result is a valid polyline."""
    verts = np.asarray(verts, dtype=np.float64)
    if verts.shape[0] < 2:
        return verts
    keep = np.ones(verts.shape[0], dtype=bool)
    keep[1:] = (np.diff(verts, axis=0) != 0.0).any(axis=1)
    return verts[keep]


def read_xyz(path) -> PointCloud:
    """Read an ASCII XYZ cloud; raises ValidationError with the offending line number."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc

    # Fast path for large well-formed files; the line-by-line parser below is
    # only used to produce an exact diagnostic once something looks wrong.
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pts = np.loadtxt(text.splitlines(), usecols=(0, 1, 2), comments="#", ndmin=2)
    except Exception:
        pts = None
    if pts is not None and pts.size and np.isfinite(pts).all():
        return PointCloud(pts)

    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 3:
            raise ValidationError(f"{path}: line {lineno}: expected at least 3 fields, got {len(parts)}")
        try:
            x, y, z = float(parts[0]), float(parts[1]), float(parts[2])
        except ValueError as exc:
            raise ValidationError(f"{path}: line {lineno}: malformed numeric field") from exc
        if not (np.isfinite(x) and np.isfinite(y) and np.isfinite(z)):
            raise ValidationError(f"{path}: line {lineno}: non-finite coordinate")
        rows.append((x, y, z))
    if not rows:
        raise ValidationError(f"{path}: no valid points")
    return PointCloud(np.array(rows, dtype=np.float64))


def write_xyz(cloud: PointCloud, path) -> None:
    """Write a cloud in XYZ format (one ``x y z`` line per point)."""
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(np.asarray(cloud))
    try:
        with open(path, "w", encoding="utf-8") as fh:
            np.savetxt(fh, cloud.points, fmt=_COORD_FMT)
    except OSError as exc:
        raise ValidationError(f"cannot write {path}: {exc}") from exc


def read_polylines(path) -> list[Polyline3]:
    """Read polyline records; an empty file yields an empty list."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc

    out: list[Polyline3] = []
    i = 0
    n_lines = len(lines)
    while i < n_lines:
        line = lines[i].strip()
        if not line or line.startswith("#"):
            i += 1
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] != "POLYLINE":
            raise ValidationError(f"{path}: line {i + 1}: expected 'POLYLINE <id> <n_vertices>'")
        name = parts[1]
        try:
            n_verts = int(parts[2])
        except ValueError as exc:
            raise ValidationError(f"{path}: line {i + 1}: bad vertex count") from exc
        if n_verts < 2:
            raise ValidationError(f"{path}: line {i + 1}: polyline '{name}' has {n_verts} vertices (minimum 2)")
        verts = np.empty((n_verts, 3), dtype=np.float64)
        for k in range(n_verts):
            j = i + 1 + k
            if j >= n_lines:
                raise ValidationError(f"{path}: record '{name}': truncated vertex list")
            fields = lines[j].split()
            if len(fields) < 3:
                raise ValidationError(f"{path}: line {j + 1}: expected 'x y z'")
            try:
                verts[k] = [float(fields[0]), float(fields[1]), float(fields[2])]
            except ValueError as exc:
                raise ValidationError(f"{path}: line {j + 1}: malformed numeric field") from exc
        out.append(Polyline3(verts, name=name))
        i += 1 + n_verts
    return out


def write_polylines(lines: list[Polyline3], path) -> None:
    """Write polyline records; names default to their list position."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for k, pl in enumerate(lines):
                name = pl.name if pl.name else f"curb{k}"
                fh.write(f"POLYLINE {name} {len(pl)}\n")
                np.savetxt(fh, pl.vertices, fmt=_COORD_FMT)
                fh.write("\n")
    except OSError as exc:
        raise ValidationError(f"cannot write {path}: {exc}") from exc
