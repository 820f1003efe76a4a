"""Road curb extraction from mobile-LiDAR-style 3D point clouds.

The pipeline scores voxels of a sparse grid with a sampling-density
gradient energy (large only where the gradient is strong in at least two
directions, the signature of a curb edge) and links the selected candidate
voxels into globally optimal curb polylines with a least-cost-path dynamic
program. A synthetic scene generator with exact ground truth and a
TPR/TNR/PPV/NPV evaluation harness round out the package.

Typical use::

    from curbscan import CurbExtractor
    curbs = CurbExtractor().fit(points).polylines_
"""

from .errors import CurbscanError, ProcessingError, ValidationError
from .estimators import CurbExtractor, GroundFilter
from .io import PointCloud, Polyline3, read_polylines, read_xyz, write_polylines, write_xyz
from .voxel import VoxelGrid, build_grid

__version__ = "0.1.0"

__all__ = [
    "CurbExtractor",
    "GroundFilter",
    "PointCloud",
    "Polyline3",
    "VoxelGrid",
    "build_grid",
    "read_xyz",
    "write_xyz",
    "read_polylines",
    "write_polylines",
    "CurbscanError",
    "ValidationError",
    "ProcessingError",
    "__version__",
]
