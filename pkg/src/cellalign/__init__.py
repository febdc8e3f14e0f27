"""Cell-level alignment of paired tissue sections from cell centroids and morphology.

The coarse stage registers centroids with rigid Coherent Point Drift; the fine
stage matches local proximity graphs with reweighted random walks, filters the
matches by neighbourhood consistency and fits an affine transform.
"""

from .errors import CellAlignError
from .geometry import AffineTransform, RigidTransform, compose, invert
from .io import CellTable, LandmarkSet, SchemaConfig, read_cell_table, write_cell_table
from .pipeline import AlignmentConfig, AlignmentResult, align, align_large, supercell_cluster

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "CellAlignError",
    "RigidTransform",
    "AffineTransform",
    "compose",
    "invert",
    "CellTable",
    "LandmarkSet",
    "SchemaConfig",
    "read_cell_table",
    "write_cell_table",
    "AlignmentConfig",
    "AlignmentResult",
    "align",
    "align_large",
    "supercell_cluster",
]
