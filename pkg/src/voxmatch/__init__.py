"""Dense correspondences between articulated voxel shapes.

Shapes are embedded with Laplacian eigenmaps, their eigenfunctions are
paired by histogram comparison, and the embedded point sets are registered
by EM under an orthogonal transform with a uniform outlier class.
"""

__version__ = "0.1.0"

from .align import AlignConfig, EigenAlignment, align_eigenfunctions
from .em import EMConfig, RegistrationResult, run_em
from .embedding import Embedding, embed
from .evaluate import CorrespondenceRecord, Metrics, evaluate
from .graph import GraphConfig, ShapeGraph, VoxelSet, build_graph, normalized_laplacian
from .io import load_voxels, save_voxels
from .pipeline import MatchConfig, match_pipeline, match_voxels
from .synth import SyntheticShape, synth_articulated

__all__ = [
    "AlignConfig",
    "CorrespondenceRecord",
    "EMConfig",
    "EigenAlignment",
    "Embedding",
    "GraphConfig",
    "MatchConfig",
    "Metrics",
    "RegistrationResult",
    "ShapeGraph",
    "SyntheticShape",
    "VoxelSet",
    "align_eigenfunctions",
    "build_graph",
    "embed",
    "evaluate",
    "load_voxels",
    "match_pipeline",
    "match_voxels",
    "normalized_laplacian",
    "run_em",
    "save_voxels",
    "synth_articulated",
]
