"""Dynamic spatial-temporal hypergraph convolutional network for skeleton action recognition."""

from .hypergraph import IncidenceMatrix, normalize
from .layers import DSTHCN, ModelConfig, param_count
from .skeleton import NTU25, UCLA20, SkeletonDefinition
from .training import TrainConfig, lr_at

__all__ = [
    "DSTHCN", "IncidenceMatrix", "ModelConfig", "NTU25", "SkeletonDefinition",
    "TrainConfig", "UCLA20", "lr_at", "normalize", "param_count",
]
__version__ = "0.1.0"
