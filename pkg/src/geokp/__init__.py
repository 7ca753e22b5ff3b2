"""Self-supervised, geodesic-consistent keypoints for deforming point clouds."""

__version__ = "0.1.0"

from .errors import GeokpError
from .geodesy import GeodesicMatrix, NeighborGraph, build_knn_graph, shortest_paths
from .losses import LossWeights, total_loss
from .metrics import MetricsReport, evaluate
from .nnet import ModelParams, forward, init_params
from .pcloud import PointCloud, SequenceWindow
from .synth import DeformSpec, Generator, generate
from .trainer import TrainConfig, infer, train

__all__ = [
    "DeformSpec",
    "GeodesicMatrix",
    "GeokpError",
    "Generator",
    "LossWeights",
    "MetricsReport",
    "ModelParams",
    "NeighborGraph",
    "PointCloud",
    "SequenceWindow",
    "TrainConfig",
    "build_knn_graph",
    "evaluate",
    "forward",
    "generate",
    "infer",
    "init_params",
    "shortest_paths",
    "total_loss",
    "train",
]
