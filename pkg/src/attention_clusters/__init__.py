"""Attention clusters for integrating sets of local features.

A numpy autodiff engine, the Flash-MNIST synthetic video dataset, a small CNN
frame extractor, attention clusters with the shifting operation, training,
ablation and visualisation tools, and the ``attention-clusters`` CLI.
"""

from .clusters import (
    AttentionCluster,
    AttentionUnitParams,
    Average,
    ClusterConfig,
    FC1,
    FC2,
    MultimodalClusters,
    attention_cluster,
    attention_unit,
    average_replicated_baseline,
    compute_weights,
    flatten_baseline,
    multimodal_concat,
)
from .config import RunConfig
from .errors import (
    AttentionClustersError,
    ConfigError,
    ConsistencyError,
    DataError,
    DegenerateVectorError,
    DimensionError,
    FormatError,
    NumericError,
    StorageError,
    TrainingError,
)
from .estimators import AttentionClusterClassifier, FrameFeatureExtractor
from .model import ClusterModel
from .tensor import Tensor
from .training import EvalReport, TrainConfig, evaluate, train_cluster

__version__ = "0.1.0"

__all__ = [
    "AttentionCluster",
    "AttentionClusterClassifier",
    "AttentionClustersError",
    "AttentionUnitParams",
    "Average",
    "ClusterConfig",
    "ClusterModel",
    "ConfigError",
    "ConsistencyError",
    "DataError",
    "DegenerateVectorError",
    "DimensionError",
    "EvalReport",
    "FC1",
    "FC2",
    "FormatError",
    "FrameFeatureExtractor",
    "MultimodalClusters",
    "NumericError",
    "RunConfig",
    "StorageError",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "attention_cluster",
    "attention_unit",
    "average_replicated_baseline",
    "compute_weights",
    "evaluate",
    "flatten_baseline",
    "multimodal_concat",
    "train_cluster",
]
