"""Metric learning with two-stage hard-sample generation."""
from .dataset import FeatureDataset, generate_gaussian_mixture, load_features, split_by_class
from .evaluation import MetricsReport, evaluate
from .mining import MinerKind, mine
from .networks import EmbeddingBatch, ModelBundle, Mlp, init_bundle
from .trainer import TrainConfig, full_scale_config, train

__all__ = [
    "EmbeddingBatch",
    "FeatureDataset",
    "MetricsReport",
    "MinerKind",
    "Mlp",
    "ModelBundle",
    "TrainConfig",
    "evaluate",
    "generate_gaussian_mixture",
    "init_bundle",
    "load_features",
    "mine",
    "full_scale_config",
    "split_by_class",
    "train",
]
