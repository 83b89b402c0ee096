"""Part-based hierarchical graph convolution for person retrieval, in plain numpy."""

from .dataset import (Dataset, FeatureMap, PartFeatureSet, PartitionSpec, SynthConfig,
                      generate_synthetic, partition_pool, read_phgf, write_phgf)
from .gcnnet import ModelParams, backward, forward, init_params
from .optim import TrainConfig, grad_check, train
from .partgraph import auto_delta, build_topology, edge_weights, row_normalize
from .retrieval import EvalReport, cmc, embed, evaluate, mean_ap, pairwise_distances

__all__ = [
    "Dataset", "FeatureMap", "PartFeatureSet", "PartitionSpec", "SynthConfig",
    "generate_synthetic", "partition_pool", "read_phgf", "write_phgf",
    "ModelParams", "backward", "forward", "init_params",
    "TrainConfig", "grad_check", "train",
    "auto_delta", "build_topology", "edge_weights", "row_normalize",
    "EvalReport", "cmc", "embed", "evaluate", "mean_ap", "pairwise_distances",
]
